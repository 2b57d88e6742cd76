use clap::{Args, Parser, Subcommand};
use nmm::cli::{self, CliError, CompressArgs, Dims, InputFiles, KernelId, RunSpec, SweepAxis};
use nmm::io;
use nmm::matrix::Dtype;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "nmm",
    about = "Counter-exact accelerator simulator: low-rank matmul kernels, block planning, and SVD weight compression",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonRunArgs {
    /// Input rows (sequence length).
    #[arg(long)]
    m: usize,
    /// Contraction dim (hidden size).
    #[arg(long)]
    k: usize,
    /// Low-rank dim of U/V.
    #[arg(long, default_value_t = 0)]
    rank: usize,
    /// Output columns (intermediate size).
    #[arg(long)]
    n: usize,
    /// Down-projection rank (mlp kernel).
    #[arg(long, default_value_t = 0)]
    rank2: usize,
    /// Element type of generated/loaded matrices.
    #[arg(long, default_value = "f32", value_parser = parse_dtype)]
    dtype: Dtype,
    /// Seed for generated inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Machine config file (TOML). Falls back to $NMM_MACHINE, then the
    /// built-in core.
    #[arg(long)]
    machine: Option<PathBuf>,
    /// Block size overrides (elements).
    #[arg(long)]
    bm: Option<usize>,
    #[arg(long)]
    bk: Option<usize>,
    #[arg(long)]
    br: Option<usize>,
    #[arg(long)]
    bn: Option<usize>,
    /// Input X is already transposed (K x M) in HBM.
    #[arg(long)]
    is_xt: bool,
    /// Emit the transposed output O^T.
    #[arg(long)]
    req_ot: bool,
    /// Check the output against the dense reference (exit 4 on mismatch).
    #[arg(long)]
    verify: bool,
    /// Let the strip cache spill to HBM instead of failing.
    #[arg(long)]
    allow_spill: bool,
    /// Skip value movement; counters only.
    #[arg(long)]
    counters_only: bool,
}

#[derive(Args, Clone, Default)]
struct FileArgs {
    /// NMM1 file overrides for individual operands.
    #[arg(long)]
    x_file: Option<PathBuf>,
    #[arg(long)]
    w_file: Option<PathBuf>,
    #[arg(long)]
    u_file: Option<PathBuf>,
    #[arg(long)]
    v_file: Option<PathBuf>,
    #[arg(long)]
    u_gate_file: Option<PathBuf>,
    #[arg(long)]
    v_gate_file: Option<PathBuf>,
    #[arg(long)]
    u_up_file: Option<PathBuf>,
    #[arg(long)]
    v_up_file: Option<PathBuf>,
    #[arg(long)]
    u_down_file: Option<PathBuf>,
    #[arg(long)]
    v_down_file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Compress the weights listed in a manifest into block-aligned
    /// low-rank factor files.
    Compress {
        /// JSON manifest: {"weights": [{"name", "path", "calib"?}]}.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        #[arg(long, default_value_t = 128)]
        block_size: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Cholesky jitter; defaults to 1e-6 * trace/n.
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long, default_value = "compressed")]
        out_dir: PathBuf,
    },
    /// Run one kernel and write its report.
    Run {
        /// xw | xuv-seq | xuv-naive | xuv-fused | upgate | mlp
        kernel: String,
        #[command(flatten)]
        common: CommonRunArgs,
        #[command(flatten)]
        files: FileArgs,
        /// Report path (JSON). Prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save the output matrix (NMM1).
        #[arg(long)]
        save_output: Option<PathBuf>,
    },
    /// Sweep one parameter, writing a CSV and JSON report series.
    Sweep {
        kernel: String,
        #[command(flatten)]
        common: CommonRunArgs,
        /// Sweep axis, e.g. "bm=128,256,512,1024" or "m=1024,2048".
        #[arg(long)]
        sweep: String,
        /// Output prefix; writes <prefix>.csv and <prefix>.json.
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Run several kernels on the same shapes and compare counters.
    Compare {
        /// Comma-separated kernel ids.
        kernels: String,
        #[command(flatten)]
        common: CommonRunArgs,
        /// Also write the comparison as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    match s {
        "f32" => Ok(Dtype::F32),
        "bf16" => Ok(Dtype::Bf16),
        other => Err(format!("unknown dtype '{other}' (f32 or bf16)")),
    }
}

fn build_spec(kernel: &str, common: &CommonRunArgs, files: FileArgs) -> Result<RunSpec, CliError> {
    let kernel = KernelId::from_str(kernel)?;
    let dims = Dims {
        m: common.m,
        k: common.k,
        r: common.rank,
        n: common.n,
        r2: common.rank2,
    };
    let mut spec = RunSpec::new(kernel, dims);
    spec.dtype = common.dtype;
    spec.seed = common.seed;
    spec.blocks = [common.bm, common.bk, common.br, common.bn];
    spec.is_xt = common.is_xt;
    spec.req_ot = common.req_ot;
    spec.verify = common.verify;
    spec.allow_spill = common.allow_spill;
    spec.counters_only = common.counters_only;
    spec.files = InputFiles {
        x: files.x_file,
        w: files.w_file,
        u: files.u_file,
        v: files.v_file,
        u_gate: files.u_gate_file,
        v_gate: files.v_gate_file,
        u_up: files.u_up_file,
        v_up: files.v_up_file,
        u_down: files.u_down_file,
        v_down: files.v_down_file,
    };
    Ok(spec)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Compress {
            weights,
            ratio,
            block_size,
            alpha,
            jitter,
            out_dir,
        } => {
            let args = CompressArgs {
                ratio,
                block_size,
                alpha,
                jitter,
            };
            let entries = cli::cmd_compress(&weights, args, &out_dir)?;
            for e in &entries {
                println!(
                    "{}: [{}, {}] -> u {:?} v {:?} rank {} achieved {:.4}{}",
                    e.name,
                    e.weight_shape[0],
                    e.weight_shape[1],
                    e.u_shape,
                    e.v_shape,
                    e.rank,
                    e.achieved_ratio,
                    if e.over_retained {
                        " (over-retained)"
                    } else {
                        ""
                    }
                );
            }
            println!(
                "wrote {} factor pairs + compress_manifest.json under {}",
                entries.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Run {
            kernel,
            common,
            files,
            out,
            save_output,
        } => {
            let cfg = cli::load_machine_config(common.machine.as_deref())?;
            let spec = build_spec(&kernel, &common, files)?;
            let (report, output) = cli::cmd_run(&spec, &cfg)?;
            let json = report.to_json();
            match out {
                Some(path) => {
                    std::fs::write(&path, &json).map_err(|e| CliError::Validation(e.to_string()))?
                }
                None => println!("{json}"),
            }
            if let Some(path) = save_output {
                let m = output.ok_or_else(|| {
                    CliError::Validation(
                        "--save-output requires value movement; drop --counters-only".into(),
                    )
                })?;
                io::write_matrix(&path, &m)?;
            }
            Ok(())
        }
        Command::Sweep {
            kernel,
            common,
            sweep,
            out,
        } => {
            let cfg = cli::load_machine_config(common.machine.as_deref())?;
            // Sweeps default to counters-only unless verification is on.
            let mut spec = build_spec(&kernel, &common, FileArgs::default())?;
            if !spec.verify {
                spec.counters_only = true;
            }
            let axis = SweepAxis::parse(&sweep)?;
            let points = cli::cmd_sweep(&spec, &axis, &cfg)?;
            let csv_path = out.with_extension("csv");
            let json_path = out.with_extension("json");
            cli::write_sweep_csv(&csv_path, &points)?;
            std::fs::write(
                &json_path,
                serde_json::to_string_pretty(&points).expect("sweep serializes"),
            )
            .map_err(|e| CliError::Validation(e.to_string()))?;
            let failures = points.iter().filter(|p| p.error.is_some()).count();
            println!(
                "swept {} over {} points ({} failed); wrote {} and {}",
                axis.param,
                points.len(),
                failures,
                csv_path.display(),
                json_path.display()
            );
            Ok(())
        }
        Command::Compare {
            kernels,
            common,
            out,
        } => {
            let cfg = cli::load_machine_config(common.machine.as_deref())?;
            let ids = kernels
                .split(',')
                .map(|s| KernelId::from_str(s.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            let base = build_spec(ids[0].name(), &common, FileArgs::default())?;
            let rows = cli::cmd_compare(&ids, &base, &cfg)?;
            print!("{}", cli::render_compare_table(&rows));
            if let Some(path) = out {
                std::fs::write(
                    &path,
                    serde_json::to_string_pretty(&rows).expect("rows serialize"),
                )
                .map_err(|e| CliError::Validation(e.to_string()))?;
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
