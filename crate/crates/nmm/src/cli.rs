//! Command-line harness: run single kernels, sweep block sizes, compare
//! strategies, and compress weights, emitting machine-readable reports.
//!
//! All entry points are library functions so the binary stays a thin
//! argument-parsing shell and tests can drive the exact command paths.

use crate::compress::{self, ManifestEntry};
use crate::error::{CompressError, KernelError, MachineError, PlanError};
use crate::io;
use crate::kernels::{self, KernelOptions, KernelResult};
use crate::layout::{self, BlockPlan};
use crate::linalg;
use crate::machine::{Machine, MachineConfig};
use crate::matrix::{Dtype, Matrix};
use crate::report::RunReport;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming a default machine config file.
pub const MACHINE_ENV: &str = "NMM_MACHINE";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("infeasible plan: {0}")]
    Infeasible(String),
    #[error("output does not match the dense reference: {0}")]
    VerifyFailed(String),
}

impl CliError {
    /// Process exit code: 2 validation, 3 infeasible plan, 4 verify failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::VerifyFailed(_) => 4,
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::Plan(PlanError::Infeasible { .. })
            | KernelError::Plan(PlanError::PsumInfeasible { .. })
            | KernelError::Machine(MachineError::AllocTooLarge { .. })
            | KernelError::Machine(MachineError::PinnedEviction { .. }) => {
                CliError::Infeasible(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        CliError::from(KernelError::Plan(e))
    }
}

impl From<crate::error::TensorError> for CliError {
    fn from(e: crate::error::TensorError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CompressError> for CliError {
    fn from(e: CompressError) -> Self {
        match e {
            CompressError::RankInfeasible { .. } => CliError::Infeasible(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelId {
    Xw,
    XuvSeq,
    XuvNaive,
    XuvFused,
    UpGate,
    Mlp,
}

impl KernelId {
    pub const ALL: [KernelId; 6] = [
        KernelId::Xw,
        KernelId::XuvSeq,
        KernelId::XuvNaive,
        KernelId::XuvFused,
        KernelId::UpGate,
        KernelId::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelId::Xw => "xw",
            KernelId::XuvSeq => "xuv-seq",
            KernelId::XuvNaive => "xuv-naive",
            KernelId::XuvFused => "xuv-fused",
            KernelId::UpGate => "upgate",
            KernelId::Mlp => "mlp",
        }
    }

    pub fn needs_rank(self) -> bool {
        !matches!(self, KernelId::Xw)
    }
}

impl std::str::FromStr for KernelId {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "xw" => Ok(KernelId::Xw),
            "xuv-seq" => Ok(KernelId::XuvSeq),
            "xuv-naive" => Ok(KernelId::XuvNaive),
            "xuv-fused" => Ok(KernelId::XuvFused),
            "upgate" => Ok(KernelId::UpGate),
            "mlp" => Ok(KernelId::Mlp),
            other => Err(CliError::Validation(format!(
                "unknown kernel '{other}'; expected one of xw, xuv-seq, xuv-naive, xuv-fused, upgate, mlp"
            ))),
        }
    }
}

impl std::fmt::Display for KernelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Problem dimensions for one launch.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub m: usize,
    pub k: usize,
    pub r: usize,
    pub n: usize,
    /// Down-projection rank; only MLP runs use it.
    pub r2: usize,
}

/// Per-operand NMM1 file overrides; anything absent is generated from the
/// run seed.
#[derive(Debug, Clone, Default)]
pub struct InputFiles {
    pub x: Option<PathBuf>,
    pub w: Option<PathBuf>,
    pub u: Option<PathBuf>,
    pub v: Option<PathBuf>,
    pub u_gate: Option<PathBuf>,
    pub v_gate: Option<PathBuf>,
    pub u_up: Option<PathBuf>,
    pub v_up: Option<PathBuf>,
    pub u_down: Option<PathBuf>,
    pub v_down: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub kernel: KernelId,
    pub dims: Dims,
    pub dtype: Dtype,
    pub seed: u64,
    /// Explicit block overrides (b_m, b_k, b_r, b_n); `None` entries come
    /// from the planner.
    pub blocks: [Option<usize>; 4],
    pub is_xt: bool,
    pub req_ot: bool,
    pub verify: bool,
    pub allow_spill: bool,
    /// Skip value movement (counters only). Incompatible with `verify`.
    pub counters_only: bool,
    pub files: InputFiles,
}

impl RunSpec {
    pub fn new(kernel: KernelId, dims: Dims) -> Self {
        RunSpec {
            kernel,
            dims,
            dtype: Dtype::F32,
            seed: 0,
            blocks: [None; 4],
            is_xt: false,
            req_ot: false,
            verify: false,
            allow_spill: false,
            counters_only: false,
            files: InputFiles::default(),
        }
    }
}

pub fn load_machine_config(flag: Option<&Path>) -> Result<MachineConfig, CliError> {
    if let Some(path) = flag {
        return MachineConfig::load(path).map_err(|e| CliError::Validation(e.to_string()));
    }
    if let Ok(path) = std::env::var(MACHINE_ENV) {
        return MachineConfig::load(Path::new(&path))
            .map_err(|e| CliError::Validation(format!("{MACHINE_ENV}: {e}")));
    }
    Ok(MachineConfig::default())
}

fn load_or_generate(
    file: Option<&PathBuf>,
    rows: usize,
    cols: usize,
    dtype: Dtype,
    seed: u64,
    what: &str,
) -> Result<Matrix, CliError> {
    match file {
        Some(path) => {
            let m = io::read_matrix(path)?;
            if m.rows() != rows || m.cols() != cols {
                return Err(CliError::Validation(format!(
                    "{} file {} is {}x{}, expected {}x{}",
                    what,
                    path.display(),
                    m.rows(),
                    m.cols(),
                    rows,
                    cols
                )));
            }
            if m.dtype() != dtype {
                return Err(CliError::Validation(format!(
                    "{} file {} has dtype {}, run requested {}",
                    what,
                    path.display(),
                    m.dtype(),
                    dtype
                )));
            }
            Ok(m)
        }
        None => Ok(Matrix::random(rows, cols, dtype, seed)),
    }
}

/// Default dense blocking for the plain kernel: 512-element blocks capped
/// at the (padded) matrix dims.
fn default_dense_blocks(m: usize, k: usize, n: usize) -> (usize, usize, usize, usize) {
    let cap128 = |d: usize| 512.min(d.div_ceil(128) * 128);
    let b_n = if n <= 512 { n.div_ceil(128) * 128 } else { 512 };
    (cap128(m), cap128(k), cap128(k), b_n)
}

/// Shrink blocks (b_n, then b_r, then b_k, then b_m) until the kernel's
/// constraint holds.
fn shrink_until(
    dims: (usize, usize, usize, usize),
    start: (usize, usize, usize, usize),
    elem: usize,
    cfg: &MachineConfig,
    fits: impl Fn(usize, usize, usize, usize) -> bool,
) -> Result<BlockPlan, CliError> {
    let (mut b_m, mut b_k, mut b_r, mut b_n) = start;
    loop {
        if fits(b_m, b_k, b_r, b_n) {
            break;
        }
        let shrunk = [&mut b_n, &mut b_r, &mut b_k, &mut b_m]
            .into_iter()
            .any(|v| {
                if *v > 128 {
                    *v = if *v > 512 { *v - 512 } else { *v - 128 };
                    true
                } else {
                    false
                }
            });
        if !shrunk {
            return Err(PlanError::Infeasible {
                predicted_peak_bytes: layout::peak_sbuf_model(b_m, b_k, b_r, b_n, dims.2, elem),
                sbuf_bytes: cfg.sbuf_bytes,
                b_m,
                b_k,
                b_r,
                b_n,
            }
            .into());
        }
    }
    Ok(BlockPlan::manual(dims, (b_m, b_k, b_r, b_n), elem, cfg)?)
}

/// Resolve the block plan for a run: explicit overrides win, the analytic
/// planner (adjusted for the kernel's PSUM-group needs) fills the rest.
pub fn resolve_plan(spec: &RunSpec, cfg: &MachineConfig) -> Result<BlockPlan, CliError> {
    let d = spec.dims;
    let dims = (d.m, d.k, d.r, d.n);
    let elem = spec.dtype.size_bytes();
    let banks = cfg.psum_banks;
    let auto: (usize, usize, usize, usize) = match spec.kernel {
        KernelId::Xw => default_dense_blocks(d.m, d.k, d.n),
        KernelId::UpGate | KernelId::Mlp => {
            let p = plan_gated(d.m, d.k, d.r, d.n, cfg, elem)?;
            (p.b_m, p.b_k, p.b_r, p.b_n)
        }
        KernelId::XuvSeq => {
            let base = layout::plan_blocks(d.m, d.k, d.r, d.n, cfg, elem)?;
            let p = shrink_until(
                dims,
                (base.b_m, base.b_k, base.b_r, base.b_n),
                elem,
                cfg,
                |b_m, _, b_r, b_n| {
                    layout::psum_banks_needed(b_m, b_r, cfg) <= banks
                        && layout::psum_banks_needed(b_m, b_n, cfg) <= banks
                },
            )?;
            (p.b_m, p.b_k, p.b_r, p.b_n)
        }
        KernelId::XuvNaive => {
            // Intermediate and output accumulation groups are concurrently
            // live.
            let base = layout::plan_blocks(d.m, d.k, d.r, d.n, cfg, elem)?;
            let p = shrink_until(
                dims,
                (base.b_m, base.b_k, base.b_r, base.b_n),
                elem,
                cfg,
                |b_m, _, b_r, b_n| {
                    layout::psum_banks_needed(b_r, b_m, cfg)
                        + layout::psum_banks_needed(b_m, b_n, cfg)
                        <= banks
                },
            )?;
            (p.b_m, p.b_k, p.b_r, p.b_n)
        }
        KernelId::XuvFused => {
            let p = layout::plan_blocks(d.m, d.k, d.r, d.n, cfg, elem)?;
            (p.b_m, p.b_k, p.b_r, p.b_n)
        }
    };
    let blocks = (
        spec.blocks[0].unwrap_or(auto.0),
        spec.blocks[1].unwrap_or(auto.1),
        spec.blocks[2].unwrap_or(auto.2),
        spec.blocks[3].unwrap_or(auto.3),
    );
    Ok(BlockPlan::manual((d.m, d.k, d.r, d.n), blocks, elem, cfg)?)
}

/// Planner variant for the gated MLP kernels, whose two concurrent
/// projections double both the strip footprint and the live PSUM groups.
pub fn plan_gated(
    m: usize,
    k: usize,
    r: usize,
    n: usize,
    cfg: &MachineConfig,
    elem: usize,
) -> Result<BlockPlan, CliError> {
    let base = layout::plan_blocks(m, k, r, n, cfg, elem)?;
    let banks = cfg.psum_banks;
    shrink_until(
        (m, k, r, n),
        (base.b_m, base.b_k, base.b_r, base.b_n),
        elem,
        cfg,
        |b_m, b_k, b_r, b_n| {
            let r_pad = r.div_ceil(b_r) * b_r;
            let phase1 = 2 * b_m * r_pad + b_k * b_m + 2 * b_k * b_r;
            let phase2 = 2 * b_m * r_pad + 2 * b_r * b_n + 2 * b_n * b_m;
            (phase1.max(phase2) * elem) as u64 <= cfg.sbuf_bytes
                && 2 * layout::psum_banks_needed(b_r, b_m, cfg) <= banks
                && 2 * layout::psum_banks_needed(b_n, b_m, cfg) <= banks
        },
    )
}

struct PreparedInputs {
    mats: Vec<Matrix>,
}

fn prepare_inputs(spec: &RunSpec) -> Result<PreparedInputs, CliError> {
    let d = spec.dims;
    let dt = spec.dtype;
    let s = spec.seed;
    let f = &spec.files;
    let x_shape = if spec.is_xt && spec.kernel == KernelId::XuvFused {
        (d.k, d.m)
    } else {
        (d.m, d.k)
    };
    let mats = match spec.kernel {
        KernelId::Xw => vec![
            load_or_generate(f.x.as_ref(), x_shape.0, x_shape.1, dt, s, "x")?,
            load_or_generate(f.w.as_ref(), d.k, d.n, dt, s + 1, "w")?,
        ],
        KernelId::XuvSeq | KernelId::XuvNaive | KernelId::XuvFused => vec![
            load_or_generate(f.x.as_ref(), x_shape.0, x_shape.1, dt, s, "x")?,
            load_or_generate(f.u.as_ref(), d.k, d.r, dt, s + 1, "u")?,
            load_or_generate(f.v.as_ref(), d.r, d.n, dt, s + 2, "v")?,
        ],
        KernelId::UpGate => vec![
            load_or_generate(f.x.as_ref(), d.m, d.k, dt, s, "x")?,
            load_or_generate(f.u_gate.as_ref(), d.k, d.r, dt, s + 1, "u_gate")?,
            load_or_generate(f.v_gate.as_ref(), d.r, d.n, dt, s + 2, "v_gate")?,
            load_or_generate(f.u_up.as_ref(), d.k, d.r, dt, s + 3, "u_up")?,
            load_or_generate(f.v_up.as_ref(), d.r, d.n, dt, s + 4, "v_up")?,
        ],
        KernelId::Mlp => vec![
            load_or_generate(f.x.as_ref(), d.m, d.k, dt, s, "x")?,
            load_or_generate(f.u_gate.as_ref(), d.k, d.r, dt, s + 1, "u_gate")?,
            load_or_generate(f.v_gate.as_ref(), d.r, d.n, dt, s + 2, "v_gate")?,
            load_or_generate(f.u_up.as_ref(), d.k, d.r, dt, s + 3, "u_up")?,
            load_or_generate(f.v_up.as_ref(), d.r, d.n, dt, s + 4, "v_up")?,
            load_or_generate(f.u_down.as_ref(), d.n, d.r2, dt, s + 5, "u_down")?,
            load_or_generate(f.v_down.as_ref(), d.r2, d.k, dt, s + 6, "v_down")?,
        ],
    };
    Ok(PreparedInputs { mats })
}

/// Dense-reference output for the kernel's inputs.
pub fn oracle_output(spec: &RunSpec, mats: &[Matrix]) -> Result<Matrix, CliError> {
    let chain = |a: &Matrix, b: &Matrix, c: &Matrix| -> Result<Matrix, CliError> {
        Ok(linalg::matmul(&linalg::matmul(a, b)?, c)?)
    };
    let out = match spec.kernel {
        KernelId::Xw => linalg::matmul(&mats[0], &mats[1])?,
        KernelId::XuvSeq | KernelId::XuvNaive => chain(&mats[0], &mats[1], &mats[2])?,
        KernelId::XuvFused => {
            let x = if spec.is_xt {
                linalg::transpose(&mats[0])
            } else {
                mats[0].clone()
            };
            let o = chain(&x, &mats[1], &mats[2])?;
            if spec.req_ot {
                linalg::transpose(&o)
            } else {
                o
            }
        }
        KernelId::UpGate => {
            let gate = chain(&mats[0], &mats[1], &mats[2])?;
            let up = chain(&mats[0], &mats[3], &mats[4])?;
            linalg::transpose(&linalg::hadamard(&linalg::silu(&gate), &up)?)
        }
        KernelId::Mlp => {
            let gate = chain(&mats[0], &mats[1], &mats[2])?;
            let up = chain(&mats[0], &mats[3], &mats[4])?;
            let y = linalg::hadamard(&linalg::silu(&gate), &up)?;
            chain(&y, &mats[5], &mats[6])?
        }
    };
    Ok(out)
}

/// Oracle-equality tolerance (relative Frobenius) per dtype.
pub fn verify_tolerance(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F32 => 1e-4,
        Dtype::Bf16 => 3e-2,
    }
}

/// Execute one kernel and build its report. Returns the output matrix when
/// the run moved data.
pub fn cmd_run(
    spec: &RunSpec,
    cfg: &MachineConfig,
) -> Result<(RunReport, Option<Matrix>), CliError> {
    if spec.verify && spec.counters_only {
        return Err(CliError::Validation(
            "--verify needs value movement; drop --counters-only".into(),
        ));
    }
    if spec.kernel.needs_rank() && spec.dims.r == 0 {
        return Err(CliError::Validation(format!(
            "kernel {} requires --rank",
            spec.kernel
        )));
    }
    if spec.kernel == KernelId::Mlp && spec.dims.r2 == 0 {
        return Err(CliError::Validation("kernel mlp requires --rank2".into()));
    }
    let plan = resolve_plan(spec, cfg)?;
    let inputs = prepare_inputs(spec)?;
    let mut machine = Machine::new(cfg.clone())
        .map_err(|e| CliError::Validation(e.to_string()))?
        .with_data_mode(!spec.counters_only);
    let opts = KernelOptions {
        allow_spill: spec.allow_spill,
    };
    let mats = &inputs.mats;
    let result: KernelResult = match spec.kernel {
        KernelId::Xw => kernels::xw_sequential(&mats[0], &mats[1], &plan, &mut machine)?,
        KernelId::XuvSeq => {
            kernels::xuv_sequential(&mats[0], &mats[1], &mats[2], &plan, &mut machine)?
        }
        KernelId::XuvNaive => {
            kernels::xuv_naive_fused(&mats[0], &mats[1], &mats[2], &plan, &mut machine)?
        }
        KernelId::XuvFused => kernels::xuv_fused(
            &mats[0],
            &mats[1],
            &mats[2],
            spec.is_xt,
            spec.req_ot,
            &plan,
            &mut machine,
            &opts,
        )?,
        KernelId::UpGate => kernels::up_gate_projection(
            &mats[0], &mats[1], &mats[2], &mats[3], &mats[4], &plan, &mut machine, &opts,
        )?,
        KernelId::Mlp => {
            let plan_down = resolve_plan(
                &RunSpec {
                    kernel: KernelId::XuvFused,
                    dims: Dims {
                        m: spec.dims.m,
                        k: spec.dims.n,
                        r: spec.dims.r2,
                        n: spec.dims.k,
                        r2: 0,
                    },
                    ..spec.clone()
                },
                cfg,
            )?;
            kernels::fused_mlp(
                &mats[0], &mats[1], &mats[2], &mats[3], &mats[4], &mats[5], &mats[6], &plan,
                &plan_down, &mut machine, &opts,
            )?
        }
    };

    let r2 = (spec.kernel == KernelId::Mlp).then_some(spec.dims.r2);
    let mut report = RunReport::new(spec.kernel.name(), &result, cfg, spec.seed, r2);
    if spec.verify {
        let expect = oracle_output(spec, mats)?;
        let got = result
            .output
            .as_ref()
            .ok_or_else(|| CliError::Validation("no output to verify".into()))?;
        let err = got.relative_error(&expect);
        let tol = verify_tolerance(spec.dtype);
        if err <= tol {
            report.verify = "pass".into();
        } else {
            report.verify = "fail".into();
            return Err(CliError::VerifyFailed(format!(
                "kernel {} relative error {:.3e} exceeds {:.1e}",
                spec.kernel, err, tol
            )));
        }
    }
    report.check_internal_consistency()?;
    Ok((report, result.output))
}

/// One sweep axis: a parameter name and its values.
#[derive(Debug, Clone)]
pub struct SweepAxis {
    pub param: String,
    pub values: Vec<usize>,
}

impl SweepAxis {
    /// Parse "bm=128,256,512".
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let (param, rest) = text
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("bad sweep spec '{text}'")))?;
        let values = rest
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Validation(format!("bad sweep value '{v}'")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err(CliError::Validation("empty sweep".into()));
        }
        Ok(SweepAxis {
            param: param.trim().to_string(),
            values,
        })
    }

    fn apply(&self, spec: &RunSpec, value: usize) -> Result<RunSpec, CliError> {
        let mut s = spec.clone();
        match self.param.as_str() {
            "bm" => s.blocks[0] = Some(value),
            "bk" => s.blocks[1] = Some(value),
            "br" => s.blocks[2] = Some(value),
            "bn" => s.blocks[3] = Some(value),
            "m" => s.dims.m = value,
            "k" => s.dims.k = value,
            "r" => s.dims.r = value,
            "n" => s.dims.n = value,
            "seed" => s.seed = value as u64,
            other => {
                return Err(CliError::Validation(format!(
                    "unknown sweep parameter '{other}' (bm, bk, br, bn, m, k, r, n, seed)"
                )))
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Serialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Run the sweep; failed points carry their error and the sweep continues.
/// Points run concurrently on independent machines.
pub fn cmd_sweep(
    spec: &RunSpec,
    axis: &SweepAxis,
    cfg: &MachineConfig,
) -> Result<Vec<SweepPoint>, CliError> {
    let specs: Vec<(usize, RunSpec)> = axis
        .values
        .iter()
        .map(|&v| axis.apply(spec, v).map(|s| (v, s)))
        .collect::<Result<_, _>>()?;
    Ok(specs
        .into_par_iter()
        .map(|(value, point_spec)| match cmd_run(&point_spec, cfg) {
            Ok((report, _)) => SweepPoint {
                param: axis.param.clone(),
                value,
                report: Some(report),
                error: None,
            },
            Err(e) => SweepPoint {
                param: axis.param.clone(),
                value,
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect())
}

pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut header = vec!["param".to_string(), "value".to_string()];
    header.extend(RunReport::csv_header().iter().map(|s| s.to_string()));
    w.write_record(&header)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    for p in points {
        let mut rec = vec![p.param.clone(), p.value.to_string()];
        match (&p.report, &p.error) {
            (Some(r), _) => rec.extend(r.csv_record()),
            (None, Some(e)) => {
                rec.extend(std::iter::repeat_n(String::new(), RunReport::csv_header().len() - 1));
                rec.push(format!("error: {e}"));
            }
            _ => unreachable!("sweep point has neither report nor error"),
        }
        w.write_record(&rec)
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(())
}

/// Side-by-side comparison of several kernels on shared shapes; ratios are
/// relative to the first kernel listed.
#[derive(Debug, Serialize)]
pub struct CompareRow {
    pub kernel: String,
    pub matmul_flops: u64,
    pub hbm_total_bytes: u64,
    pub transpose_flops: u64,
    pub intermediate_transposes: u64,
    pub modeled_seconds: f64,
    pub flops_ratio: f64,
    pub traffic_ratio: f64,
    pub time_ratio: f64,
    pub verify: String,
}

pub fn cmd_compare(
    kernel_ids: &[KernelId],
    base: &RunSpec,
    cfg: &MachineConfig,
) -> Result<Vec<CompareRow>, CliError> {
    if kernel_ids.len() < 2 {
        return Err(CliError::Validation(
            "compare needs at least two kernels".into(),
        ));
    }
    let reports: Vec<RunReport> = kernel_ids
        .par_iter()
        .map(|&kid| {
            let mut spec = base.clone();
            spec.kernel = kid;
            cmd_run(&spec, cfg).map(|(r, _)| r)
        })
        .collect::<Result<_, _>>()?;
    let base_c = &reports[0].counters;
    let ratio = |a: f64, b: f64| if b == 0.0 { f64::NAN } else { a / b };
    Ok(reports
        .iter()
        .map(|r| CompareRow {
            kernel: r.kernel.clone(),
            matmul_flops: r.counters.matmul_flops,
            hbm_total_bytes: r.counters.hbm_total_bytes(),
            transpose_flops: r.counters.transpose_flops,
            intermediate_transposes: r.counters.intermediate_transpose_count,
            modeled_seconds: r.counters.modeled_total_seconds,
            flops_ratio: ratio(r.counters.matmul_flops as f64, base_c.matmul_flops as f64),
            traffic_ratio: ratio(
                r.counters.hbm_total_bytes() as f64,
                base_c.hbm_total_bytes() as f64,
            ),
            time_ratio: ratio(
                r.counters.modeled_total_seconds,
                base_c.modeled_total_seconds,
            ),
            verify: r.verify.clone(),
        })
        .collect())
}

pub fn render_compare_table(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>16} {:>16} {:>14} {:>8} {:>12} {:>8} {:>8} {:>8} {:>8}\n",
        "kernel",
        "matmul_flops",
        "hbm_bytes",
        "transpose_fl",
        "i_transp",
        "seconds",
        "flops_x",
        "traffic_x",
        "time_x",
        "verify"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:>16} {:>16} {:>14} {:>8} {:>12.6e} {:>8.3} {:>8.3} {:>8.3} {:>8}\n",
            r.kernel,
            r.matmul_flops,
            r.hbm_total_bytes,
            r.transpose_flops,
            r.intermediate_transposes,
            r.modeled_seconds,
            r.flops_ratio,
            r.traffic_ratio,
            r.time_ratio,
            r.verify
        ));
    }
    out
}

/// Input manifest for `compress`: the weights to factor and their optional
/// calibration activations.
#[derive(Debug, Deserialize)]
pub struct WeightsManifest {
    pub weights: Vec<WeightSpec>,
}

#[derive(Debug, Deserialize)]
pub struct WeightSpec {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub calib: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy)]
pub struct CompressArgs {
    pub ratio: f64,
    pub block_size: usize,
    pub alpha: f64,
    /// `None` selects the trace-scaled default jitter.
    pub jitter: Option<f64>,
}

/// Compress every weight in the manifest, writing `<name>.u.nmm` /
/// `<name>.v.nmm` plus a JSON manifest into `out_dir`. Weights compress
/// in parallel.
pub fn cmd_compress(
    manifest_path: &Path,
    args: CompressArgs,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>, CliError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| {
        CliError::Validation(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: WeightsManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad weights manifest: {e}")))?;
    if manifest.weights.is_empty() {
        return Err(CliError::Validation("weights manifest is empty".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", out_dir.display())))?;

    let entries: Vec<ManifestEntry> = manifest
        .weights
        .par_iter()
        .map(|spec| -> Result<ManifestEntry, CliError> {
            let w = io::read_matrix(&spec.path)?;
            let whitener = match &spec.calib {
                Some(calib_path) => {
                    let calib = io::read_matrix(calib_path)?;
                    if calib.cols() != w.cols() {
                        return Err(CliError::Validation(format!(
                            "calibration {} has {} features, weight {} has {} columns",
                            calib_path.display(),
                            calib.cols(),
                            spec.name,
                            w.cols()
                        )));
                    }
                    Some(compress::activation_whitening(&calib, args.jitter)?)
                }
                None => None,
            };
            let factors = compress::compress_weight(
                &w,
                whitener.as_ref().map(|(s, si)| (s, si)),
                args.ratio,
                args.block_size,
                args.alpha,
            )?;
            let u_file = format!("{}.u.nmm", spec.name);
            let v_file = format!("{}.v.nmm", spec.name);
            io::write_matrix(&out_dir.join(&u_file), &factors.u_prime)?;
            io::write_matrix(&out_dir.join(&v_file), &factors.v_prime)?;
            Ok(ManifestEntry::new(&spec.name, &w, &factors, u_file, v_file))
        })
        .collect::<Result<_, _>>()?;

    let manifest_out = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    std::fs::write(out_dir.join("compress_manifest.json"), manifest_out)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(entries)
}
