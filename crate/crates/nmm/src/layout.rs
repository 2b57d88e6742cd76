//! Tile/block/strip arithmetic and the analytic block-size planner.
//!
//! Matrices split into blocks (software grids of hardware tiles); a strip
//! is a full row or column of blocks. The planner picks the row-strip block
//! size from the arithmetic-intensity model, then grows the remaining
//! blocks greedily under the peak-SBUF model and the PSUM bank budget.

use crate::error::PlanError;
use crate::machine::MachineConfig;
use serde::Serialize;

/// Partition-axis granule: blocks along contraction/row axes are multiples
/// of the 128-lane tile.
pub const TILE_GRANULE: usize = 128;

/// Moving free-axis tile limit; blocks beyond this are multiples of it.
pub const MOVING_FREE_GRANULE: usize = 512;

/// Number of blocks covering `dim`; the last block is zero-padded.
pub fn partition_grid(dim: usize, block: usize) -> usize {
    assert!(block > 0, "block size must be positive");
    dim.div_ceil(block)
}

/// FLOPs per HBM byte of the strip-cached fused kernel:
/// `2r / ((1 + r/B_M) * s)`.
pub fn arithmetic_intensity(r: usize, b_m: usize, elem_bytes: usize) -> f64 {
    2.0 * r as f64 / ((1.0 + r as f64 / b_m as f64) * elem_bytes as f64)
}

/// Peak SBUF bytes of the fused kernel across its two phases:
/// `(B_M*r + (B_M + B_r) * max(B_K, B_N)) * s`.
pub fn peak_sbuf_model(
    b_m: usize,
    b_k: usize,
    b_r: usize,
    b_n: usize,
    r: usize,
    elem_bytes: usize,
) -> u64 {
    ((b_m * r + (b_m + b_r) * b_k.max(b_n)) * elem_bytes) as u64
}

/// PSUM banks needed to hold one `rows x cols` f32 accumulation block.
pub fn psum_banks_needed(rows: usize, cols: usize, cfg: &MachineConfig) -> usize {
    let tr = cfg.psum_tile_rows().min(cfg.partitions);
    let tc = cfg.psum_tile_cols();
    rows.div_ceil(tr) * cols.div_ceil(tc)
}

/// Chosen block sizes plus derived tile/block grids for one kernel launch.
#[derive(Debug, Clone, Serialize)]
pub struct BlockPlan {
    pub b_m: usize,
    pub b_k: usize,
    pub b_r: usize,
    pub b_n: usize,
    /// Tiles per block along each axis.
    pub t_m: usize,
    pub t_k: usize,
    pub t_r: usize,
    pub t_n: usize,
    /// Blocks covering each matrix dimension (ceil divisions).
    pub g_m: usize,
    pub g_k: usize,
    pub g_r: usize,
    pub g_n: usize,
    pub m: usize,
    pub k: usize,
    pub r: usize,
    pub n: usize,
    pub elem_bytes: usize,
    /// Eq-10 model value for this plan.
    pub predicted_ai: f64,
    /// Eq-11 model value for this plan.
    pub predicted_peak_bytes: u64,
    /// True when the padded working set provably fits SBUF.
    pub non_spilling: bool,
}

impl BlockPlan {
    /// Build a plan from explicit block sizes, validating granularity.
    pub fn manual(
        dims: (usize, usize, usize, usize),
        blocks: (usize, usize, usize, usize),
        elem_bytes: usize,
        cfg: &MachineConfig,
    ) -> Result<Self, PlanError> {
        let (m, k, r, n) = dims;
        let (b_m, b_k, b_r, b_n) = blocks;
        for (name, v) in [("m", m), ("k", k), ("r", r), ("n", n)] {
            if v == 0 {
                return Err(PlanError::ZeroDim { name });
            }
        }
        for (name, v) in [("b_m", b_m), ("b_k", b_k), ("b_r", b_r)] {
            if v == 0 || v % TILE_GRANULE != 0 {
                return Err(PlanError::BadBlock {
                    name,
                    value: v,
                    granule: TILE_GRANULE,
                });
            }
        }
        let bn_ok = b_n > 0
            && b_n % TILE_GRANULE == 0
            && (b_n <= MOVING_FREE_GRANULE || b_n % MOVING_FREE_GRANULE == 0);
        if !bn_ok {
            return Err(PlanError::BadBlock {
                name: "b_n",
                value: b_n,
                granule: MOVING_FREE_GRANULE,
            });
        }
        let predicted_peak_bytes = peak_sbuf_model(b_m, b_k, b_r, b_n, r, elem_bytes);
        let padded_peak = padded_peak_bytes(b_m, b_k, b_r, b_n, r, elem_bytes);
        Ok(BlockPlan {
            b_m,
            b_k,
            b_r,
            b_n,
            t_m: b_m.div_ceil(TILE_GRANULE),
            t_k: b_k.div_ceil(TILE_GRANULE),
            t_r: b_r.div_ceil(TILE_GRANULE),
            t_n: b_n.div_ceil(MOVING_FREE_GRANULE),
            g_m: partition_grid(m, b_m),
            g_k: partition_grid(k, b_k),
            g_r: partition_grid(r, b_r),
            g_n: partition_grid(n, b_n),
            m,
            k,
            r,
            n,
            elem_bytes,
            predicted_ai: arithmetic_intensity(r, b_m, elem_bytes),
            predicted_peak_bytes,
            non_spilling: padded_peak <= cfg.sbuf_bytes,
        })
    }

    /// Padded dimensions (full-block grids) used for FLOP accounting.
    pub fn padded(&self) -> (usize, usize, usize, usize) {
        (
            self.g_m * self.b_m,
            self.g_k * self.b_k,
            self.g_r * self.b_r,
            self.g_n * self.b_n,
        )
    }
}

/// Eq-11 with the strip padded out to whole `b_r` blocks, which is what the
/// simulator actually allocates. Equals the model exactly when `b_r | r`.
fn padded_peak_bytes(
    b_m: usize,
    b_k: usize,
    b_r: usize,
    b_n: usize,
    r: usize,
    elem_bytes: usize,
) -> u64 {
    let r_pad = partition_grid(r, b_r) * b_r;
    ((b_m * r_pad + (b_m + b_r) * b_k.max(b_n)) * elem_bytes) as u64
}

fn round_up(v: usize, granule: usize) -> usize {
    v.div_ceil(granule) * granule
}

/// Next legal moving-free block size above `b_n`: 128-granule steps up to
/// 512, then whole-512 steps.
fn next_bn(b_n: usize) -> usize {
    if b_n < MOVING_FREE_GRANULE {
        b_n + TILE_GRANULE
    } else {
        b_n + MOVING_FREE_GRANULE
    }
}

/// Pick block sizes for a fused `M x K x r x N` launch.
///
/// `b_m` is the smallest 128-multiple whose arithmetic intensity meets the
/// roofline threshold (capped at the padded input height). The remaining
/// blocks then grow greedily in the order `b_n`, `b_k`, `b_r` while the
/// padded peak-SBUF model stays within capacity and the accumulation blocks
/// of both kernel phases (either output orientation) fit the PSUM banks.
pub fn plan_blocks(
    m: usize,
    k: usize,
    r: usize,
    n: usize,
    cfg: &MachineConfig,
    elem_bytes: usize,
) -> Result<BlockPlan, PlanError> {
    for (name, v) in [("m", m), ("k", k), ("r", r), ("n", n)] {
        if v == 0 {
            return Err(PlanError::ZeroDim { name });
        }
    }
    let b_m_cap = round_up(m, TILE_GRANULE);
    let mut b_m = TILE_GRANULE;
    while b_m < b_m_cap && arithmetic_intensity(r, b_m, elem_bytes) < cfg.roofline_threshold {
        b_m += TILE_GRANULE;
    }

    let banks = cfg.psum_banks;
    // Phase-1 accumulation is (b_r x b_m); phase-2 is (b_m x b_n) or
    // (b_n x b_m) depending on the requested output orientation. Default
    // plans must support both.
    let phase1_fits = |b_r: usize, b_m: usize| psum_banks_needed(b_r, b_m, cfg) <= banks;
    let phase2_fits = |b_m: usize, b_n: usize| {
        psum_banks_needed(b_m, b_n, cfg) <= banks && psum_banks_needed(b_n, b_m, cfg) <= banks
    };

    let fits = |b_k: usize, b_r: usize, b_n: usize, b_m: usize| {
        padded_peak_bytes(b_m, b_k, b_r, b_n, r, elem_bytes) <= cfg.sbuf_bytes
            && phase1_fits(b_r, b_m)
            && phase2_fits(b_m, b_n)
    };

    let (mut b_k, mut b_r, mut b_n) = (TILE_GRANULE, TILE_GRANULE, TILE_GRANULE);
    if !fits(b_k, b_r, b_n, b_m) {
        return Err(PlanError::Infeasible {
            predicted_peak_bytes: peak_sbuf_model(b_m, b_k, b_r, b_n, r, elem_bytes),
            sbuf_bytes: cfg.sbuf_bytes,
            b_m,
            b_k,
            b_r,
            b_n,
        });
    }

    // Ties break toward larger b_n: grow it first and furthest.
    let bn_cap = {
        let covering = if n <= MOVING_FREE_GRANULE {
            round_up(n, TILE_GRANULE)
        } else {
            round_up(n, MOVING_FREE_GRANULE)
        };
        covering
    };
    loop {
        let cand = next_bn(b_n);
        if cand > bn_cap || !fits(b_k, b_r, cand, b_m) {
            break;
        }
        b_n = cand;
    }
    let bk_cap = round_up(k, TILE_GRANULE);
    while b_k + TILE_GRANULE <= bk_cap && fits(b_k + TILE_GRANULE, b_r, b_n, b_m) {
        b_k += TILE_GRANULE;
    }
    let br_cap = round_up(r, TILE_GRANULE);
    while b_r + TILE_GRANULE <= br_cap && fits(b_k, b_r + TILE_GRANULE, b_n, b_m) {
        b_r += TILE_GRANULE;
    }

    BlockPlan::manual((m, k, r, n), (b_m, b_k, b_r, b_n), elem_bytes, cfg)
}
