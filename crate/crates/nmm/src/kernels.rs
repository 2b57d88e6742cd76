//! Matmul strategies executed on the simulated machine.
//!
//! Five kernels share the same counter discipline and numeric contract
//! (outputs match the dense references within dtype tolerance):
//!
//! - [`xw_sequential`]: plain blocked `X W` with PSUM accumulation along K.
//! - [`xuv_sequential`]: `(X U) V` with the intermediate materialized to
//!   HBM and explicitly transposed on chip between the two matmuls.
//! - [`xuv_naive_fused`]: single-kernel fusion that recomputes each
//!   intermediate block for every output column block, reloading its `X`
//!   and `U` inputs each time.
//! - [`xuv_fused`]: strip-cached fusion. Per row strip, phase 1 builds the
//!   transposed intermediate strip in SBUF (implicit transposition by
//!   operand order, `X` transposed in transit by the DMA engine when
//!   needed); phase 2 streams `V` blocks against the cached strip and can
//!   emit `O` or `O^T` by swapping stationary and moving operands.
//! - [`up_gate_projection`] / [`fused_mlp`]: the gated-MLP composition of
//!   the fused kernel (two parallel projections, on-chip `silu(gate) .* up`,
//!   then a down-projection consuming the transposed intermediate).

use crate::error::{KernelError, PlanError};
use crate::layout::{psum_banks_needed, BlockPlan};
use crate::machine::TraceCounters;
use crate::machine::{BufId, HbmId, Machine};
use crate::matrix::{Dtype, Matrix};

#[derive(Debug, Clone, Copy, Default)]
pub struct KernelOptions {
    /// Allow the strip cache to spill instead of failing when SBUF
    /// residency is exceeded.
    pub allow_spill: bool,
}

/// Output plus the run's full accounting.
#[derive(Debug, Clone)]
pub struct KernelResult {
    /// `O` (or `O^T` when requested); `None` when the machine ran without
    /// data movement.
    pub output: Option<Matrix>,
    pub counters: TraceCounters,
    pub plan: BlockPlan,
    pub is_xt: bool,
    pub req_ot: bool,
    pub peak_sbuf_observed_bytes: u64,
    pub dtype: Dtype,
}

fn same_dtype(mats: &[&Matrix]) -> Result<Dtype, KernelError> {
    let dt = mats[0].dtype();
    for m in &mats[1..] {
        if m.dtype() != dt {
            return Err(KernelError::DtypeMismatch(dt, m.dtype()));
        }
    }
    Ok(dt)
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), KernelError> {
    if cond {
        Ok(())
    } else {
        Err(KernelError::Shape(msg()))
    }
}

fn banks_fit(
    rows: usize,
    cols: usize,
    groups: usize,
    machine: &Machine,
) -> Result<(), KernelError> {
    let need = groups * psum_banks_needed(rows, cols, machine.config());
    let available = machine.config().psum_banks;
    if need > available {
        return Err(KernelError::Plan(PlanError::PsumInfeasible {
            banks: need,
            rows,
            cols,
            available,
        }));
    }
    Ok(())
}

/// (offset, real length) of block `i` over a dimension.
fn block_range(i: usize, block: usize, dim: usize) -> (usize, usize) {
    let start = i * block;
    (start, block.min(dim - start))
}

/// Load the transposed block `X^T[k-range, m-range]` into `dst`. When the
/// HBM tensor holds `X` in natural layout the DMA engine transposes in
/// transit; a pre-transposed tensor is read directly.
#[allow(clippy::too_many_arguments)]
fn load_xt_block(
    machine: &mut Machine,
    x: HbmId,
    x_is_transposed: bool,
    m0: usize,
    mf: usize,
    k0: usize,
    kf: usize,
    dst: BufId,
) -> Result<(), KernelError> {
    if x_is_transposed {
        machine.dma_load(x, k0, m0, kf, mf, false, dst)?;
    } else {
        machine.dma_load(x, m0, k0, mf, kf, true, dst)?;
    }
    Ok(())
}

fn finish(
    machine: &mut Machine,
    out: HbmId,
    plan: &BlockPlan,
    is_xt: bool,
    req_ot: bool,
    dtype: Dtype,
) -> KernelResult {
    machine.end_phase();
    KernelResult {
        output: machine.hbm_download(out),
        counters: machine.counters().clone(),
        plan: plan.clone(),
        is_xt,
        req_ot,
        peak_sbuf_observed_bytes: machine.peak_sbuf_observed(),
        dtype,
    }
}

/// Blocked dense product `A B -> Out` with PSUM accumulation along the
/// contraction axis. `A` is loaded stationary-transposed (via DMA when not
/// pre-transposed); blocks stream per output block, so `A` reloads once per
/// output column block and `B` once per output row block.
#[allow(clippy::too_many_arguments)]
fn run_blocked_dense(
    machine: &mut Machine,
    a: HbmId,
    a_pretransposed: bool,
    b: HbmId,
    out: HbmId,
    dims: (usize, usize, usize),
    blocks: (usize, usize, usize),
    elem: usize,
) -> Result<(), KernelError> {
    let (m, k, n) = dims;
    let (b_m, b_k, b_n) = blocks;
    banks_fit(b_m, b_n, 1, machine)?;
    let (g_m, g_k, g_n) = (m.div_ceil(b_m), k.div_ceil(b_k), n.div_ceil(b_n));
    let a_buf = machine.sbuf_alloc(b_k, b_m, elem, false)?;
    let b_buf = machine.sbuf_alloc(b_k, b_n, elem, false)?;
    let o_buf = machine.sbuf_alloc(b_m, b_n, elem, false)?;
    for mb in 0..g_m {
        let (m0, mf) = block_range(mb, b_m, m);
        for nb in 0..g_n {
            let (n0, nf) = block_range(nb, b_n, n);
            let psum = machine.psum_alloc(b_m, b_n)?;
            for kb in 0..g_k {
                let (k0, kf) = block_range(kb, b_k, k);
                load_xt_block(machine, a, a_pretransposed, m0, mf, k0, kf, a_buf)?;
                machine.dma_load(b, k0, n0, kf, nf, false, b_buf)?;
                machine.matmul_block(a_buf, b_buf, psum, kb == 0)?;
            }
            machine.psum_evict(psum, o_buf, false)?;
            machine.psum_free(psum)?;
            machine.dma_store(o_buf, mf, nf, out, m0, n0)?;
        }
        machine.end_phase();
    }
    for id in [a_buf, b_buf, o_buf] {
        machine.sbuf_free(id)?;
    }
    Ok(())
}

/// Plain blocked `O = X W`.
pub fn xw_sequential(
    x: &Matrix,
    w: &Matrix,
    plan: &BlockPlan,
    machine: &mut Machine,
) -> Result<KernelResult, KernelError> {
    let dtype = same_dtype(&[x, w])?;
    let (m, k) = (x.rows(), x.cols());
    let n = w.cols();
    check(w.rows() == k, || {
        format!("x is {}x{}, w is {}x{}", m, k, w.rows(), w.cols())
    })?;
    check(plan.m == m && plan.k == k && plan.n == n, || {
        format!(
            "plan dims ({},{},{}) vs inputs ({},{},{})",
            plan.m, plan.k, plan.n, m, k, n
        )
    })?;
    let hx = machine.hbm_upload(x);
    let hw = machine.hbm_upload(w);
    let out = machine.hbm_alloc(m, n, dtype);
    run_blocked_dense(
        machine,
        hx,
        false,
        hw,
        out,
        (m, k, n),
        (plan.b_m, plan.b_k, plan.b_n),
        dtype.size_bytes(),
    )?;
    Ok(finish(machine, out, plan, false, false, dtype))
}

/// Sequential low-rank chain: `Y = X U` materialized to HBM, explicitly
/// transposed on the tensor engine, then `O = Y V`.
pub fn xuv_sequential(
    x: &Matrix,
    u: &Matrix,
    v: &Matrix,
    plan: &BlockPlan,
    machine: &mut Machine,
) -> Result<KernelResult, KernelError> {
    let dtype = same_dtype(&[x, u, v])?;
    let (m, k) = (x.rows(), x.cols());
    let (r, n) = (u.cols(), v.cols());
    check(u.rows() == k && v.rows() == r, || {
        format!(
            "chain shapes {}x{} * {}x{} * {}x{}",
            m,
            k,
            u.rows(),
            u.cols(),
            v.rows(),
            v.cols()
        )
    })?;
    check(
        plan.m == m && plan.k == k && plan.r == r && plan.n == n,
        || "plan dims do not match inputs".into(),
    )?;
    let elem = dtype.size_bytes();
    let hx = machine.hbm_upload(x);
    let hu = machine.hbm_upload(u);
    let hv = machine.hbm_upload(v);
    let hy = machine.hbm_alloc(m, r, dtype);
    let out = machine.hbm_alloc(m, n, dtype);

    run_blocked_dense(
        machine,
        hx,
        false,
        hu,
        hy,
        (m, k, r),
        (plan.b_m, plan.b_k, plan.b_r),
        elem,
    )?;

    // Intermediate transpose: Y (m x r) -> Y^T (r x m) tile by tile on the
    // tensor engine, round-tripping through HBM.
    let hyt = machine.hbm_alloc(r, m, dtype);
    let tile = machine.config().stationary_tile_max[0].min(machine.config().stationary_tile_max[1]);
    let t_src = machine.sbuf_alloc(tile, tile, elem, false)?;
    let t_dst = machine.sbuf_alloc(tile, tile, elem, false)?;
    for i in 0..m.div_ceil(tile) {
        let (i0, ilen) = block_range(i, tile, m);
        for j in 0..r.div_ceil(tile) {
            let (j0, jlen) = block_range(j, tile, r);
            machine.dma_load(hy, i0, j0, ilen, jlen, false, t_src)?;
            machine.tensor_transpose(t_src, ilen, jlen, t_dst)?;
            machine.dma_store(t_dst, jlen, ilen, hyt, j0, i0)?;
        }
    }
    machine.sbuf_free(t_src)?;
    machine.sbuf_free(t_dst)?;
    machine.note_intermediate_transpose();
    machine.end_phase();

    run_blocked_dense(
        machine,
        hyt,
        true,
        hv,
        out,
        (m, r, n),
        (plan.b_m, plan.b_r, plan.b_n),
        elem,
    )?;
    Ok(finish(machine, out, plan, false, false, dtype))
}

/// Naive fusion of `X U V`: the intermediate block `(XU)^T_{mp}` is rebuilt
/// inside the output-column loop, so its `X` and `U` source blocks reload
/// from HBM `ceil(N/B_N)` times.
pub fn xuv_naive_fused(
    x: &Matrix,
    u: &Matrix,
    v: &Matrix,
    plan: &BlockPlan,
    machine: &mut Machine,
) -> Result<KernelResult, KernelError> {
    let dtype = same_dtype(&[x, u, v])?;
    let (m, k) = (x.rows(), x.cols());
    let (r, n) = (u.cols(), v.cols());
    check(u.rows() == k && v.rows() == r, || "chain shapes".into())?;
    check(
        plan.m == m && plan.k == k && plan.r == r && plan.n == n,
        || "plan dims do not match inputs".into(),
    )?;
    // The intermediate and the output accumulation groups are live at the
    // same time.
    let need = psum_banks_needed(plan.b_r, plan.b_m, machine.config())
        + psum_banks_needed(plan.b_m, plan.b_n, machine.config());
    if need > machine.config().psum_banks {
        return Err(KernelError::Plan(PlanError::PsumInfeasible {
            banks: need,
            rows: plan.b_r,
            cols: plan.b_m.max(plan.b_n),
            available: machine.config().psum_banks,
        }));
    }
    let elem = dtype.size_bytes();
    let hx = machine.hbm_upload(x);
    let hu = machine.hbm_upload(u);
    let hv = machine.hbm_upload(v);
    let out = machine.hbm_alloc(m, n, dtype);
    let (b_m, b_k, b_r, b_n) = (plan.b_m, plan.b_k, plan.b_r, plan.b_n);

    let x_buf = machine.sbuf_alloc(b_k, b_m, elem, false)?;
    let u_buf = machine.sbuf_alloc(b_k, b_r, elem, false)?;
    let y_buf = machine.sbuf_alloc(b_r, b_m, elem, false)?;
    let v_buf = machine.sbuf_alloc(b_r, b_n, elem, false)?;
    let o_buf = machine.sbuf_alloc(b_m, b_n, elem, false)?;

    for mb in 0..plan.g_m {
        let (m0, mf) = block_range(mb, b_m, m);
        for nb in 0..plan.g_n {
            let (n0, nf) = block_range(nb, b_n, n);
            let o_psum = machine.psum_alloc(b_m, b_n)?;
            for pb in 0..plan.g_r {
                let (p0, pf) = block_range(pb, b_r, r);
                let y_psum = machine.psum_alloc(b_r, b_m)?;
                for kb in 0..plan.g_k {
                    let (k0, kf) = block_range(kb, b_k, k);
                    load_xt_block(machine, hx, false, m0, mf, k0, kf, x_buf)?;
                    machine.dma_load(hu, k0, p0, kf, pf, false, u_buf)?;
                    machine.matmul_block(u_buf, x_buf, y_psum, kb == 0)?;
                }
                machine.psum_evict(y_psum, y_buf, false)?;
                machine.psum_free(y_psum)?;
                machine.dma_load(hv, p0, n0, pf, nf, false, v_buf)?;
                machine.matmul_block(y_buf, v_buf, o_psum, pb == 0)?;
            }
            machine.psum_evict(o_psum, o_buf, false)?;
            machine.psum_free(o_psum)?;
            machine.dma_store(o_buf, mf, nf, out, m0, n0)?;
        }
        machine.end_phase();
    }
    for id in [x_buf, u_buf, y_buf, v_buf, o_buf] {
        machine.sbuf_free(id)?;
    }
    Ok(finish(machine, out, plan, false, false, dtype))
}

/// Strip-cached fused `X U V` on HBM tensor ids; returns the output tensor.
#[allow(clippy::too_many_arguments)]
fn run_xuv_fused(
    machine: &mut Machine,
    hx: HbmId,
    hu: HbmId,
    hv: HbmId,
    is_xt: bool,
    req_ot: bool,
    plan: &BlockPlan,
    opts: &KernelOptions,
    dtype: Dtype,
) -> Result<HbmId, KernelError> {
    let (m, k, r, n) = (plan.m, plan.k, plan.r, plan.n);
    let (b_m, b_k, b_r, b_n) = (plan.b_m, plan.b_k, plan.b_r, plan.b_n);
    let elem = dtype.size_bytes();
    banks_fit(b_r, b_m, 1, machine)?;
    if req_ot {
        banks_fit(b_n, b_m, 1, machine)?;
    } else {
        banks_fit(b_m, b_n, 1, machine)?;
    }
    let out = if req_ot {
        machine.hbm_alloc(n, m, dtype)
    } else {
        machine.hbm_alloc(m, n, dtype)
    };
    let pin_strip = !opts.allow_spill;

    for mb in 0..plan.g_m {
        let (m0, mf) = block_range(mb, b_m, m);

        // Phase 1: build the cached strip (XU)^T_{m,*} in SBUF. f32
        // accumulation over contraction tiles happens in PSUM per k-block;
        // k-block partials land in the strip at storage width.
        let mut strip = Vec::with_capacity(plan.g_r);
        for _ in 0..plan.g_r {
            strip.push(machine.sbuf_alloc(b_r, b_m, elem, pin_strip)?);
        }
        let x_buf = machine.sbuf_alloc(b_k, b_m, elem, false)?;
        let u_buf = machine.sbuf_alloc(b_k, b_r, elem, false)?;
        for kb in 0..plan.g_k {
            let (k0, kf) = block_range(kb, b_k, k);
            load_xt_block(machine, hx, is_xt, m0, mf, k0, kf, x_buf)?;
            for (pb, &strip_block) in strip.iter().enumerate() {
                let (p0, pf) = block_range(pb, b_r, r);
                machine.dma_load(hu, k0, p0, kf, pf, false, u_buf)?;
                let psum = machine.psum_alloc(b_r, b_m)?;
                machine.matmul_block(u_buf, x_buf, psum, true)?;
                machine.psum_evict(psum, strip_block, true)?;
                machine.psum_free(psum)?;
            }
        }
        machine.sbuf_free(x_buf)?;
        machine.sbuf_free(u_buf)?;
        machine.end_phase();

        // Phase 2: stream V blocks against the cached strip. Operand order
        // selects the output orientation at no cost.
        let v_buf = machine.sbuf_alloc(b_r, b_n, elem, false)?;
        let o_buf = if req_ot {
            machine.sbuf_alloc(b_n, b_m, elem, false)?
        } else {
            machine.sbuf_alloc(b_m, b_n, elem, false)?
        };
        for nb in 0..plan.g_n {
            let (n0, nf) = block_range(nb, b_n, n);
            let psum = if req_ot {
                machine.psum_alloc(b_n, b_m)?
            } else {
                machine.psum_alloc(b_m, b_n)?
            };
            for (pb, &strip_block) in strip.iter().enumerate() {
                let (p0, pf) = block_range(pb, b_r, r);
                machine.dma_load(hv, p0, n0, pf, nf, false, v_buf)?;
                if req_ot {
                    machine.matmul_block(v_buf, strip_block, psum, pb == 0)?;
                } else {
                    machine.matmul_block(strip_block, v_buf, psum, pb == 0)?;
                }
            }
            machine.psum_evict(psum, o_buf, false)?;
            machine.psum_free(psum)?;
            if req_ot {
                machine.dma_store(o_buf, nf, mf, out, n0, m0)?;
            } else {
                machine.dma_store(o_buf, mf, nf, out, m0, n0)?;
            }
        }
        machine.sbuf_free(v_buf)?;
        machine.sbuf_free(o_buf)?;
        for id in strip {
            machine.sbuf_free(id)?;
        }
        machine.end_phase();
    }
    Ok(out)
}

/// Strip-cached fused `O = X U V` (or `O^T`), with zero intermediate
/// transposes: the intermediate is produced directly transposed by operand
/// order, and the input's I/O transpose rides the DMA engine.
#[allow(clippy::too_many_arguments)]
pub fn xuv_fused(
    x: &Matrix,
    u: &Matrix,
    v: &Matrix,
    is_xt: bool,
    req_ot: bool,
    plan: &BlockPlan,
    machine: &mut Machine,
    opts: &KernelOptions,
) -> Result<KernelResult, KernelError> {
    let dtype = same_dtype(&[x, u, v])?;
    let (m, k) = if is_xt {
        (x.cols(), x.rows())
    } else {
        (x.rows(), x.cols())
    };
    let (r, n) = (u.cols(), v.cols());
    check(u.rows() == k && v.rows() == r, || {
        format!(
            "chain shapes m={} k={} vs u {}x{}, v {}x{}",
            m,
            k,
            u.rows(),
            u.cols(),
            v.rows(),
            v.cols()
        )
    })?;
    check(
        plan.m == m && plan.k == k && plan.r == r && plan.n == n,
        || "plan dims do not match inputs".into(),
    )?;
    let hx = machine.hbm_upload(x);
    let hu = machine.hbm_upload(u);
    let hv = machine.hbm_upload(v);
    let out = run_xuv_fused(machine, hx, hu, hv, is_xt, req_ot, plan, opts, dtype)?;
    Ok(finish(machine, out, plan, is_xt, req_ot, dtype))
}

/// Gated-MLP front half on HBM ids: `Y^T = (silu(X Ug Vg) .* (X Uu Vu))^T`.
#[allow(clippy::too_many_arguments)]
fn run_up_gate(
    machine: &mut Machine,
    hx: HbmId,
    hug: HbmId,
    hvg: HbmId,
    huu: HbmId,
    hvu: HbmId,
    plan: &BlockPlan,
    opts: &KernelOptions,
    dtype: Dtype,
) -> Result<HbmId, KernelError> {
    let (m, k, r, n) = (plan.m, plan.k, plan.r, plan.n);
    let (b_m, b_k, b_r, b_n) = (plan.b_m, plan.b_k, plan.b_r, plan.b_n);
    let elem = dtype.size_bytes();
    // Two projections accumulate concurrently in both phases.
    banks_fit(b_r, b_m, 2, machine)?;
    banks_fit(b_n, b_m, 2, machine)?;
    let out = machine.hbm_alloc(n, m, dtype);
    let pin_strip = !opts.allow_spill;

    for mb in 0..plan.g_m {
        let (m0, mf) = block_range(mb, b_m, m);

        let mut gate_strip = Vec::with_capacity(plan.g_r);
        let mut up_strip = Vec::with_capacity(plan.g_r);
        for _ in 0..plan.g_r {
            gate_strip.push(machine.sbuf_alloc(b_r, b_m, elem, pin_strip)?);
            up_strip.push(machine.sbuf_alloc(b_r, b_m, elem, pin_strip)?);
        }
        let x_buf = machine.sbuf_alloc(b_k, b_m, elem, false)?;
        let ug_buf = machine.sbuf_alloc(b_k, b_r, elem, false)?;
        let uu_buf = machine.sbuf_alloc(b_k, b_r, elem, false)?;
        for kb in 0..plan.g_k {
            let (k0, kf) = block_range(kb, b_k, k);
            load_xt_block(machine, hx, false, m0, mf, k0, kf, x_buf)?;
            for pb in 0..plan.g_r {
                let (p0, pf) = block_range(pb, b_r, r);
                machine.dma_load(hug, k0, p0, kf, pf, false, ug_buf)?;
                machine.dma_load(huu, k0, p0, kf, pf, false, uu_buf)?;
                let pg = machine.psum_alloc(b_r, b_m)?;
                let pu = machine.psum_alloc(b_r, b_m)?;
                machine.matmul_block(ug_buf, x_buf, pg, true)?;
                machine.matmul_block(uu_buf, x_buf, pu, true)?;
                machine.psum_evict(pg, gate_strip[pb], true)?;
                machine.psum_evict(pu, up_strip[pb], true)?;
                machine.psum_free(pg)?;
                machine.psum_free(pu)?;
            }
        }
        for id in [x_buf, ug_buf, uu_buf] {
            machine.sbuf_free(id)?;
        }
        machine.end_phase();

        let vg_buf = machine.sbuf_alloc(b_r, b_n, elem, false)?;
        let vu_buf = machine.sbuf_alloc(b_r, b_n, elem, false)?;
        let gate_o = machine.sbuf_alloc(b_n, b_m, elem, false)?;
        let up_o = machine.sbuf_alloc(b_n, b_m, elem, false)?;
        for nb in 0..plan.g_n {
            let (n0, nf) = block_range(nb, b_n, n);
            let pg = machine.psum_alloc(b_n, b_m)?;
            let pu = machine.psum_alloc(b_n, b_m)?;
            for pb in 0..plan.g_r {
                let (p0, pf) = block_range(pb, b_r, r);
                machine.dma_load(hvg, p0, n0, pf, nf, false, vg_buf)?;
                machine.dma_load(hvu, p0, n0, pf, nf, false, vu_buf)?;
                machine.matmul_block(vg_buf, gate_strip[pb], pg, pb == 0)?;
                machine.matmul_block(vu_buf, up_strip[pb], pu, pb == 0)?;
            }
            machine.psum_evict(pg, gate_o, false)?;
            machine.psum_evict(pu, up_o, false)?;
            machine.psum_free(pg)?;
            machine.psum_free(pu)?;
            // silu(gate) .* up on the scalar/vector engines, written back
            // over the gate staging block.
            machine.elementwise_silu_mul(gate_o, up_o, gate_o, b_n, b_m)?;
            machine.dma_store(gate_o, nf, mf, out, n0, m0)?;
        }
        for id in [vg_buf, vu_buf, gate_o, up_o] {
            machine.sbuf_free(id)?;
        }
        for id in gate_strip.into_iter().chain(up_strip) {
            machine.sbuf_free(id)?;
        }
        machine.end_phase();
    }
    Ok(out)
}

/// MLP up/gate projection: returns `Y^T (n x m)` where
/// `Y = silu(X Ug Vg) .* (X Uu Vu)`. Both intermediate strips are cached
/// concurrently, doubling the strip footprint of the fused kernel.
pub fn up_gate_projection(
    x: &Matrix,
    u_gate: &Matrix,
    v_gate: &Matrix,
    u_up: &Matrix,
    v_up: &Matrix,
    plan: &BlockPlan,
    machine: &mut Machine,
    opts: &KernelOptions,
) -> Result<KernelResult, KernelError> {
    let dtype = same_dtype(&[x, u_gate, v_gate, u_up, v_up])?;
    let (m, k) = (x.rows(), x.cols());
    let (r, n) = (u_gate.cols(), v_gate.cols());
    check(
        u_gate.rows() == k
            && u_up.rows() == k
            && u_up.cols() == r
            && v_gate.rows() == r
            && v_up.rows() == r
            && v_up.cols() == n,
        || "gate and up factor shapes must agree".into(),
    )?;
    check(
        plan.m == m && plan.k == k && plan.r == r && plan.n == n,
        || "plan dims do not match inputs".into(),
    )?;
    let hx = machine.hbm_upload(x);
    let hug = machine.hbm_upload(u_gate);
    let hvg = machine.hbm_upload(v_gate);
    let huu = machine.hbm_upload(u_up);
    let hvu = machine.hbm_upload(v_up);
    let out = run_up_gate(machine, hx, hug, hvg, huu, hvu, plan, opts, dtype)?;
    Ok(finish(machine, out, plan, false, true, dtype))
}

/// Full SVD-compressed MLP layer: up/gate projection producing `Y^T`, then
/// the fused kernel consuming it pre-transposed for the down projection.
/// No intermediate transpose anywhere; counters accumulate across both
/// stages.
#[allow(clippy::too_many_arguments)]
pub fn fused_mlp(
    x: &Matrix,
    u_gate: &Matrix,
    v_gate: &Matrix,
    u_up: &Matrix,
    v_up: &Matrix,
    u_down: &Matrix,
    v_down: &Matrix,
    plan_up: &BlockPlan,
    plan_down: &BlockPlan,
    machine: &mut Machine,
    opts: &KernelOptions,
) -> Result<KernelResult, KernelError> {
    let dtype = same_dtype(&[x, u_gate, v_gate, u_up, v_up, u_down, v_down])?;
    let (m, k) = (x.rows(), x.cols());
    let (r1, n) = (u_gate.cols(), v_gate.cols());
    let (r2, k_out) = (u_down.cols(), v_down.cols());
    check(u_down.rows() == n && v_down.rows() == r2 && k_out == k, || {
        format!(
            "down factors {}x{} * {}x{} must map the {}-wide intermediate back to {}",
            u_down.rows(),
            u_down.cols(),
            v_down.rows(),
            v_down.cols(),
            n,
            k
        )
    })?;
    check(
        plan_up.m == m && plan_up.k == k && plan_up.r == r1 && plan_up.n == n,
        || "up plan dims do not match inputs".into(),
    )?;
    check(
        plan_down.m == m && plan_down.k == n && plan_down.r == r2 && plan_down.n == k,
        || "down plan dims do not match the intermediate".into(),
    )?;

    let hx = machine.hbm_upload(x);
    let hug = machine.hbm_upload(u_gate);
    let hvg = machine.hbm_upload(v_gate);
    let huu = machine.hbm_upload(u_up);
    let hvu = machine.hbm_upload(v_up);
    let hyt = run_up_gate(machine, hx, hug, hvg, huu, hvu, plan_up, opts, dtype)?;

    let hud = machine.hbm_upload(u_down);
    let hvd = machine.hbm_upload(v_down);
    let out = run_xuv_fused(
        machine, hyt, hud, hvd, /* is_xt */ true, /* req_ot */ false, plan_down, opts,
        dtype,
    )?;
    Ok(finish(machine, out, plan_down, true, false, dtype))
}
