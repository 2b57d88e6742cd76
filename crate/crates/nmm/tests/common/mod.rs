//! Shared test utilities: an independent loop-walking traffic oracle and
//! dense reference helpers. The oracle re-derives per-kernel HBM traffic by
//! enumerating every DMA region the kernel's loop structure implies; it
//! never consults the machine's counters.

use nmm::layout::BlockPlan;
use nmm::linalg;
use nmm::matrix::Matrix;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Traffic {
    pub read_bytes: u64,
    pub write_bytes: u64,
}

fn crop(i: usize, block: usize, dim: usize) -> u64 {
    (block.min(dim - i * block)) as u64
}

fn grids(dim: usize, block: usize) -> usize {
    dim.div_ceil(block)
}

/// Blocked dense product: stationary reloads per output-column block,
/// moving per output-row block, one output write.
pub fn dense_traffic(
    m: usize,
    k: usize,
    n: usize,
    b_m: usize,
    b_k: usize,
    b_n: usize,
    s: u64,
) -> Traffic {
    let mut t = Traffic::default();
    for mb in 0..grids(m, b_m) {
        let mf = crop(mb, b_m, m);
        for nb in 0..grids(n, b_n) {
            let nf = crop(nb, b_n, n);
            for kb in 0..grids(k, b_k) {
                let kf = crop(kb, b_k, k);
                t.read_bytes += (mf * kf + kf * nf) * s;
            }
            t.write_bytes += mf * nf * s;
        }
    }
    t
}

pub fn xw_traffic(plan: &BlockPlan) -> Traffic {
    dense_traffic(
        plan.m,
        plan.k,
        plan.n,
        plan.b_m,
        plan.b_k,
        plan.b_n,
        plan.elem_bytes as u64,
    )
}

pub fn xuv_seq_traffic(plan: &BlockPlan) -> Traffic {
    let s = plan.elem_bytes as u64;
    let (m, k, r, n) = (plan.m, plan.k, plan.r, plan.n);
    let mm1 = dense_traffic(m, k, r, plan.b_m, plan.b_k, plan.b_r, s);
    // Transpose pass round-trips Y through HBM.
    let y = (m * r) as u64 * s;
    let mm2 = dense_traffic(m, r, n, plan.b_m, plan.b_r, plan.b_n, s);
    Traffic {
        read_bytes: mm1.read_bytes + y + mm2.read_bytes,
        write_bytes: mm1.write_bytes + y + mm2.write_bytes,
    }
}

pub fn xuv_naive_traffic(plan: &BlockPlan) -> Traffic {
    let s = plan.elem_bytes as u64;
    let (m, k, r, n) = (plan.m, plan.k, plan.r, plan.n);
    let mut t = Traffic::default();
    for mb in 0..grids(m, plan.b_m) {
        let mf = crop(mb, plan.b_m, m);
        for nb in 0..grids(n, plan.b_n) {
            let nf = crop(nb, plan.b_n, n);
            for pb in 0..grids(r, plan.b_r) {
                let pf = crop(pb, plan.b_r, r);
                for kb in 0..grids(k, plan.b_k) {
                    let kf = crop(kb, plan.b_k, k);
                    t.read_bytes += (mf * kf + kf * pf) * s;
                }
                t.read_bytes += pf * nf * s;
            }
            t.write_bytes += mf * nf * s;
        }
    }
    t
}

pub fn xuv_fused_traffic(plan: &BlockPlan) -> Traffic {
    let s = plan.elem_bytes as u64;
    let (m, k, r, n) = (plan.m, plan.k, plan.r, plan.n);
    let mut t = Traffic::default();
    for mb in 0..grids(m, plan.b_m) {
        let mf = crop(mb, plan.b_m, m);
        for kb in 0..grids(k, plan.b_k) {
            let kf = crop(kb, plan.b_k, k);
            t.read_bytes += mf * kf * s;
            for pb in 0..grids(r, plan.b_r) {
                let pf = crop(pb, plan.b_r, r);
                t.read_bytes += kf * pf * s;
            }
        }
        for nb in 0..grids(n, plan.b_n) {
            let nf = crop(nb, plan.b_n, n);
            for pb in 0..grids(r, plan.b_r) {
                let pf = crop(pb, plan.b_r, r);
                t.read_bytes += pf * nf * s;
            }
            t.write_bytes += mf * nf * s;
        }
    }
    t
}

pub fn upgate_traffic(plan: &BlockPlan) -> Traffic {
    let s = plan.elem_bytes as u64;
    let (m, k, r, n) = (plan.m, plan.k, plan.r, plan.n);
    let mut t = Traffic::default();
    for mb in 0..grids(m, plan.b_m) {
        let mf = crop(mb, plan.b_m, m);
        for kb in 0..grids(k, plan.b_k) {
            let kf = crop(kb, plan.b_k, k);
            t.read_bytes += mf * kf * s;
            for pb in 0..grids(r, plan.b_r) {
                let pf = crop(pb, plan.b_r, r);
                t.read_bytes += 2 * kf * pf * s;
            }
        }
        for nb in 0..grids(n, plan.b_n) {
            let nf = crop(nb, plan.b_n, n);
            for pb in 0..grids(r, plan.b_r) {
                let pf = crop(pb, plan.b_r, r);
                t.read_bytes += 2 * pf * nf * s;
            }
            t.write_bytes += nf * mf * s;
        }
    }
    t
}

pub fn mlp_traffic(plan_up: &BlockPlan, plan_down: &BlockPlan) -> Traffic {
    let up = upgate_traffic(plan_up);
    let down = xuv_fused_traffic(plan_down);
    Traffic {
        read_bytes: up.read_bytes + down.read_bytes,
        write_bytes: up.write_bytes + down.write_bytes,
    }
}

/// Spill-adjusted comparison: counted HBM traffic minus the spill round
/// trips must equal the loop-walk prediction.
pub fn assert_traffic_matches(counters: &nmm::machine::TraceCounters, expect: Traffic, what: &str) {
    assert_eq!(
        counters.hbm_read_bytes - counters.spill_reload_bytes,
        expect.read_bytes,
        "{what}: read bytes"
    );
    assert_eq!(
        counters.hbm_write_bytes - counters.spill_save_bytes,
        expect.write_bytes,
        "{what}: write bytes"
    );
}

pub fn oracle_chain(x: &Matrix, u: &Matrix, v: &Matrix) -> Matrix {
    linalg::matmul(&linalg::matmul(x, u).unwrap(), v).unwrap()
}

pub fn oracle_mlp_intermediate(
    x: &Matrix,
    ug: &Matrix,
    vg: &Matrix,
    uu: &Matrix,
    vu: &Matrix,
) -> Matrix {
    let gate = oracle_chain(x, ug, vg);
    let up = oracle_chain(x, uu, vu);
    linalg::hadamard(&linalg::silu(&gate), &up).unwrap()
}
