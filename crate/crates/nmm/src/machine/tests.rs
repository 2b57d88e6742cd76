use super::*;
use crate::linalg;
use crate::matrix::{Dtype, Matrix};

fn machine() -> Machine {
    Machine::new(MachineConfig::default()).unwrap()
}

const MB: u64 = 1 << 20;

#[test]
fn dma_load_counts_region_bytes_bf16() {
    let mut m = machine();
    let src = m.hbm_upload(&Matrix::random(128, 512, Dtype::Bf16, 1));
    let dst = m.sbuf_alloc(128, 512, 2, false).unwrap();
    m.dma_load(src, 0, 0, 128, 512, false, dst).unwrap();
    assert_eq!(m.counters().hbm_read_bytes, 131_072);
    assert_eq!(m.counters().sbuf_write_bytes, 131_072);
    assert_eq!(m.counters().dma_transfer_count, 1);
}

#[test]
fn zero_size_region_leaves_counters_unchanged() {
    let mut m = machine();
    let src = m.hbm_upload(&Matrix::random(8, 8, Dtype::F32, 1));
    let dst = m.sbuf_alloc(8, 8, 4, false).unwrap();
    let before = m.counters().clone();
    m.dma_load(src, 0, 0, 0, 8, false, dst).unwrap();
    m.dma_load(src, 0, 0, 8, 0, false, dst).unwrap();
    m.dma_store(dst, 0, 8, src, 0, 0).unwrap();
    assert_eq!(m.counters(), &before);
}

#[test]
fn dma_store_counts_f32_block() {
    let mut m = machine();
    let dst = m.hbm_alloc(512, 512, Dtype::F32);
    let buf = m.sbuf_alloc(512, 512, 4, false).unwrap();
    m.dma_store(buf, 512, 512, dst, 0, 0).unwrap();
    assert_eq!(m.counters().hbm_write_bytes, 1_048_576);
    assert_eq!(m.counters().sbuf_read_bytes, 1_048_576);
}

#[test]
fn transposed_load_round_trips() {
    let mut m = machine();
    let a = Matrix::random(128, 128, Dtype::F32, 3);
    let src = m.hbm_upload(&a);
    let buf = m.sbuf_alloc(128, 128, 4, false).unwrap();
    let mid = m.hbm_alloc(128, 128, Dtype::F32);
    m.dma_load(src, 0, 0, 128, 128, true, buf).unwrap();
    m.dma_store(buf, 128, 128, mid, 0, 0).unwrap();
    let buf2 = m.sbuf_alloc(128, 128, 4, false).unwrap();
    m.dma_load(mid, 0, 0, 128, 128, true, buf2).unwrap();
    let out = m.hbm_alloc(128, 128, Dtype::F32);
    m.dma_store(buf2, 128, 128, out, 0, 0).unwrap();
    assert_eq!(m.hbm_download(out).unwrap(), a);
}

#[test]
fn store_then_load_preserves_values_exactly() {
    let mut m = machine();
    let a = Matrix::random(64, 48, Dtype::F32, 9);
    let src = m.hbm_upload(&a);
    let buf = m.sbuf_alloc(64, 48, 4, false).unwrap();
    m.dma_load(src, 0, 0, 64, 48, false, buf).unwrap();
    let out = m.hbm_alloc(64, 48, Dtype::F32);
    m.dma_store(buf, 64, 48, out, 0, 0).unwrap();
    assert_eq!(m.hbm_download(out).unwrap(), a);
}

#[test]
fn dma_rejects_out_of_bounds_and_small_dst() {
    let mut m = machine();
    let src = m.hbm_upload(&Matrix::random(16, 16, Dtype::F32, 0));
    let dst = m.sbuf_alloc(8, 8, 4, false).unwrap();
    assert!(matches!(
        m.dma_load(src, 10, 0, 8, 8, false, dst),
        Err(MachineError::HbmOutOfBounds { .. })
    ));
    assert!(matches!(
        m.dma_load(src, 0, 0, 16, 16, false, dst),
        Err(MachineError::DstTooSmall { .. })
    ));
}

#[test]
fn nki_matmul_flop_example() {
    let mut m = machine();
    let s = m.sbuf_alloc(128, 128, 2, false).unwrap();
    let mv = m.sbuf_alloc(128, 512, 2, false).unwrap();
    let p = m.psum_alloc(128, 512).unwrap();
    let st = TileRef { buf: s, row0: 0, col0: 0, rows: 128, cols: 128 };
    let mt = TileRef { buf: mv, row0: 0, col0: 0, rows: 128, cols: 512 };
    m.nki_matmul(st, mt, p, 0, 0, true).unwrap();
    assert_eq!(m.counters().matmul_flops, 16_777_216);
    assert_eq!(m.counters().matmul_instruction_count, 1);
    assert_eq!(m.counters().psum_write_bytes, 128 * 512 * 4);
}

#[test]
fn nki_matmul_rejects_tile_violations() {
    let cfg = MachineConfig::default();
    let mut m = Machine::new(cfg).unwrap();
    let s = m.sbuf_alloc(129, 128, 4, false).unwrap();
    let mv = m.sbuf_alloc(129, 512, 4, false).unwrap();
    let p = m.psum_alloc(128, 512).unwrap();
    let st = TileRef { buf: s, row0: 0, col0: 0, rows: 129, cols: 128 };
    let mt = TileRef { buf: mv, row0: 0, col0: 0, rows: 129, cols: 512 };
    let err = m.nki_matmul(st, mt, p, 0, 0, true).unwrap_err();
    match err {
        MachineError::TileLimit { axis, got, limit, .. } => {
            assert_eq!((axis, got, limit), ("partition", 129, 128));
        }
        other => panic!("expected tile limit, got {other:?}"),
    }

    let st = TileRef { buf: s, row0: 0, col0: 0, rows: 128, cols: 128 };
    let mt = TileRef { buf: mv, row0: 0, col0: 0, rows: 128, cols: 513 };
    assert!(m.nki_matmul(st, mt, p, 0, 0, true).is_err());

    // Bank (tile index) outside the allocated block.
    let mt = TileRef { buf: mv, row0: 0, col0: 0, rows: 128, cols: 512 };
    assert!(matches!(
        m.nki_matmul(st, mt, p, 1, 0, true),
        Err(MachineError::BankOutOfRange { .. })
    ));
}

#[test]
fn accumulation_matches_sum_of_fresh_results() {
    let run = |accumulate: bool| -> Matrix {
        let mut m = machine();
        let a1 = Matrix::random(32, 16, Dtype::F32, 1);
        let a2 = Matrix::random(32, 16, Dtype::F32, 2);
        let b1 = Matrix::random(32, 24, Dtype::F32, 3);
        let b2 = Matrix::random(32, 24, Dtype::F32, 4);
        let mut outputs = Vec::new();
        for (a, b) in [(&a1, &b1), (&a2, &b2)] {
            let ha = m.hbm_upload(a);
            let hb = m.hbm_upload(b);
            let sa = m.sbuf_alloc(32, 16, 4, false).unwrap();
            let sb = m.sbuf_alloc(32, 24, 4, false).unwrap();
            m.dma_load(ha, 0, 0, 32, 16, false, sa).unwrap();
            m.dma_load(hb, 0, 0, 32, 24, false, sb).unwrap();
            outputs.push((sa, sb));
        }
        let p = m.psum_alloc(16, 24).unwrap();
        let staging = m.sbuf_alloc(16, 24, 4, false).unwrap();
        if accumulate {
            for (i, (sa, sb)) in outputs.iter().enumerate() {
                let st = TileRef { buf: *sa, row0: 0, col0: 0, rows: 32, cols: 16 };
                let mt = TileRef { buf: *sb, row0: 0, col0: 0, rows: 32, cols: 24 };
                m.nki_matmul(st, mt, p, 0, 0, i == 0).unwrap();
            }
            m.psum_evict(p, staging, false).unwrap();
        } else {
            // Two start-fresh products summed in the staging buffer.
            for (sa, sb) in &outputs {
                let st = TileRef { buf: *sa, row0: 0, col0: 0, rows: 32, cols: 16 };
                let mt = TileRef { buf: *sb, row0: 0, col0: 0, rows: 32, cols: 24 };
                m.nki_matmul(st, mt, p, 0, 0, true).unwrap();
                m.psum_evict(p, staging, true).unwrap();
            }
        }
        let out = m.hbm_alloc(16, 24, Dtype::F32);
        m.dma_store(staging, 16, 24, out, 0, 0).unwrap();
        m.hbm_download(out).unwrap()
    };
    // Equal up to f32 summation-order rounding.
    assert!(run(true).relative_error(&run(false)) < 1e-6);
}

#[test]
fn matmul_block_degenerate_grid_is_one_instruction() {
    let mut m = machine();
    let s = m.sbuf_alloc(128, 128, 4, false).unwrap();
    let mv = m.sbuf_alloc(128, 128, 4, false).unwrap();
    let p = m.psum_alloc(128, 128).unwrap();
    m.matmul_block(s, mv, p, true).unwrap();
    assert_eq!(m.counters().matmul_instruction_count, 1);
}

#[test]
fn matmul_block_tile_grid_instruction_count() {
    // b_k=256, b_m=256, b_n=512 -> t_m * t_n * t_k = 2 * 1 * 2 = 4.
    let mut m = machine();
    let s = m.sbuf_alloc(256, 256, 4, false).unwrap();
    let mv = m.sbuf_alloc(256, 512, 4, false).unwrap();
    let p = m.psum_alloc(256, 512).unwrap();
    m.matmul_block(s, mv, p, true).unwrap();
    assert_eq!(m.counters().matmul_instruction_count, 4);
    assert_eq!(
        m.counters().matmul_flops,
        2 * 256 * 256 * 512,
        "block flops are the closed form"
    );
}

#[test]
fn matmul_block_matches_dense_reference() {
    let mut m = machine();
    let s_host = Matrix::random(256, 256, Dtype::F32, 5);
    let m_host = Matrix::random(256, 512, Dtype::F32, 6);
    let hs = m.hbm_upload(&s_host);
    let hm = m.hbm_upload(&m_host);
    let bs = m.sbuf_alloc(256, 256, 4, false).unwrap();
    let bm = m.sbuf_alloc(256, 512, 4, false).unwrap();
    m.dma_load(hs, 0, 0, 256, 256, false, bs).unwrap();
    m.dma_load(hm, 0, 0, 256, 512, false, bm).unwrap();
    let p = m.psum_alloc(256, 512).unwrap();
    m.matmul_block(bs, bm, p, true).unwrap();
    let staging = m.sbuf_alloc(256, 512, 4, false).unwrap();
    m.psum_evict(p, staging, false).unwrap();
    assert_eq!(m.counters().psum_read_bytes, 256 * 512 * 4);
    let out = m.hbm_alloc(256, 512, Dtype::F32);
    m.dma_store(staging, 256, 512, out, 0, 0).unwrap();
    let got = m.hbm_download(out).unwrap();
    let expect = linalg::matmul(&linalg::transpose(&s_host), &m_host).unwrap();
    assert!(got.relative_error(&expect) < 1e-5);
}

#[test]
fn psum_banks_are_a_hard_limit() {
    let mut m = machine();
    // 512x512 f32 occupies 4 banks; a second and part of a third block fit,
    // a request beyond 8 banks errors.
    let a = m.psum_alloc(512, 512).unwrap();
    let _b = m.psum_alloc(256, 512).unwrap(); // 2 banks -> 6 in use
    assert!(matches!(
        m.psum_alloc(512, 512),
        Err(MachineError::PsumBanksExhausted { requested: 4, free: 2, .. })
    ));
    assert_eq!(m.live_accumulation_banks(), 6);
    m.psum_free(a).unwrap();
    assert_eq!(m.live_accumulation_banks(), 2);
    let _c = m.psum_alloc(512, 512).unwrap();
    // A single block larger than all banks can never fit.
    assert!(m.psum_alloc(1024, 1024).is_err());
}

#[test]
fn sbuf_within_capacity_never_spills() {
    let mut m = machine();
    for _ in 0..6 {
        m.sbuf_alloc(1024, 1024, 4, false).unwrap(); // 4 MB each, 24 MB total
    }
    assert_eq!(m.counters().spill_save_bytes, 0);
    assert_eq!(m.counters().spill_reload_bytes, 0);
    assert_eq!(m.peak_sbuf_observed(), 24 * MB);
}

#[test]
fn sbuf_over_capacity_spills() {
    let mut m = machine();
    for _ in 0..5 {
        m.sbuf_alloc(1024, 1280, 4, false).unwrap(); // 5 MB each -> 25 MB live
    }
    assert!(m.counters().spill_save_bytes > 0);
}

#[test]
fn lru_evicts_least_recently_touched() {
    let mut m = machine();
    let a = m.sbuf_alloc(1024, 2560, 4, false).unwrap(); // 10 MB
    let b = m.sbuf_alloc(1024, 2560, 4, false).unwrap(); // 10 MB
    m.touch(a).unwrap();
    let _c = m.sbuf_alloc(1024, 2560, 4, false).unwrap(); // evicts B
    assert_eq!(m.counters().spill_save_bytes, 10 * MB);
    let before_reload = m.counters().spill_reload_bytes;
    m.touch(a).unwrap(); // A stayed resident
    assert_eq!(m.counters().spill_reload_bytes, before_reload);
    m.touch(b).unwrap(); // B reloads, charging the round trip
    assert_eq!(m.counters().spill_reload_bytes, 10 * MB);
    assert!(m.counters().hbm_read_bytes >= 10 * MB);
}

#[test]
fn spilled_buffer_restores_its_data() {
    let mut m = machine();
    let a = Matrix::random(1024, 2560, Dtype::F32, 7);
    let ha = m.hbm_upload(&a);
    let ba = m.sbuf_alloc(1024, 2560, 4, false).unwrap();
    m.dma_load(ha, 0, 0, 1024, 2560, false, ba).unwrap();
    let _b = m.sbuf_alloc(1024, 2560, 4, false).unwrap();
    let _c = m.sbuf_alloc(1024, 2560, 4, false).unwrap(); // 30 MB live: A evicted
    assert!(m.counters().spill_save_bytes >= 10 * MB);
    let out = m.hbm_alloc(1024, 2560, Dtype::F32);
    m.dma_store(ba, 1024, 2560, out, 0, 0).unwrap(); // touch reloads A
    assert_eq!(m.hbm_download(out).unwrap(), a);
}

#[test]
fn pinned_buffers_survive_and_can_deadlock() {
    let mut m = machine();
    let _pin = m.sbuf_alloc(1024, 5120, 4, true).unwrap(); // 20 MB pinned
    let err = m.sbuf_alloc(1024, 2560, 4, true).unwrap_err(); // +10 MB pinned
    assert!(matches!(err, MachineError::PinnedEviction { .. }));
}

#[test]
fn single_allocation_beyond_sbuf_is_unsatisfiable() {
    let mut m = machine();
    assert!(matches!(
        m.sbuf_alloc(1024, 6400, 4, false), // 25 MB in one buffer
        Err(MachineError::AllocTooLarge { .. })
    ));
}

#[test]
fn peak_tracks_high_water_mark() {
    let mut m = machine();
    assert_eq!(m.peak_sbuf_observed(), 0);
    let a = m.sbuf_alloc(1024, 1280, 4, false).unwrap(); // 5 MB
    assert_eq!(m.peak_sbuf_observed(), 5 * MB);
    m.sbuf_free(a).unwrap();
    let _b = m.sbuf_alloc(512, 1280, 4, false).unwrap(); // 2.5 MB
    assert_eq!(m.peak_sbuf_observed(), 5 * MB);
}

#[test]
fn tensor_transpose_counts_and_moves_values() {
    let mut m = machine();
    let a = Matrix::random(128, 96, Dtype::F32, 11);
    let ha = m.hbm_upload(&a);
    let src = m.sbuf_alloc(128, 96, 4, false).unwrap();
    let dst = m.sbuf_alloc(96, 128, 4, false).unwrap();
    m.dma_load(ha, 0, 0, 128, 96, false, src).unwrap();
    m.tensor_transpose(src, 128, 96, dst).unwrap();
    assert_eq!(m.counters().transpose_flops, 2 * 128 * 128 * 96);
    assert_eq!(m.counters().matmul_flops, 0);
    let out = m.hbm_alloc(96, 128, Dtype::F32);
    m.dma_store(dst, 96, 128, out, 0, 0).unwrap();
    assert_eq!(m.hbm_download(out).unwrap(), linalg::transpose(&a));
}

#[test]
fn counter_mode_matches_data_mode_exactly() {
    let run = |data: bool| -> TraceCounters {
        let mut m = Machine::new(MachineConfig::default())
            .unwrap()
            .with_data_mode(data);
        let x = Matrix::random(200, 300, Dtype::Bf16, 1);
        let w = Matrix::random(300, 600, Dtype::Bf16, 2);
        let hx = m.hbm_upload(&x);
        let hw = m.hbm_upload(&w);
        let bx = m.sbuf_alloc(300, 200, 2, false).unwrap();
        let bw = m.sbuf_alloc(300, 600, 2, false).unwrap();
        m.dma_load(hx, 0, 0, 200, 300, true, bx).unwrap();
        m.dma_load(hw, 0, 0, 300, 600, false, bw).unwrap();
        let p = m.psum_alloc(200, 600).unwrap();
        m.matmul_block(bx, bw, p, true).unwrap();
        m.matmul_block(bx, bw, p, false).unwrap();
        let staging = m.sbuf_alloc(200, 600, 2, false).unwrap();
        m.psum_evict(p, staging, false).unwrap();
        let out = m.hbm_alloc(200, 600, Dtype::Bf16);
        m.dma_store(staging, 200, 600, out, 0, 0).unwrap();
        m.end_phase();
        m.counters().clone()
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn phase_time_is_roofline_max() {
    let mut m = machine();
    let s = m.sbuf_alloc(128, 128, 4, false).unwrap();
    let mv = m.sbuf_alloc(128, 512, 4, false).unwrap();
    let p = m.psum_alloc(128, 512).unwrap();
    m.matmul_block(s, mv, p, true).unwrap();
    let h = m.hbm_alloc(128, 512, Dtype::F32);
    let staging = m.sbuf_alloc(128, 512, 4, false).unwrap();
    m.psum_evict(p, staging, false).unwrap();
    m.dma_store(staging, 128, 512, h, 0, 0).unwrap();
    m.end_phase();
    let c = m.counters();
    let compute = m.config().peak_flops;
    let bw = m.config().hbm_bandwidth;
    let expect_compute = (2u64 * 128 * 128 * 512) as f64 / compute;
    let expect_dma = (128u64 * 512 * 4) as f64 / bw;
    assert!((c.modeled_compute_seconds - expect_compute).abs() < 1e-15);
    assert!((c.modeled_dma_seconds - expect_dma).abs() < 1e-15);
    assert_eq!(
        c.modeled_total_seconds,
        c.modeled_compute_seconds.max(c.modeled_dma_seconds)
    );
}

#[test]
fn replayed_runs_are_bit_identical() {
    let run = || -> TraceCounters {
        let mut m = machine();
        let a = Matrix::random(100, 200, Dtype::F32, 33);
        let ha = m.hbm_upload(&a);
        let ba = m.sbuf_alloc(200, 100, 4, false).unwrap();
        m.dma_load(ha, 0, 0, 100, 200, true, ba).unwrap();
        let bm = m.sbuf_alloc(200, 150, 4, false).unwrap();
        let p = m.psum_alloc(100, 150).unwrap();
        m.matmul_block(ba, bm, p, true).unwrap();
        m.end_phase();
        m.counters().clone()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert_eq!(
        a.modeled_total_seconds.to_bits(),
        b.modeled_total_seconds.to_bits()
    );
}
