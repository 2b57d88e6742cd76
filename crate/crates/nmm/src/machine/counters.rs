//! Per-run accounting of bytes moved, FLOPs, instructions, spills, and
//! modeled time.

use serde::Serialize;

/// All counters are monotone within a run. Modeled time follows the
/// roofline overlap assumption: per kernel phase the DMA engine and the
/// tensor engine overlap perfectly, so each phase contributes
/// `max(compute, dma)` to `modeled_total_seconds` while the compute and dma
/// columns accumulate their own sums.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TraceCounters {
    pub hbm_read_bytes: u64,
    pub hbm_write_bytes: u64,
    pub sbuf_read_bytes: u64,
    pub sbuf_write_bytes: u64,
    pub psum_read_bytes: u64,
    pub psum_write_bytes: u64,
    pub matmul_flops: u64,
    pub transpose_flops: u64,
    pub matmul_instruction_count: u64,
    pub dma_transfer_count: u64,
    pub spill_save_bytes: u64,
    pub spill_reload_bytes: u64,
    pub intermediate_transpose_count: u64,
    pub modeled_compute_seconds: f64,
    pub modeled_dma_seconds: f64,
    pub modeled_total_seconds: f64,
}

impl TraceCounters {
    /// Total HBM traffic, spills included.
    pub fn hbm_total_bytes(&self) -> u64 {
        self.hbm_read_bytes + self.hbm_write_bytes
    }

    /// Measured arithmetic intensity: matmul FLOPs per byte of HBM traffic.
    pub fn arithmetic_intensity(&self) -> f64 {
        let bytes = self.hbm_total_bytes();
        if bytes == 0 {
            0.0
        } else {
            self.matmul_flops as f64 / bytes as f64
        }
    }
}
