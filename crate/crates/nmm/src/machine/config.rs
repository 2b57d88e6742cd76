//! Simulated-core configuration.

use crate::error::MachineError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_sbuf_bytes() -> u64 {
    24 * (1 << 20)
}
fn default_psum_bytes() -> u64 {
    2 * (1 << 20)
}
fn default_partitions() -> usize {
    128
}
fn default_psum_banks() -> usize {
    8
}
fn default_stationary_tile_max() -> [usize; 2] {
    [128, 128]
}
fn default_moving_tile_max() -> [usize; 2] {
    [128, 512]
}
fn default_peak_flops() -> f64 {
    95e12
}
fn default_transpose_factor() -> f64 {
    1.0
}
fn default_roofline_threshold() -> f64 {
    222.0
}

/// Capacities, tile limits, bank counts, bandwidths and peak FLOP rate of
/// the simulated core.
///
/// `hbm_bandwidth` (bytes/s) has no hardware-documented default and is a
/// required key in config files; traffic counters never depend on it, only
/// the modeled times do.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineConfig {
    #[serde(default = "default_sbuf_bytes")]
    pub sbuf_bytes: u64,
    #[serde(default = "default_psum_bytes")]
    pub psum_bytes: u64,
    #[serde(default = "default_partitions")]
    pub partitions: usize,
    #[serde(default = "default_psum_banks")]
    pub psum_banks: usize,
    /// (partition, free) limits of a stationary tile.
    #[serde(default = "default_stationary_tile_max")]
    pub stationary_tile_max: [usize; 2],
    /// (partition, free) limits of a moving tile.
    #[serde(default = "default_moving_tile_max")]
    pub moving_tile_max: [usize; 2],
    /// Peak tensor-engine throughput, FLOP/s.
    #[serde(default = "default_peak_flops")]
    pub peak_flops: f64,
    /// HBM bandwidth in bytes/s. Required in config files.
    pub hbm_bandwidth: f64,
    /// Effective-bandwidth multiplier for DMA transfers that transpose in
    /// transit, in (0, 1].
    #[serde(default = "default_transpose_factor")]
    pub dma_transpose_bw_factor: f64,
    /// Arithmetic intensity (FLOPs/byte) above which a kernel is
    /// compute-bound on this core.
    #[serde(default = "default_roofline_threshold")]
    pub roofline_threshold: f64,
}

impl Default for MachineConfig {
    /// Built-in NeuronCore-like configuration. The bandwidth is derived as
    /// `peak_flops / roofline_threshold` so the roofline crossover of the
    /// time model sits exactly at the documented threshold.
    fn default() -> Self {
        MachineConfig {
            sbuf_bytes: default_sbuf_bytes(),
            psum_bytes: default_psum_bytes(),
            partitions: default_partitions(),
            psum_banks: default_psum_banks(),
            stationary_tile_max: default_stationary_tile_max(),
            moving_tile_max: default_moving_tile_max(),
            peak_flops: default_peak_flops(),
            hbm_bandwidth: default_peak_flops() / default_roofline_threshold(),
            dma_transpose_bw_factor: default_transpose_factor(),
            roofline_threshold: default_roofline_threshold(),
        }
    }
}

impl MachineConfig {
    pub fn validate(&self) -> Result<(), MachineError> {
        let bad = |msg: String| Err(MachineError::BadConfig(msg));
        if self.sbuf_bytes == 0 || self.psum_bytes == 0 {
            return bad("sbuf_bytes and psum_bytes must be positive".into());
        }
        if self.partitions == 0 || self.psum_banks == 0 {
            return bad("partitions and psum_banks must be positive".into());
        }
        if self.stationary_tile_max.iter().any(|&v| v == 0)
            || self.moving_tile_max.iter().any(|&v| v == 0)
        {
            return bad("tile limits must be positive".into());
        }
        if self.psum_bytes % (self.partitions as u64 * self.psum_banks as u64) != 0 {
            return bad(format!(
                "psum_bytes {} not divisible by partitions x banks {}",
                self.psum_bytes,
                self.partitions * self.psum_banks
            ));
        }
        if !(self.peak_flops > 0.0) || !(self.hbm_bandwidth > 0.0) {
            return bad("peak_flops and hbm_bandwidth must be positive".into());
        }
        if !(self.dma_transpose_bw_factor > 0.0 && self.dma_transpose_bw_factor <= 1.0) {
            return bad(format!(
                "dma_transpose_bw_factor {} not in (0, 1]",
                self.dma_transpose_bw_factor
            ));
        }
        if self.roofline_threshold < 0.0 {
            return bad("roofline_threshold must be non-negative".into());
        }
        Ok(())
    }

    /// Bytes of one PSUM bank per partition (2048 by default: 512 f32
    /// accumulators, i.e. one 128x512 f32 tile per bank).
    pub fn psum_bank_bytes_per_partition(&self) -> u64 {
        self.psum_bytes / self.partitions as u64 / self.psum_banks as u64
    }

    /// f32 accumulators per partition in one PSUM bank.
    pub fn psum_bank_f32_per_partition(&self) -> usize {
        (self.psum_bank_bytes_per_partition() / 4) as usize
    }

    /// Free-dim granule of one PSUM tile: moving-tile free limit capped by
    /// bank capacity.
    pub fn psum_tile_cols(&self) -> usize {
        self.moving_tile_max[1].min(self.psum_bank_f32_per_partition())
    }

    /// Partition-dim granule of one PSUM tile (stationary free limit).
    pub fn psum_tile_rows(&self) -> usize {
        self.stationary_tile_max[1]
    }

    pub fn from_toml_str(text: &str) -> Result<Self, MachineError> {
        let cfg: MachineConfig =
            toml::from_str(text).map_err(|e| MachineError::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, MachineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MachineError::BadConfig(format!("{}: {}", path.display(), e)))?;
        Self::from_toml_str(&text)
    }

    /// Stable hash of the full configuration, for report provenance.
    pub fn config_hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
