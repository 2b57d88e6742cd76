//! Desk-scale, counter-exact simulator of a NeuronCore-style systolic
//! accelerator, plus the kernels and compression pipeline that run on it:
//!
//! - [`matrix`] / [`linalg`] / [`bf16`] / [`io`]: dense numerics foundation
//!   and the NMM1 matrix file format.
//! - [`machine`]: simulated HBM / SBUF / PSUM with DMA transfers, the
//!   tile-level tensor-engine instruction, an LRU-spilling SBUF allocator,
//!   and exhaustive traffic/FLOP counters.
//! - [`layout`]: tile/block/strip arithmetic and the analytic block-size
//!   planner (arithmetic-intensity and peak-SBUF models).
//! - [`kernels`]: the matmul strategies (plain, sequential low-rank, naive
//!   fused, strip-cached fused, and the fused MLP kernels), each returning
//!   its numeric result plus counters.
//! - [`compress`]: activation-whitened, block-aligned truncated-SVD weight
//!   compression with adapter merging.
//! - [`report`] / [`cli`]: machine-readable run reports and the command-line
//!   harness.

pub mod bf16;
pub mod cli;
pub mod compress;
pub mod error;
pub mod io;
pub mod kernels;
pub mod layout;
pub mod linalg;
pub mod machine;
pub mod matrix;
pub mod report;

pub use error::{CompressError, KernelError, MachineError, PlanError, TensorError};
pub use matrix::{Dtype, Matrix};
