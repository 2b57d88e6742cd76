use thiserror::Error;

/// Errors from dense tensor operations and matrix file I/O.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {max_asym:.3e} at ({row},{col}))")]
    NotSymmetric {
        row: usize,
        col: usize,
        max_asym: f64,
    },
    #[error("cholesky factorization failed at pivot {pivot} (value {value:.3e} after jitter {jitter:.3e})")]
    CholeskyFailed {
        pivot: usize,
        value: f64,
        jitter: f64,
    },
    #[error("rank {rank} out of range for {rows}x{cols} matrix")]
    RankOutOfRange {
        rank: usize,
        rows: usize,
        cols: usize,
    },
    #[error("jitter must be non-negative, got {0}")]
    NegativeJitter(f64),
    #[error("element {index} ({value}) is not bf16-representable")]
    NotBf16Representable { index: usize, value: f32 },
    #[error("element count {len} does not match {rows}x{cols}")]
    BadDataLength { rows: usize, cols: usize, len: usize },
    #[error("bad matrix file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors from the simulated machine (DMA, tensor engine, SBUF/PSUM).
#[derive(Debug, Error)]
pub enum MachineError {
    #[error("{operand} tile {axis} dimension {got} exceeds limit {limit}")]
    TileLimit {
        operand: &'static str,
        axis: &'static str,
        got: usize,
        limit: usize,
    },
    #[error("tile contraction dimensions differ: stationary {stationary}, moving {moving}")]
    ContractionMismatch { stationary: usize, moving: usize },
    #[error("psum bank {bank} out of range ({banks} banks)")]
    BankOutOfRange { bank: usize, banks: usize },
    #[error("psum bank {bank} holds no accumulation group")]
    BankNotAllocated { bank: usize },
    #[error("accumulation group needs {requested} psum banks but only {free} of {banks} are free")]
    PsumBanksExhausted {
        requested: usize,
        free: usize,
        banks: usize,
    },
    #[error("moving tile free dim {free_dim} exceeds psum bank capacity ({capacity} f32 per partition)")]
    BankCapacity { free_dim: usize, capacity: usize },
    #[error("sbuf allocation of {bytes} bytes exceeds sbuf capacity {sbuf_bytes}")]
    AllocTooLarge { bytes: u64, sbuf_bytes: u64 },
    #[error("sbuf residency requires evicting a pinned buffer ({needed} bytes needed, {resident} resident)")]
    PinnedEviction { needed: u64, resident: u64 },
    #[error("hbm region out of bounds: rows {row0}..{row1} cols {col0}..{col1} of {rows}x{cols}")]
    HbmOutOfBounds {
        row0: usize,
        row1: usize,
        col0: usize,
        col1: usize,
        rows: usize,
        cols: usize,
    },
    #[error("destination buffer too small: region needs {needed_rows}x{needed_cols}, buffer is {rows}x{cols}")]
    DstTooSmall {
        needed_rows: usize,
        needed_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("buffer {0} was freed")]
    BufferFreed(usize),
    #[error("block shape mismatch: {0}")]
    BlockShape(String),
    #[error("machine config invalid: {0}")]
    BadConfig(String),
}

/// Errors from block-size planning.
#[derive(Debug, Error)]
pub enum PlanError {
    #[error(
        "plan infeasible: predicted peak sbuf {predicted_peak_bytes} bytes exceeds capacity \
         {sbuf_bytes} bytes (b_m={b_m}, b_k={b_k}, b_r={b_r}, b_n={b_n})"
    )]
    Infeasible {
        predicted_peak_bytes: u64,
        sbuf_bytes: u64,
        b_m: usize,
        b_k: usize,
        b_r: usize,
        b_n: usize,
    },
    #[error("block {name}={value} must be a positive multiple of {granule}")]
    BadBlock {
        name: &'static str,
        value: usize,
        granule: usize,
    },
    #[error(
        "blocks need {banks} psum banks for a {rows}x{cols} accumulation but only {available} exist"
    )]
    PsumInfeasible {
        banks: usize,
        rows: usize,
        cols: usize,
        available: usize,
    },
    #[error("dimension {name} must be positive")]
    ZeroDim { name: &'static str },
}

/// Errors from kernel execution on the simulated machine.
#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("kernel inputs mix dtypes: {0:?} vs {1:?}")]
    DtypeMismatch(crate::matrix::Dtype, crate::matrix::Dtype),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Machine(#[from] MachineError),
}

/// Errors from the SVD compression pipeline.
#[derive(Debug, Error)]
pub enum CompressError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("compression ratio must satisfy 0 <= ratio < 1, got {0}")]
    BadRatio(f64),
    #[error("rounding threshold alpha must satisfy 0 <= alpha < 1, got {0}")]
    BadAlpha(f64),
    #[error("block size {block_size} must be a positive multiple of {tile}")]
    BadBlockSize { block_size: usize, tile: usize },
    #[error("rank selection infeasible: min(k, n) = {min_dim} is below block size {block_size}")]
    RankInfeasible { min_dim: usize, block_size: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("calibration matrix is empty")]
    EmptyCalibration,
}
