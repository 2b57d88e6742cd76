//! Block-aligned truncated-SVD weight compression.
//!
//! A weight `W (k x n)` is optionally scaled by an activation-derived
//! whitener `S` before decomposition, truncated to a block-aligned rank,
//! and consolidated into the low-rank pair `U' (k x r)`, `V' (r x n)` with
//! `W ~ U' V'`. Low-rank adapters can later be merged into the factors.

use crate::error::CompressError;
use crate::linalg;
use crate::matrix::Matrix;
use serde::Serialize;

/// Tile granule that `block_size` must respect.
pub const TILE_SIZE: usize = 128;

/// Low-rank factor pair with provenance.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `k x r` left factor (input-adjacent in `X U' V'` chains).
    pub u_prime: Matrix,
    /// `r x n` right factor.
    pub v_prime: Matrix,
    pub rank: usize,
    pub block_size: usize,
    /// `(S, S_inv)` when the weight was whitened.
    pub whitener: Option<(Matrix, Matrix)>,
    pub requested_ratio: f64,
    pub achieved_ratio: f64,
    /// `||W - U'V'||_F`; `None` after a merge without the original weight.
    pub reconstruction_error: Option<f64>,
}

/// Whitener from calibration activations: `S` with `S S^T = X^T X + jitter I`
/// (lower triangular, positive diagonal), plus its inverse.
///
/// `jitter` defaults to `1e-6 * trace(gram) / n`; calibration Gram matrices
/// are frequently near-singular.
pub fn activation_whitening(
    x_calib: &Matrix,
    jitter: Option<f64>,
) -> Result<(Matrix, Matrix), CompressError> {
    if x_calib.rows() == 0 || x_calib.cols() == 0 {
        return Err(CompressError::EmptyCalibration);
    }
    let gram = linalg::matmul(&linalg::transpose(x_calib), x_calib)?;
    let n = gram.rows();
    let jitter = jitter.unwrap_or_else(|| {
        let trace: f64 = (0..n).map(|i| gram.get(i, i) as f64).sum();
        1e-6 * trace / n as f64
    });
    let s = linalg::cholesky(&gram, jitter)?;
    let s_inv = linalg::lower_triangular_inverse(&s)?;
    Ok((s, s_inv))
}

/// Block-aligned rank for a `k x n` weight at the requested compression
/// ratio: `floor(k*n*(1-ratio) / ((k+n)*block_size) + alpha) * block_size`,
/// clamped to `[block_size, floor(min(k,n)/block_size) * block_size]`.
pub fn block_aligned_rank(
    k: usize,
    n: usize,
    ratio: f64,
    block_size: usize,
    alpha: f64,
) -> Result<usize, CompressError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CompressError::BadRatio(ratio));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(CompressError::BadAlpha(alpha));
    }
    if block_size == 0 || block_size % TILE_SIZE != 0 {
        return Err(CompressError::BadBlockSize {
            block_size,
            tile: TILE_SIZE,
        });
    }
    let min_dim = k.min(n);
    if min_dim < block_size {
        return Err(CompressError::RankInfeasible {
            min_dim,
            block_size,
        });
    }
    let raw = (k as f64) * (n as f64) * (1.0 - ratio) / (((k + n) * block_size) as f64);
    let blocks = (raw + alpha).floor() as usize;
    let r = blocks * block_size;
    let hi = (min_dim / block_size) * block_size;
    Ok(r.clamp(block_size, hi))
}

/// Fraction of parameters removed: `1 - r(k+n)/(kn)`. May be <= 0 when the
/// rank over-retains; callers flag that case via [`is_over_retained`].
pub fn compression_ratio(k: usize, n: usize, r: usize) -> f64 {
    1.0 - (r * (k + n)) as f64 / (k as f64 * n as f64)
}

pub fn is_over_retained(achieved_ratio: f64) -> bool {
    achieved_ratio <= 0.0
}

/// Singular values this far below the largest are treated as noise before
/// the sqrt split.
const SIGMA_FLOOR_REL: f32 = 1e-12;

/// Compress one weight: rank selection, truncated SVD of the (whitened)
/// weight, and factor consolidation
/// `U' = U_r sqrt(S_r)`, `V' = sqrt(S_r) V_r^T [S^-1]`.
pub fn compress_weight(
    w: &Matrix,
    whitener: Option<(&Matrix, &Matrix)>,
    ratio: f64,
    block_size: usize,
    alpha: f64,
) -> Result<SvdFactors, CompressError> {
    let (k, n) = (w.rows(), w.cols());
    if let Some((s, s_inv)) = whitener {
        if s.rows() != n || s.cols() != n || s_inv.rows() != n || s_inv.cols() != n {
            return Err(CompressError::Shape(format!(
                "whitener is {}x{}, weight columns are {}",
                s.rows(),
                s.cols(),
                n
            )));
        }
    }
    let rank = block_aligned_rank(k, n, ratio, block_size, alpha)?;
    let ws = match whitener {
        Some((s, _)) => linalg::matmul(w, s)?,
        None => w.clone(),
    };
    let (u, mut sigma, v) = linalg::truncated_svd(&ws, rank)?;
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let floor = SIGMA_FLOOR_REL * sigma_max;
    for s in &mut sigma {
        if *s < floor {
            *s = floor;
        }
    }

    // U' = U_r * sqrt(S_r)
    let mut u_prime = Matrix::zeros(k, rank);
    for j in 0..rank {
        let scale = sigma[j].sqrt();
        for i in 0..k {
            u_prime.set(i, j, u.get(i, j) * scale);
        }
    }
    // V' = sqrt(S_r) * V_r^T (* S^-1 when whitened)
    let mut vt = Matrix::zeros(rank, n);
    for i in 0..rank {
        let scale = sigma[i].sqrt();
        for j in 0..n {
            vt.set(i, j, v.get(j, i) * scale);
        }
    }
    let v_prime = match whitener {
        Some((_, s_inv)) => linalg::matmul(&vt, s_inv)?,
        None => vt,
    };

    let reconstruction = linalg::matmul(&u_prime, &v_prime)?;
    let err = reconstruction.frobenius_distance(w);

    Ok(SvdFactors {
        u_prime,
        v_prime,
        rank,
        block_size,
        whitener: whitener.map(|(s, si)| (s.clone(), si.clone())),
        requested_ratio: ratio,
        achieved_ratio: compression_ratio(k, n, rank),
        reconstruction_error: Some(err),
    })
}

/// Fold trained adapters into the factors: `U' += B_u A_u`, `V' += B_v A_v`.
/// Rank and block alignment are preserved; the reconstruction error is
/// recomputed when the original weight is supplied.
pub fn lora_merge(
    factors: &SvdFactors,
    b_u: &Matrix,
    a_u: &Matrix,
    b_v: &Matrix,
    a_v: &Matrix,
    original: Option<&Matrix>,
) -> Result<SvdFactors, CompressError> {
    let (k, r) = (factors.u_prime.rows(), factors.rank);
    let n = factors.v_prime.cols();
    if b_u.rows() != k || a_u.cols() != r || b_u.cols() != a_u.rows() {
        return Err(CompressError::Shape(format!(
            "u adapter {}x{} * {}x{} does not match factor {}x{}",
            b_u.rows(),
            b_u.cols(),
            a_u.rows(),
            a_u.cols(),
            k,
            r
        )));
    }
    if b_v.rows() != r || a_v.cols() != n || b_v.cols() != a_v.rows() {
        return Err(CompressError::Shape(format!(
            "v adapter {}x{} * {}x{} does not match factor {}x{}",
            b_v.rows(),
            b_v.cols(),
            a_v.rows(),
            a_v.cols(),
            r,
            n
        )));
    }
    let du = linalg::matmul(b_u, a_u)?;
    let dv = linalg::matmul(b_v, a_v)?;
    let mut u_prime = factors.u_prime.clone();
    for i in 0..k {
        for j in 0..r {
            u_prime.set(i, j, u_prime.get(i, j) + du.get(i, j));
        }
    }
    let mut v_prime = factors.v_prime.clone();
    for i in 0..r {
        for j in 0..n {
            v_prime.set(i, j, v_prime.get(i, j) + dv.get(i, j));
        }
    }
    let reconstruction_error = match original {
        Some(w) => Some(linalg::matmul(&u_prime, &v_prime)?.frobenius_distance(w)),
        None => None,
    };
    Ok(SvdFactors {
        u_prime,
        v_prime,
        rank: factors.rank,
        block_size: factors.block_size,
        whitener: factors.whitener.clone(),
        requested_ratio: factors.requested_ratio,
        achieved_ratio: factors.achieved_ratio,
        reconstruction_error,
    })
}

/// One manifest row per compressed weight.
#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub name: String,
    pub weight_shape: [usize; 2],
    pub u_shape: [usize; 2],
    pub v_shape: [usize; 2],
    pub rank: usize,
    pub block_size: usize,
    pub requested_ratio: f64,
    pub achieved_ratio: f64,
    pub over_retained: bool,
    pub frobenius_error: f64,
    pub relative_error: f64,
    pub whitened: bool,
    pub u_file: String,
    pub v_file: String,
}

impl ManifestEntry {
    pub fn new(name: &str, w: &Matrix, f: &SvdFactors, u_file: String, v_file: String) -> Self {
        let err = f.reconstruction_error.unwrap_or(f64::NAN);
        let norm = w.frobenius_norm();
        ManifestEntry {
            name: name.to_string(),
            weight_shape: [w.rows(), w.cols()],
            u_shape: [f.u_prime.rows(), f.u_prime.cols()],
            v_shape: [f.v_prime.rows(), f.v_prime.cols()],
            rank: f.rank,
            block_size: f.block_size,
            requested_ratio: f.requested_ratio,
            achieved_ratio: f.achieved_ratio,
            over_retained: is_over_retained(f.achieved_ratio),
            frobenius_error: err,
            relative_error: if norm > 0.0 { err / norm } else { err },
            whitened: f.whitener.is_some(),
            u_file,
            v_file,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Dtype;

    #[test]
    fn whitening_identity_calibration() {
        let (s, s_inv) = activation_whitening(&Matrix::identity(4), Some(0.0)).unwrap();
        assert!(s.relative_error(&Matrix::identity(4)) < 1e-6);
        assert!(s_inv.relative_error(&Matrix::identity(4)) < 1e-6);
    }

    #[test]
    fn whitening_diagonal_gram() {
        // X = 2I -> X^T X = 4I -> S = 2I, S_inv = 0.5I.
        let mut x = Matrix::identity(4);
        for i in 0..4 {
            x.set(i, i, 2.0);
        }
        let (s, s_inv) = activation_whitening(&x, Some(0.0)).unwrap();
        for i in 0..4 {
            assert!((s.get(i, i) - 2.0).abs() < 1e-6);
            assert!((s_inv.get(i, i) - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn whitening_survives_rank_deficient_calibration() {
        // 2 samples over 6 features: gram has rank <= 2.
        let x = Matrix::random(2, 6, Dtype::F32, 8);
        let (s, s_inv) = activation_whitening(&x, None).unwrap();
        for i in 0..6 {
            assert!(s.get(i, i) > 0.0);
        }
        let prod = linalg::matmul(&s, &s_inv).unwrap();
        assert!(prod.relative_error(&Matrix::identity(6)) < 1e-4);
    }

    #[test]
    fn rank_selection_reproduces_module_table() {
        assert_eq!(block_aligned_rank(2048, 8192, 0.2, 128, 0.5).unwrap(), 1280);
        assert_eq!(block_aligned_rank(8192, 2048, 0.2, 128, 0.5).unwrap(), 1280);
        assert_eq!(block_aligned_rank(2048, 8192, 0.0, 128, 0.5).unwrap(), 1664);
    }

    #[test]
    fn rank_selection_validates_inputs() {
        assert!(block_aligned_rank(2048, 8192, 1.0, 128, 0.5).is_err());
        assert!(block_aligned_rank(2048, 8192, -0.1, 128, 0.5).is_err());
        assert!(block_aligned_rank(2048, 8192, 0.2, 100, 0.5).is_err());
        assert!(block_aligned_rank(2048, 8192, 0.2, 128, 1.0).is_err());
        assert!(matches!(
            block_aligned_rank(64, 8192, 0.2, 128, 0.5),
            Err(CompressError::RankInfeasible { .. })
        ));
    }

    #[test]
    fn rank_clamps_to_block_range() {
        // Tiny retention still yields at least one block.
        assert_eq!(block_aligned_rank(256, 256, 0.99, 128, 0.0).unwrap(), 128);
        // Full retention request cannot exceed the largest aligned rank.
        let r = block_aligned_rank(256, 100000, 0.0, 128, 0.5).unwrap();
        assert_eq!(r, 256);
    }

    #[test]
    fn compression_ratio_values() {
        assert!((compression_ratio(2048, 8192, 1280) - 0.21875).abs() < 1e-12);
        // r(k+n) == kn -> 0.
        assert!(compression_ratio(2048, 2048, 1024).abs() < 1e-12);
        assert!((compression_ratio(2048, 8192, 128) - 0.921875).abs() < 1e-12);
        assert!(is_over_retained(compression_ratio(128, 128, 128)));
    }

    #[test]
    fn rank_one_weight_compresses_losslessly() {
        let a = Matrix::random(192, 1, Dtype::F32, 1);
        let b = Matrix::random(1, 256, Dtype::F32, 2);
        let w = linalg::matmul(&a, &b).unwrap();
        let f = compress_weight(&w, None, 0.0, 128, 0.5).unwrap();
        assert!(f.rank >= 128);
        let err = f.reconstruction_error.unwrap();
        assert!(err <= 1e-4 * w.frobenius_norm());
    }

    #[test]
    fn identity_whitener_matches_plain_truncation_tail() {
        let w = Matrix::random(160, 140, Dtype::F32, 77);
        let f = compress_weight(&w, None, 0.5, 128, 0.5).unwrap();
        let na = nalgebra::DMatrix::from_row_slice(
            160,
            140,
            &w.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        );
        let mut sv: Vec<f64> = na.svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let tail: f64 = sv[f.rank..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let err = f.reconstruction_error.unwrap();
        assert!(
            (err - tail).abs() < 1e-4 * w.frobenius_norm().max(1.0),
            "err {err} tail {tail}"
        );
    }

    #[test]
    fn whitened_compression_round_trips_well_conditioned() {
        let w = Matrix::random(256, 192, Dtype::F32, 5);
        // Well-conditioned calibration: more samples than features.
        let calib = Matrix::random(512, 192, Dtype::F32, 6);
        let (s, s_inv) = activation_whitening(&calib, None).unwrap();

        // (W S) S^-1 == W.
        let ws = linalg::matmul(&w, &s).unwrap();
        let back = linalg::matmul(&ws, &s_inv).unwrap();
        assert!(back.relative_error(&w) < 1e-4);

        // Full-retention factors reconstruct the low-rank part of W exactly;
        // here W has full rank 192 and r = 128, so only check consistency
        // against the dense reconstruction of the factors themselves.
        let f = compress_weight(&w, Some((&s, &s_inv)), 0.0, 128, 0.5).unwrap();
        let dense = linalg::matmul(&f.u_prime, &f.v_prime).unwrap();
        let err = f.reconstruction_error.unwrap();
        assert!((dense.frobenius_distance(&w) - err).abs() < 1e-6 * w.frobenius_norm());
        assert_eq!(f.rank % 128, 0);
    }

    #[test]
    fn whitened_low_rank_weight_reconstructs() {
        // True rank 96 <= selected rank, so whitened compression is lossless.
        let a = Matrix::random(256, 96, Dtype::F32, 11);
        let b = Matrix::random(96, 192, Dtype::F32, 12);
        let w = linalg::matmul(&a, &b).unwrap();
        let calib = Matrix::random(512, 192, Dtype::F32, 13);
        let (s, s_inv) = activation_whitening(&calib, None).unwrap();
        let f = compress_weight(&w, Some((&s, &s_inv)), 0.0, 128, 0.5).unwrap();
        assert!(f.rank >= 96);
        assert!(f.reconstruction_error.unwrap() <= 1e-3 * w.frobenius_norm());
    }

    #[test]
    fn lora_merge_zero_adapters_is_identity() {
        let w = Matrix::random(192, 160, Dtype::F32, 21);
        let f = compress_weight(&w, None, 0.3, 128, 0.5).unwrap();
        let r = f.rank;
        let merged = lora_merge(
            &f,
            &Matrix::zeros(192, 4),
            &Matrix::zeros(4, r),
            &Matrix::zeros(r, 4),
            &Matrix::zeros(4, 160),
            Some(&w),
        )
        .unwrap();
        assert_eq!(merged.u_prime, f.u_prime);
        assert_eq!(merged.v_prime, f.v_prime);
        assert_eq!(merged.rank, f.rank);
        let (a, b) = (
            merged.reconstruction_error.unwrap(),
            f.reconstruction_error.unwrap(),
        );
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn lora_merge_matches_dense_addition() {
        let w = Matrix::random(4, 4, Dtype::F32, 31);
        // 4x4 toy with block_size forced via direct factor construction is
        // not possible (block granule is 128), so build factors by hand.
        let f = SvdFactors {
            u_prime: Matrix::random(4, 3, Dtype::F32, 1),
            v_prime: Matrix::random(3, 4, Dtype::F32, 2),
            rank: 3,
            block_size: 128,
            whitener: None,
            requested_ratio: 0.0,
            achieved_ratio: compression_ratio(4, 4, 3),
            reconstruction_error: None,
        };
        let b_u = Matrix::random(4, 1, Dtype::F32, 3);
        let a_u = Matrix::random(1, 3, Dtype::F32, 4);
        let b_v = Matrix::random(3, 1, Dtype::F32, 5);
        let a_v = Matrix::random(1, 4, Dtype::F32, 6);
        let merged = lora_merge(&f, &b_u, &a_u, &b_v, &a_v, Some(&w)).unwrap();

        let du = linalg::matmul(&b_u, &a_u).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert!(
                    (merged.u_prime.get(i, j) - (f.u_prime.get(i, j) + du.get(i, j))).abs()
                        < 1e-6
                );
            }
        }
        assert!(merged.reconstruction_error.is_some());
        assert_eq!(merged.rank, 3);
    }

    #[test]
    fn lora_merge_rejects_bad_shapes() {
        let f = SvdFactors {
            u_prime: Matrix::zeros(8, 4),
            v_prime: Matrix::zeros(4, 8),
            rank: 4,
            block_size: 128,
            whitener: None,
            requested_ratio: 0.0,
            achieved_ratio: 0.0,
            reconstruction_error: None,
        };
        assert!(lora_merge(
            &f,
            &Matrix::zeros(8, 2),
            &Matrix::zeros(2, 5),
            &Matrix::zeros(4, 2),
            &Matrix::zeros(2, 8),
            None,
        )
        .is_err());
    }

    #[test]
    fn achieved_ratio_lands_within_one_block_granule() {
        for &(k, n) in &[(512usize, 768usize), (2048, 8192), (1024, 1024), (640, 2560)] {
            for &ratio in &[0.1, 0.2, 0.5, 0.8] {
                let r = block_aligned_rank(k, n, ratio, 128, 0.5).unwrap();
                let achieved = compression_ratio(k, n, r);
                let granule = 128.0 * (k + n) as f64 / (k as f64 * n as f64);
                // Within one block granule unless the clamp engaged.
                let hi = (k.min(n) / 128) * 128;
                if r > 128 && r < hi {
                    assert!(
                        (achieved - ratio).abs() < granule,
                        "k={k} n={n} ratio={ratio} r={r} achieved={achieved}"
                    );
                }
            }
        }
    }
}
