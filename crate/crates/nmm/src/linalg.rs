//! Dense reference numerics: exact matmul, element-wise ops, Cholesky,
//! and a one-sided Jacobi truncated SVD. These are the ground truth the
//! simulated kernels are checked against, and the math behind the
//! compression pipeline.

use crate::error::TensorError;
use crate::matrix::Matrix;
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

/// Exact dense product in f32 accumulation. Deterministic: every output
/// element is a row-major accumulation independent of threading.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.cols() != b.rows() {
        return Err(TensorError::DimMismatch {
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f32; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let aip = a.data()[i * k + p];
            let brow = &b.data()[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    });
    Matrix::from_vec(m, n, out)
}

pub fn transpose(a: &Matrix) -> Matrix {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Matrix::zeros(n, m);
    for i in 0..m {
        for j in 0..n {
            out.set(j, i, a.get(i, j));
        }
    }
    out.with_dtype(a.dtype()).expect("values unchanged")
}

/// Element-wise `x * sigmoid(x)`.
pub fn silu(a: &Matrix) -> Matrix {
    let data = a.data().iter().map(|&x| silu_scalar(x)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape preserved")
}

pub fn silu_scalar(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Element-wise product; shapes must match.
pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(TensorError::DimMismatch {
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

/// Lower-triangular Cholesky factor of `a + jitter * I`.
///
/// `a` must be symmetric; the factorization runs in f64 and fails with the
/// offending pivot index if a pivot is not strictly positive even after the
/// jitter.
pub fn cholesky(a: &Matrix, jitter: f64) -> Result<Matrix, TensorError> {
    if a.rows() != a.cols() {
        return Err(TensorError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if jitter < 0.0 {
        return Err(TensorError::NegativeJitter(jitter));
    }
    let n = a.rows();
    let scale = a
        .data()
        .iter()
        .fold(0.0f64, |acc, &v| acc.max((v as f64).abs()));
    let mut max_asym = 0.0f64;
    let mut where_asym = (0, 0);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (a.get(i, j) as f64 - a.get(j, i) as f64).abs();
            if d > max_asym {
                max_asym = d;
                where_asym = (i, j);
            }
        }
    }
    if max_asym > 1e-6 * scale.max(1.0) {
        return Err(TensorError::NotSymmetric {
            row: where_asym.0,
            col: where_asym.1,
            max_asym,
        });
    }

    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j) as f64;
            if i == j {
                sum += jitter;
            }
            for p in 0..j {
                sum -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(TensorError::CholeskyFailed {
                        pivot: i,
                        value: sum,
                        jitter,
                    });
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Matrix::from_vec(n, n, l.into_iter().map(|v| v as f32).collect())
}

/// Inverse of a lower-triangular matrix by forward substitution (f64).
pub fn lower_triangular_inverse(l: &Matrix) -> Result<Matrix, TensorError> {
    if l.rows() != l.cols() {
        return Err(TensorError::NotSquare {
            rows: l.rows(),
            cols: l.cols(),
        });
    }
    let n = l.rows();
    let mut inv = vec![0.0f64; n * n];
    for col in 0..n {
        for i in col..n {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for p in col..i {
                sum -= l.get(i, p) as f64 * inv[p * n + col];
            }
            let diag = l.get(i, i) as f64;
            if diag == 0.0 {
                return Err(TensorError::CholeskyFailed {
                    pivot: i,
                    value: 0.0,
                    jitter: 0.0,
                });
            }
            inv[i * n + col] = sum / diag;
        }
    }
    Matrix::from_vec(n, n, inv.into_iter().map(|v| v as f32).collect())
}

/// Truncated SVD: returns `(U_r, sigma_r, V_r)` with `a ~ U_r diag(sigma) V_r^T`.
///
/// Singular values are non-negative and non-increasing; `U_r`/`V_r` columns
/// are orthonormal (columns belonging to vanishing singular values are
/// zero-filled). Implemented as one-sided Jacobi rotations to convergence
/// (relative off-diagonal Gram threshold 1e-12), preceded by a Householder
/// QR step for strongly rectangular inputs so the rotations run on the small
/// square factor.
pub fn truncated_svd(
    a: &Matrix,
    rank: usize,
) -> Result<(Matrix, Vec<f32>, Matrix), TensorError> {
    let (m, n) = (a.rows(), a.cols());
    let min_dim = m.min(n);
    if rank == 0 || rank > min_dim {
        return Err(TensorError::RankOutOfRange {
            rank,
            rows: m,
            cols: n,
        });
    }
    if m >= n {
        let (u, s, v) = svd_tall(a, rank);
        Ok((u, s, v))
    } else {
        // A = U S V^T  <=>  A^T = V S U^T
        let (v, s, u) = svd_tall(&transpose(a), rank);
        Ok((u, s, v))
    }
}

const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

/// Four-lane unrolled dot product; the split accumulators let the compiler
/// vectorize what a strict sequential sum cannot.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// SVD of a tall (m >= n) matrix, truncated to `rank` columns.
fn svd_tall(a: &Matrix, rank: usize) -> (Matrix, Vec<f32>, Matrix) {
    let (m, n) = (a.rows(), a.cols());

    // Column-major f64 working copy.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j) as f64).collect())
        .collect();

    // Strongly rectangular inputs: factor A = QR and rotate R instead.
    let qr = if m * 4 >= n * 5 {
        let reflectors = householder_qr(&mut cols, m, n);
        cols.iter_mut().for_each(|c| c.truncate(n));
        Some(reflectors)
    } else {
        None
    };

    // The pre-rotation factor B0: right singular vectors are recovered
    // afterwards as V = B0^T U / sigma, which avoids carrying V through
    // every rotation.
    let b0 = cols.clone();
    let rows_now = cols[0].len();
    let b_cols = jacobi_orthogonalize(cols, n);

    // Singular values from column norms, sorted descending (stable).
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = b_cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let sigma: Vec<f32> = order[..rank].iter().map(|&i| norms[i] as f32).collect();
    let sigma_max = norms[order[0]];

    // Left vectors: normalized columns (zero-filled when the singular value
    // vanishes), mapped back through Q when QR preconditioning was applied.
    let kept: Vec<(usize, f64)> = order[..rank].iter().map(|&i| (i, norms[i])).collect();
    let u_cols: Vec<Vec<f64>> = kept
        .iter()
        .map(|&(i, norm)| {
            if norm > sigma_max * 1e-30 && norm > 0.0 {
                b_cols[i].iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; rows_now]
            }
        })
        .collect();

    let mut v = Matrix::zeros(n, rank);
    {
        let v_cols: Vec<Vec<f64>> = u_cols
            .par_iter()
            .zip(&kept)
            .map(|(u_col, &(_, norm))| {
                if norm > sigma_max * 1e-30 && norm > 0.0 {
                    b0.iter().map(|b0_col| dot(b0_col, u_col) / norm).collect()
                } else {
                    vec![0.0; n]
                }
            })
            .collect();
        for (j, col) in v_cols.iter().enumerate() {
            for (i, &val) in col.iter().enumerate() {
                v.set(i, j, val as f32);
            }
        }
    }

    let u_cols = match qr {
        Some(reflectors) => apply_q(&reflectors, u_cols, m),
        None => u_cols,
    };
    let mut u = Matrix::zeros(m, rank);
    for (j, col) in u_cols.iter().enumerate() {
        for (i, &val) in col.iter().enumerate() {
            u.set(i, j, val as f32);
        }
    }
    (u, sigma, v)
}

struct JacobiColumn {
    b: Vec<f64>,
    norm_sq: f64,
}

/// One-sided Jacobi: rotate column pairs of `b` until all off-diagonal Gram
/// entries fall below the relative threshold. Pairs within a round-robin
/// round touch disjoint columns, so rounds parallelize deterministically.
fn jacobi_orthogonalize(cols: Vec<Vec<f64>>, n: usize) -> Vec<Vec<f64>> {
    let columns: Vec<Mutex<JacobiColumn>> = cols
        .into_iter()
        .map(|b| {
            let norm_sq = b.iter().map(|v| v * v).sum();
            Mutex::new(JacobiColumn { b, norm_sq })
        })
        .collect();

    let rounds = round_robin_rounds(n);
    for _sweep in 0..MAX_SWEEPS {
        // Refresh cached norms once per sweep to shed rotation-update drift.
        for c in &columns {
            let mut c = c.lock().unwrap();
            c.norm_sq = c.b.iter().map(|v| v * v).sum();
        }
        let rotated = AtomicBool::new(false);
        for round in &rounds {
            round.par_iter().for_each(|&(p, q)| {
                let mut cp = columns[p].lock().unwrap();
                let mut cq = columns[q].lock().unwrap();
                let gamma = dot(&cp.b, &cq.b);
                let alpha = cp.norm_sq;
                let beta = cq.norm_sq;
                if alpha == 0.0 || beta == 0.0 {
                    return;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    return;
                }
                rotated.store(true, Ordering::Relaxed);
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in cp.b.iter_mut().zip(cq.b.iter_mut()) {
                    let xv = *x;
                    *x = c * xv - s * *y;
                    *y = s * xv + c * *y;
                }
                cp.norm_sq = c * c * alpha - 2.0 * c * s * gamma + s * s * beta;
                cq.norm_sq = s * s * alpha + 2.0 * c * s * gamma + c * c * beta;
            });
        }
        if !rotated.load(Ordering::Relaxed) {
            break;
        }
    }

    columns
        .into_iter()
        .map(|c| c.into_inner().unwrap().b)
        .collect()
}

/// Round-robin tournament schedule: n-1 rounds of disjoint index pairs
/// covering every (p, q) pair exactly once.
fn round_robin_rounds(n: usize) -> Vec<Vec<(usize, usize)>> {
    if n < 2 {
        return Vec::new();
    }
    let slots = if n % 2 == 0 { n } else { n + 1 };
    let mut rounds = Vec::with_capacity(slots - 1);
    for r in 0..slots - 1 {
        let mut pairs = Vec::with_capacity(slots / 2);
        let pick = |i: usize| -> usize {
            if i == 0 {
                slots - 1
            } else {
                (r + i - 1) % (slots - 1)
            }
        };
        for i in 0..slots / 2 {
            let a = pick(i);
            let b = pick(slots - 1 - i);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if hi < n {
                pairs.push((lo, hi));
            }
        }
        rounds.push(pairs);
    }
    rounds
}

/// In-place Householder QR of the m x n column set (m >= n). On return the
/// top n rows of `cols` hold R; the reflector vectors (with implicit unit
/// leading entry) are returned for later Q application.
fn householder_qr(cols: &mut [Vec<f64>], m: usize, n: usize) -> Vec<Vec<f64>> {
    let mut reflectors = Vec::with_capacity(n);
    for k in 0..n {
        let norm_sq: f64 = cols[k][k..m].iter().map(|v| v * v).sum();
        let norm = norm_sq.sqrt();
        let mut v = vec![0.0; m - k];
        if norm > 0.0 {
            let alpha = if cols[k][k] >= 0.0 { -norm } else { norm };
            v[0] = cols[k][k] - alpha;
            v[1..].copy_from_slice(&cols[k][k + 1..m]);
            let vnorm_sq: f64 = v.iter().map(|x| x * x).sum();
            if vnorm_sq > 0.0 {
                let scale = (2.0 / vnorm_sq).sqrt();
                for x in &mut v {
                    *x *= scale;
                }
                // Apply I - v v^T to the trailing columns.
                cols[k..n].par_iter_mut().for_each(|col| {
                    let proj = dot(&v, &col[k..m]);
                    for (vi, ci) in v.iter().zip(col[k..m].iter_mut()) {
                        *ci -= vi * proj;
                    }
                });
            }
        }
        reflectors.push(v);
        // Clear the annihilated subdiagonal explicitly.
        for i in k + 1..m {
            cols[k][i] = 0.0;
        }
    }
    reflectors
}

/// Apply Q (from stored reflectors) to n-row columns, producing m-row columns.
fn apply_q(reflectors: &[Vec<f64>], cols: Vec<Vec<f64>>, m: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = cols
        .into_iter()
        .map(|c| {
            let mut full = vec![0.0; m];
            full[..c.len()].copy_from_slice(&c);
            full
        })
        .collect();
    out.par_iter_mut().for_each(|col| {
        for (k, v) in reflectors.iter().enumerate().rev() {
            let proj = dot(v, &col[k..m]);
            for (vi, ci) in v.iter().zip(col[k..m].iter_mut()) {
                *ci -= vi * proj;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Dtype;

    /// Independently coded accumulation order (j-inner dot products).
    fn matmul_permuted(a: &Matrix, b: &Matrix) -> Matrix {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Matrix::zeros(m, n);
        for j in 0..n {
            for i in 0..m {
                let mut acc = 0.0f32;
                for p in (0..k).rev() {
                    acc += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let b = Matrix::random(3, 5, Dtype::F32, 7);
        let out = matmul(&Matrix::identity(3), &b).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_hand_checked_2x2() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_matches_permuted_loop_oracle() {
        let a = Matrix::random(8, 8, Dtype::F32, 11);
        let b = Matrix::random(8, 8, Dtype::F32, 12);
        let fast = matmul(&a, &b).unwrap();
        let oracle = matmul_permuted(&a, &b);
        assert!(fast.relative_error(&oracle) < 1e-6);
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        assert!(matches!(
            matmul(&a, &b),
            Err(TensorError::DimMismatch { .. })
        ));
    }

    #[test]
    fn matmul_chains_associate_in_value() {
        for seed in 0..5 {
            let x = Matrix::random(16, 24, Dtype::F32, seed);
            let u = Matrix::random(24, 12, Dtype::F32, seed + 100);
            let v = Matrix::random(12, 20, Dtype::F32, seed + 200);
            let left = matmul(&matmul(&x, &u).unwrap(), &v).unwrap();
            let right = matmul(&x, &matmul(&u, &v).unwrap()).unwrap();
            assert!(left.relative_error(&right) < 1e-4);
        }
    }

    #[test]
    fn transpose_shapes_and_involution() {
        let single = Matrix::from_rows(&[&[3.5]]);
        assert_eq!(transpose(&single), single);

        let row = Matrix::from_rows(&[&[1.0, 2.0, 3.0]]);
        let col = transpose(&row);
        assert_eq!((col.rows(), col.cols()), (3, 1));
        assert_eq!(col.data(), &[1.0, 2.0, 3.0]);

        let a = Matrix::random(5, 9, Dtype::F32, 3);
        assert_eq!(transpose(&transpose(&a)), a);
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(20.0) - 20.0).abs() < 1e-6);
        assert!((silu_scalar(1.0) - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn hadamard_units_and_values() {
        let a = Matrix::random(3, 4, Dtype::F32, 5);
        let ones = Matrix::from_vec(3, 4, vec![1.0; 12]).unwrap();
        let zeros = Matrix::zeros(3, 4);
        assert_eq!(hadamard(&a, &ones).unwrap(), a);
        assert_eq!(hadamard(&a, &zeros).unwrap(), zeros);

        let x = Matrix::from_rows(&[&[2.0, 3.0]]);
        let y = Matrix::from_rows(&[&[4.0, 5.0]]);
        assert_eq!(hadamard(&x, &y).unwrap().data(), &[8.0, 15.0]);

        assert!(hadamard(&a, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn cholesky_identity_and_hand_case() {
        let eye = Matrix::identity(4);
        assert_eq!(cholesky(&eye, 0.0).unwrap(), eye);

        let a = Matrix::from_rows(&[&[4.0, 2.0], &[2.0, 5.0]]);
        let l = cholesky(&a, 0.0).unwrap();
        assert_eq!(l.data(), &[2.0, 0.0, 1.0, 2.0]);
        let rec = matmul(&l, &transpose(&l)).unwrap();
        assert!(rec.relative_error(&a) < 1e-5);
    }

    #[test]
    fn cholesky_rejects_asymmetry_and_negative_jitter() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(
            cholesky(&a, 0.0),
            Err(TensorError::NotSymmetric { .. })
        ));
        let eye = Matrix::identity(2);
        assert!(matches!(
            cholesky(&eye, -1.0),
            Err(TensorError::NegativeJitter(_))
        ));
    }

    #[test]
    fn cholesky_jitter_rescues_rank_deficient_gram() {
        // Gram of a rank-1 calibration set.
        let x = Matrix::from_rows(&[&[1.0, 2.0, 3.0]]);
        let gram = matmul(&transpose(&x), &x).unwrap();
        assert!(matches!(
            cholesky(&gram, 0.0),
            Err(TensorError::CholeskyFailed { .. })
        ));
        let l = cholesky(&gram, 1e-6).unwrap();
        for i in 0..3 {
            assert!(l.get(i, i) > 0.0);
        }
        let mut target = gram.clone();
        for i in 0..3 {
            target.set(i, i, target.get(i, i) + 1e-6);
        }
        let rec = matmul(&l, &transpose(&l)).unwrap();
        assert!(rec.relative_error(&target) < 1e-5);
    }

    #[test]
    fn triangular_inverse_round_trips() {
        let a = Matrix::from_rows(&[&[2.0, 0.0, 0.0], &[1.0, 3.0, 0.0], &[-2.0, 0.5, 1.5]]);
        let inv = lower_triangular_inverse(&a).unwrap();
        let prod = matmul(&a, &inv).unwrap();
        assert!(prod.relative_error(&Matrix::identity(3)) < 1e-5);
    }

    fn reconstruct(u: &Matrix, sigma: &[f32], v: &Matrix) -> Matrix {
        let r = sigma.len();
        let mut us = u.clone();
        for j in 0..r {
            for i in 0..u.rows() {
                us.set(i, j, u.get(i, j) * sigma[j]);
            }
        }
        matmul(&us, &transpose(v)).unwrap()
    }

    #[test]
    fn svd_diagonal_case() {
        let a = Matrix::from_rows(&[&[3.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 1.0]]);
        let (u, sigma, v) = truncated_svd(&a, 2).unwrap();
        assert_eq!(sigma, vec![3.0, 2.0]);
        let rec = reconstruct(&u, &sigma, &v);
        let expected =
            Matrix::from_rows(&[&[3.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 0.0]]);
        assert!(rec.relative_error(&expected) < 1e-5);
        assert!((rec.frobenius_distance(&a) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn svd_full_rank_is_lossless() {
        for &(m, n) in &[(6usize, 6usize), (9, 5), (5, 9)] {
            let a = Matrix::random(m, n, Dtype::F32, (m * 31 + n) as u64);
            let (u, sigma, v) = truncated_svd(&a, m.min(n)).unwrap();
            let rec = reconstruct(&u, &sigma, &v);
            assert!(rec.relative_error(&a) < 1e-5, "{}x{}", m, n);
        }
    }

    #[test]
    fn svd_columns_orthonormal_and_sigma_sorted() {
        let a = Matrix::random(16, 10, Dtype::F32, 99);
        let (u, sigma, v) = truncated_svd(&a, 7).unwrap();
        for w in sigma.windows(2) {
            assert!(w[0] >= w[1]);
            assert!(w[1] >= 0.0);
        }
        for mat in [&u, &v] {
            let gram = matmul(&transpose(mat), mat).unwrap();
            assert!(gram.relative_error(&Matrix::identity(7)) < 1e-5);
        }
    }

    #[test]
    fn svd_error_matches_tail_oracle() {
        // Independent route: singular values from nalgebra's full SVD.
        let a = Matrix::random(8, 6, Dtype::F32, 4242);
        let na = nalgebra::DMatrix::from_row_slice(
            8,
            6,
            &a.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        );
        let mut full: Vec<f64> = na.svd(false, false).singular_values.iter().copied().collect();
        full.sort_by(|x, y| y.partial_cmp(x).unwrap());

        let (u, sigma, v) = truncated_svd(&a, 3).unwrap();
        let err = reconstruct(&u, &sigma, &v).frobenius_distance(&a);
        let tail: f64 = full[3..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((err - tail).abs() < 1e-4, "err {} tail {}", err, tail);
    }

    #[test]
    fn svd_error_monotone_in_rank() {
        let a = Matrix::random(10, 8, Dtype::F32, 17);
        let mut last = f64::INFINITY;
        for r in 1..=8 {
            let (u, sigma, v) = truncated_svd(&a, r).unwrap();
            let err = reconstruct(&u, &sigma, &v).frobenius_distance(&a);
            assert!(err <= last + 1e-9);
            last = err;
        }
    }

    #[test]
    fn svd_rejects_bad_rank() {
        let a = Matrix::zeros(4, 5);
        assert!(matches!(
            truncated_svd(&a, 0),
            Err(TensorError::RankOutOfRange { .. })
        ));
        assert!(matches!(
            truncated_svd(&a, 5),
            Err(TensorError::RankOutOfRange { .. })
        ));
    }

    #[test]
    fn svd_qr_path_matches_direct_path() {
        // 40x8 takes the QR-preconditioned path; verify against reconstruction.
        let a = Matrix::random(40, 8, Dtype::F32, 5);
        let (u, sigma, v) = truncated_svd(&a, 8).unwrap();
        let rec = reconstruct(&u, &sigma, &v);
        assert!(rec.relative_error(&a) < 1e-5);
        let gram = matmul(&transpose(&u), &u).unwrap();
        assert!(gram.relative_error(&Matrix::identity(8)) < 1e-5);
    }
}
