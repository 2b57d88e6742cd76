//! Dense row-major matrices with an f32 or emulated-bf16 logical dtype.
//!
//! Storage is always `f32`; a bf16 matrix holds only bf16-representable
//! values. All arithmetic accumulates in f32 regardless of dtype.

use crate::bf16;
use crate::error::TensorError;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Logical element type of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    Bf16,
}

impl Dtype {
    /// Storage/transfer width in bytes (the `s` of the traffic models).
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::Bf16 => 2,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::Bf16 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::Bf16),
            _ => None,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::Bf16 => write!(f, "bf16"),
        }
    }
}

/// Dense 2-D matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    dtype: Dtype,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            dtype: Dtype::F32,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadDataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Matrix {
            rows,
            cols,
            dtype: Dtype::F32,
            data,
        })
    }

    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            dtype: Dtype::F32,
            data,
        }
    }

    /// Seeded uniform(-1, 1) matrix; bf16 requests are rounded onto the grid.
    pub fn random(rows: usize, cols: usize, dtype: Dtype, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v: f32 = rng.random_range(-1.0..1.0);
            data.push(match dtype {
                Dtype::F32 => v,
                Dtype::Bf16 => bf16::round(v),
            });
        }
        Matrix {
            rows,
            cols,
            dtype,
            data,
        }
    }

    /// Reinterpret as bf16, rounding every element onto the bf16 grid.
    /// Returns the number of elements that overflowed to infinity.
    pub fn to_bf16(&self) -> (Matrix, usize) {
        let mut overflows = 0;
        let data = self
            .data
            .iter()
            .map(|&v| {
                let (r, o) = bf16::round_flagged(v);
                overflows += o as usize;
                r
            })
            .collect();
        (
            Matrix {
                rows: self.rows,
                cols: self.cols,
                dtype: Dtype::Bf16,
                data,
            },
            overflows,
        )
    }

    /// Tag an existing matrix as bf16; every element must already sit on the
    /// bf16 grid.
    pub fn with_dtype(mut self, dtype: Dtype) -> Result<Self, TensorError> {
        if dtype == Dtype::Bf16 {
            for (i, &v) in self.data.iter().enumerate() {
                if !bf16::is_representable(v) {
                    return Err(TensorError::NotBf16Representable { index: i, value: v });
                }
            }
        }
        self.dtype = dtype;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Frobenius norm of `self - other`.
    pub fn frobenius_distance(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `||self - other||_F / ||other||_F`, with an absolute fallback when
    /// `other` is zero.
    pub fn relative_error(&self, other: &Matrix) -> f64 {
        let denom = other.frobenius_norm();
        let dist = self.frobenius_distance(other);
        if denom == 0.0 {
            dist
        } else {
            dist / denom
        }
    }
}
