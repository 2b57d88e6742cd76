//! NMM1 binary matrix files.
//!
//! Layout, all little-endian:
//!   magic `4E 4D 4D 31` ("NMM1"), u32 rows, u32 cols,
//!   u8 dtype (0 = f32, 1 = bf16-emulated), then the row-major payload as
//!   one f32 per element for both dtypes. bf16 files must contain only
//!   bf16-representable values; this is validated on load.

use crate::bf16;
use crate::error::TensorError;
use crate::matrix::{Dtype, Matrix};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"NMM1";

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<(), TensorError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    w.write_all(&[m.dtype().tag()])?;
    for &v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix, TensorError> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| TensorError::BadFile("file shorter than header".into()))?;
    if magic != MAGIC {
        return Err(TensorError::BadFile(format!(
            "bad magic {:02X?}, expected {:02X?}",
            magic, MAGIC
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| TensorError::BadFile("truncated header".into()))?;
    let rows = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)
        .map_err(|_| TensorError::BadFile("truncated header".into()))?;
    let cols = u32::from_le_bytes(u32buf) as usize;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)
        .map_err(|_| TensorError::BadFile("truncated header".into()))?;
    let dtype = Dtype::from_tag(tag[0])
        .ok_or_else(|| TensorError::BadFile(format!("unknown dtype tag {}", tag[0])))?;

    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| TensorError::BadFile("dimension overflow".into()))?;
    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload)
        .map_err(|_| TensorError::BadFile("truncated payload".into()))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TensorError::BadFile("trailing bytes after payload".into()));
    }

    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    if dtype == Dtype::Bf16 {
        for (i, &v) in data.iter().enumerate() {
            if !bf16::is_representable(v) {
                return Err(TensorError::NotBf16Representable { index: i, value: v });
            }
        }
    }
    Matrix::from_vec(rows, cols, data)?.with_dtype(dtype)
}
