//! Dense row-major `f32` matrices and the raw tensor file format.
//!
//! A raw tensor is a little-endian `f32` row-major blob plus a JSON sidecar at
//! `<path>.json` carrying the shape.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{CcqError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(CcqError::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// i.i.d. N(0, 1) entries from a ChaCha8 stream seeded with `seed`.
    pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self { rows, cols, data }
    }

    /// i.i.d. U(-1, 1) entries.
    pub fn uniform(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0f32, 1.0).expect("valid range");
        let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Dense `y = W x` with `f64` accumulation.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(CcqError::Shape(format!(
                "vector of length {} against {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x)
                    .map(|(&w, &v)| w as f64 * v as f64)
                    .sum::<f64>() as f32
            })
            .collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 2],
    dtype: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `path` (raw little-endian `f32`) and `<path>.json`.
pub fn write_raw(path: &Path, m: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = Sidecar {
        shape: [m.rows(), m.cols()],
        dtype: "f32".into(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Matrix> {
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if sidecar.dtype != "f32" {
        return Err(CcqError::format(0, format!("unsupported dtype {}", sidecar.dtype)));
    }
    let bytes = fs::read(path)?;
    let [rows, cols] = sidecar.shape;
    let expected = rows.saturating_mul(cols).saturating_mul(4);
    if bytes.len() != expected {
        return Err(CcqError::format(
            bytes.len().min(expected) as u64,
            format!("{rows}x{cols} f32 tensor needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_is_deterministic() {
        assert_eq!(Matrix::gaussian(4, 8, 7), Matrix::gaussian(4, 8, 7));
        assert_ne!(Matrix::gaussian(4, 8, 7), Matrix::gaussian(4, 8, 8));
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.f32");
        let m = Matrix::gaussian(3, 5, 1);
        write_raw(&p, &m).unwrap();
        assert_eq!(read_raw(&p).unwrap(), m);
    }

    #[test]
    fn truncated_raw_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.f32");
        write_raw(&p, &Matrix::gaussian(3, 5, 1)).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_raw(&p), Err(CcqError::Format { .. })));
    }

    #[test]
    fn shape_mismatch() {
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::identity(3).matvec(&[1.0, 2.0]).is_err());
    }
}
