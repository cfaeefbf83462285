//! Dense row-major embedding matrices and the EMB1 on-disk format.
//!
//! EMB1 layout (little-endian throughout, no padding, no footer):
//!
//! | offset | size          | field                        |
//! |--------|---------------|------------------------------|
//! | 0      | 4             | magic `b"PSCB"`              |
//! | 4      | 4             | `u32` version, always 1      |
//! | 8      | 4             | `u32` rows                   |
//! | 12     | 4             | `u32` cols                   |
//! | 16     | 4·rows·cols   | `f32` payload, row-major     |

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PSCB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Tolerance on row norms for a matrix flagged as normalized.
pub const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::DimensionMismatch(format!(
                "embedding matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: pos / cols,
                col: pos % cols,
                offset: HEADER_LEN + 4 * pos,
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols)
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::DimensionMismatch(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut out = Self::new(indices.len(), self.cols, data)?;
        out.normalized = self.normalized;
        Ok(out)
    }

    /// Scale every row to unit L2 norm. The result is flagged normalized.
    pub fn normalize_rows(&self) -> Result<Self> {
        let mut data = self.data.clone();
        for (row, chunk) in data.chunks_exact_mut(self.cols).enumerate() {
            let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroRow { row });
            }
            for v in chunk.iter_mut() {
                *v /= norm;
            }
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
            normalized: true,
        })
    }

    /// Encode as EMB1. Values are narrowed to `f32`.
    pub fn to_emb1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_emb1_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                offset: 0,
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let word = |offset: usize| {
            u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
        };
        let version = word(4);
        if version != VERSION {
            return Err(Error::UnsupportedVersion { offset: 4, version });
        }
        let rows = word(8) as usize;
        let cols = word(12) as usize;
        if rows == 0 {
            return Err(Error::ZeroDimension {
                offset: 8,
                which: "rows",
            });
        }
        if cols == 0 {
            return Err(Error::ZeroDimension {
                offset: 12,
                which: "cols",
            });
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::DimensionMismatch(format!("{rows}x{cols} overflows")))?;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::TrailingBytes { offset: expected });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (pos, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: pos / cols,
                    col: pos % cols,
                    offset: HEADER_LEN + 4 * pos,
                });
            }
            data.push(f64::from(v));
        }
        Ok(Self {
            rows,
            cols,
            data,
            normalized: false,
        })
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_emb1_bytes(&bytes)
}

pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, matrix.to_emb1_bytes()).map_err(|e| Error::io(path, e))
}

pub fn normalize_rows(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    matrix.normalize_rows()
}
