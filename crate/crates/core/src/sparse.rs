//! Sparse matrices as coordinate triplets sorted by (row, col).
//!
//! The sort order is part of the format: reruns must produce bit-identical
//! dumps, and backward accumulation iterates triplets in this fixed order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix<T> {
    nrows: usize,
    ncols: usize,
    /// (row, col, value), strictly sorted by (row, col).
    triplets: Vec<(usize, usize, T)>,
    #[serde(skip)]
    row_starts: Vec<usize>,
}

impl<T: Real> SparseMatrix<T> {
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut triplets: Vec<(usize, usize, T)>,
    ) -> Result<Self> {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::Validation(format!(
                    "duplicate sparse entry at ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        if let Some(&(r, c, _)) = triplets.last() {
            let max_r = triplets.iter().map(|t| t.0).max().unwrap_or(r);
            let max_c = triplets.iter().map(|t| t.1).max().unwrap_or(c);
            if max_r >= nrows || max_c >= ncols {
                return Err(Error::Validation(format!(
                    "sparse entry out of bounds for {}x{}",
                    nrows, ncols
                )));
            }
        }
        let mut m = SparseMatrix {
            nrows,
            ncols,
            triplets,
            row_starts: Vec::new(),
        };
        m.rebuild_index();
        Ok(m)
    }

    pub fn empty(nrows: usize, ncols: usize) -> Self {
        SparseMatrix {
            nrows,
            ncols,
            triplets: Vec::new(),
            row_starts: vec![0; nrows + 1],
        }
    }

    pub(crate) fn rebuild_index(&mut self) {
        let mut starts = vec![0usize; self.nrows + 1];
        for &(r, _, _) in &self.triplets {
            starts[r + 1] += 1;
        }
        for i in 0..self.nrows {
            starts[i + 1] += starts[i];
        }
        self.row_starts = starts;
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.triplets.len()
    }

    pub fn triplets(&self) -> &[(usize, usize, T)] {
        &self.triplets
    }

    pub fn row(&self, i: usize) -> &[(usize, usize, T)] {
        &self.triplets[self.row_starts[i]..self.row_starts[i + 1]]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.row(i)
            .binary_search_by(|&(_, c, _)| c.cmp(&j))
            .map(|k| self.row(i)[k].2)
            .unwrap_or_else(|_| T::zero())
    }

    /// `out = self @ x` where `x` is row-major `ncols x d`.
    pub fn matmul_dense(&self, x: &[T], d: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), self.ncols * d);
        let mut out = vec![T::zero(); self.nrows * d];
        for &(r, c, v) in &self.triplets {
            let src = &x[c * d..(c + 1) * d];
            let dst = &mut out[r * d..(r + 1) * d];
            for (o, &s) in dst.iter_mut().zip(src.iter()) {
                *o += v * s;
            }
        }
        out
    }

    /// `out = self^T @ x` where `x` is row-major `nrows x d`.
    pub fn matmul_dense_transposed(&self, x: &[T], d: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), self.nrows * d);
        let mut out = vec![T::zero(); self.ncols * d];
        for &(r, c, v) in &self.triplets {
            let src = &x[r * d..(r + 1) * d];
            let dst = &mut out[c * d..(c + 1) * d];
            for (o, &s) in dst.iter_mut().zip(src.iter()) {
                *o += v * s;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.nrows * self.ncols];
        for &(r, c, v) in &self.triplets {
            out[r * self.ncols + c] = v;
        }
        out
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.triplets
            .iter()
            .all(|&(r, c, v)| (self.get(c, r) - v).abs() <= tol)
    }

    /// Little-endian binary dump: u64 row, u64 col, f64 value per triplet.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.triplets.len() * 24);
        for &(r, c, v) in &self.triplets {
            buf.extend_from_slice(&(r as u64).to_le_bytes());
            buf.extend_from_slice(&(c as u64).to_le_bytes());
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Restore the row index after deserialization (serde skips it).
impl<T: Real> SparseMatrix<T> {
    pub fn ensure_indexed(&mut self) {
        if self.row_starts.len() != self.nrows + 1 {
            self.rebuild_index();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_get() {
        let m = SparseMatrix::from_triplets(3, 3, vec![(0, 1, 2.0), (1, 0, 2.0), (2, 2, 5.0)])
            .unwrap();
        assert_eq!(m.row(0), &[(0, 1, 2.0)]);
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.nnz(), 3);
    }

    #[test]
    fn sparse_dense_product() {
        // [[0 1] [2 0]] @ [[1 2] [3 4]] = [[3 4] [2 4]]
        let m = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 2.0)]).unwrap();
        let x = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(m.matmul_dense(&x, 2), vec![3.0, 4.0, 2.0, 4.0]);
        // transpose: [[0 2] [1 0]] @ x = [[6 8] [1 2]]
        assert_eq!(m.matmul_dense_transposed(&x, 2), vec![6.0, 8.0, 1.0, 2.0]);
    }

    #[test]
    fn duplicate_entry_rejected() {
        let r = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.0)]);
        assert!(r.is_err());
    }
}
