//! Minimal CSR matrix used for the fine→coarse downsample operator.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Compressed sparse row matrix with `f64` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from per-row `(column, value)` lists.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in rows {
            for &(c, v) in r {
                assert!(c < cols, "column index out of range");
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// `self (r×c) · dense (c×n) -> r×n`
    pub fn apply(&self, dense: &Array2<f64>) -> Array2<f64> {
        assert_eq!(dense.nrows(), self.cols, "sparse apply shape mismatch");
        let n = dense.ncols();
        let mut out = Array2::zeros((self.rows, n));
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let v = self.values[k];
                for j in 0..n {
                    out[[r, j]] += v * dense[[c, j]];
                }
            }
        }
        out
    }

    /// `selfᵀ (c×r) · dense (r×n) -> c×n`
    pub fn apply_transpose(&self, dense: &Array2<f64>) -> Array2<f64> {
        assert_eq!(dense.nrows(), self.rows, "sparse applyᵀ shape mismatch");
        let n = dense.ncols();
        let mut out = Array2::zeros((self.cols, n));
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let v = self.values[k];
                for j in 0..n {
                    out[[c, j]] += v * dense[[r, j]];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[[r, self.col_idx[k]]] = self.values[k];
            }
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.values[self.row_ptr[r]..self.row_ptr[r + 1]].iter().sum())
            .collect()
    }
}
