//! Compressed-row sparse matrices with sorted column indices.

use std::sync::Arc;

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Sparsity structure shared by matrices with identical non-zero layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrPattern {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl CsrPattern {
    /// Builds a pattern from `(row, col)` coordinates. Duplicates are merged
    /// and columns sorted within each row.
    pub fn from_coords(n_rows: usize, n_cols: usize, coords: &[(usize, usize)]) -> Self {
        let mut sorted = coords.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut row_ptr = vec![0usize; n_rows + 1];
        for &(r, _) in &sorted {
            row_ptr[r + 1] += 1;
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let col_idx = sorted.iter().map(|&(_, c)| c).collect();
        Self { n_rows, n_cols, row_ptr, col_idx }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    /// Column indices of row `i`.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    /// Row index of every stored entry, in storage order.
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.nnz());
        for i in 0..self.n_rows {
            rows.extend(std::iter::repeat_n(i, self.row_ptr[i + 1] - self.row_ptr[i]));
        }
        rows
    }

    /// Storage position of `(i, j)`, if present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let range = self.row_range(i);
        self.col_idx[range.clone()].binary_search(&j).ok().map(|p| range.start + p)
    }

    /// `values`-weighted product with a dense row-major matrix.
    pub fn matmul_dense(&self, values: &[f64], x: &Tensor) -> Result<Tensor, TensorError> {
        if x.rows() != self.n_cols || values.len() != self.nnz() {
            return Err(TensorError::Shape(format!(
                "sparse {}x{} (nnz {}) times {:?}",
                self.n_rows,
                self.n_cols,
                values.len(),
                x.shape()
            )));
        }
        let m = x.cols();
        let xd = x.data();
        let mut out = vec![0.0; self.n_rows * m];
        for i in 0..self.n_rows {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in self.row_range(i) {
                let a = values[p];
                let j = self.col_idx[p];
                for (o, &b) in orow.iter_mut().zip(&xd[j * m..(j + 1) * m]) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(self.n_rows, m, out)
    }

    /// `Sᵀ · g` for the `values`-weighted matrix `S`.
    pub fn transpose_matmul_dense(&self, values: &[f64], g: &Tensor) -> Result<Tensor, TensorError> {
        if g.rows() != self.n_rows || values.len() != self.nnz() {
            return Err(TensorError::Shape("transpose sparse product".into()));
        }
        let m = g.cols();
        let gd = g.data();
        let mut out = vec![0.0; self.n_cols * m];
        for i in 0..self.n_rows {
            let grow = &gd[i * m..(i + 1) * m];
            for p in self.row_range(i) {
                let a = values[p];
                let j = self.col_idx[p];
                for (o, &b) in out[j * m..(j + 1) * m].iter_mut().zip(grow) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(self.n_cols, m, out)
    }
}

/// A sparse matrix: shared pattern plus one value per stored entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pattern: Arc<CsrPattern>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(pattern: Arc<CsrPattern>, values: Vec<f64>) -> Result<Self, TensorError> {
        if values.len() != pattern.nnz() {
            return Err(TensorError::Shape(format!(
                "{} values for pattern with {} entries",
                values.len(),
                pattern.nnz()
            )));
        }
        Ok(Self { pattern, values })
    }

    pub fn pattern(&self) -> &Arc<CsrPattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_rows(&self) -> usize {
        self.pattern.n_rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.pattern.n_rows())
            .map(|i| self.pattern.row_range(i).map(|p| self.values[p]).sum())
            .collect()
    }

    pub fn matmul_dense(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.pattern.matmul_dense(&self.values, x)
    }

    pub fn to_dense(&self) -> Tensor {
        let (n, m) = (self.pattern.n_rows(), self.pattern.n_cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for p in self.pattern.row_range(i) {
                out.set(i, self.pattern.col_idx()[p], self.values[p]);
            }
        }
        out
    }
}
