//! Compressed sparse column storage for the system matrices.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    rows: usize,
    cols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by_key(|t| (t.1, t.0));
        let mut col_ptr = vec![0usize; cols + 1];
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..cols {
            col_ptr[c + 1] += col_ptr[c];
        }
        Self {
            rows,
            cols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        let mut triplets = Vec::new();
        for c in 0..dense.ncols() {
            for r in 0..dense.nrows() {
                let v = dense[(r, c)];
                if v != 0.0 {
                    triplets.push((r, c, v));
                }
            }
        }
        Self::from_triplets(dense.nrows(), dense.ncols(), triplets)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row indices and values of column `c`.
    pub fn column(&self, c: usize) -> (&[usize], &[f64]) {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        (&self.row_idx[range.clone()], &self.values[range])
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        y.fill(0.0);
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            let (rows, vals) = self.column(c);
            for (&r, &v) in rows.iter().zip(vals) {
                y[r] += v * xc;
            }
        }
    }

    /// `x = Aᵀ y`.
    pub fn tr_mul_vec(&self, y: &[f64], x: &mut [f64]) {
        assert_eq!(y.len(), self.rows);
        assert_eq!(x.len(), self.cols);
        for (c, xc) in x.iter_mut().enumerate() {
            let (rows, vals) = self.column(c);
            *xc = rows.iter().zip(vals).map(|(&r, &v)| v * y[r]).sum();
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.rows];
        for (&r, &v) in self.row_idx.iter().zip(&self.values) {
            sums[r] += v;
        }
        sums
    }

    /// Row `r` as a dense vector of length `cols`.
    pub fn row_dense(&self, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (c, o) in out.iter_mut().enumerate() {
            let (rows, vals) = self.column(c);
            if let Ok(i) = rows.binary_search(&r) {
                *o = vals[i];
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.rows, self.cols);
        for c in 0..self.cols {
            let (rows, vals) = self.column(c);
            for (&r, &v) in rows.iter().zip(vals) {
                d[(r, c)] = v;
            }
        }
        d
    }
}
