//! Compressed sparse column storage.

use nalgebra::DMatrix;

use crate::error::{structural, Result};

/// Column-compressed sparse matrix.
///
/// Row indices are strictly increasing inside every column and explicit zeros are never
/// stored. Symmetric matrices keep both triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMatrix {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = SparseMatrix::zeros(n, n);
        for (j, &d) in diag.iter().enumerate() {
            if d != 0.0 {
                m.row_idx.push(j);
                m.values.push(d);
            }
            m.col_ptr[j + 1] = m.row_idx.len();
        }
        m
    }

    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed and entries
    /// that end up exactly zero are dropped.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
        for &(i, j, v) in triplets {
            if i >= nrows || j >= ncols {
                return structural(format!("triplet ({i}, {j}) outside a {nrows}x{ncols} matrix"));
            }
            if !v.is_finite() {
                return structural(format!("non-finite value at ({i}, {j})"));
            }
            cols[j].push((i, v));
        }
        Ok(Self::from_columns(nrows, cols))
    }

    /// Builds a matrix from per-column entry lists (unsorted, duplicates summed).
    pub(crate) fn from_columns(nrows: usize, mut cols: Vec<Vec<(usize, f64)>>) -> Self {
        let ncols = cols.len();
        let mut m = SparseMatrix::zeros(nrows, ncols);
        for (j, col) in cols.iter_mut().enumerate() {
            col.sort_by_key(|&(i, _)| i);
            let mut k = 0;
            while k < col.len() {
                let i = col[k].0;
                let mut v = 0.0;
                while k < col.len() && col[k].0 == i {
                    v += col[k].1;
                    k += 1;
                }
                if v != 0.0 {
                    m.row_idx.push(i);
                    m.values.push(v);
                }
            }
            m.col_ptr[j + 1] = m.row_idx.len();
        }
        m
    }

    /// Sparsifies a dense matrix, keeping entries with `|v| > drop_tol`.
    pub fn from_dense(dense: &DMatrix<f64>, drop_tol: f64) -> Self {
        let cols = (0..dense.ncols())
            .map(|j| {
                dense
                    .column(j)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.abs() > drop_tol)
                    .map(|(i, &v)| (i, v))
                    .collect()
            })
            .collect();
        Self::from_columns(dense.nrows(), cols)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_indices(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row indices and values of column `j`.
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.row_idx[s..e], &self.values[s..e])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (rows, vals) = self.col(j);
        match rows.binary_search(&i) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Iterates `(row, col, value)` in column-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            let (rows, vals) = self.col(j);
            rows.iter().zip(vals).map(move |(&i, &v)| (i, j, v))
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.iter() {
            d[(i, j)] = v;
        }
        d
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.nrows];
        for (i, j, v) in self.iter() {
            cols[i].push((j, v));
        }
        Self::from_columns(self.ncols, cols)
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        y.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            let (rows, vals) = self.col(j);
            for (&i, &v) in rows.iter().zip(vals) {
                y[i] += v * xj;
            }
        }
    }

    /// `y = A^T x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|j| {
                let (rows, vals) = self.col(j);
                rows.iter().zip(vals).map(|(&i, &v)| v * x[i]).sum()
            })
            .collect()
    }

    /// `A + alpha B` over the union pattern; exact zeros produced by cancellation are kept
    /// out of the result.
    pub fn add_scaled(&self, other: &SparseMatrix, alpha: f64) -> Result<SparseMatrix> {
        if self.nrows != other.nrows || self.ncols != other.ncols {
            return structural("add_scaled: shape mismatch");
        }
        let mut cols: Vec<Vec<(usize, f64)>> = Vec::with_capacity(self.ncols);
        for j in 0..self.ncols {
            let (ra, va) = self.col(j);
            let (rb, vb) = other.col(j);
            let mut col = Vec::with_capacity(ra.len() + rb.len());
            col.extend(ra.iter().copied().zip(va.iter().copied()));
            col.extend(rb.iter().copied().zip(vb.iter().map(|v| alpha * v)));
            cols.push(col);
        }
        Ok(Self::from_columns(self.nrows, cols))
    }

    /// Union of the sparsity patterns of `self` and `other`, with `self`'s values
    /// (structural zeros retained). Used for symbolic analysis.
    pub(crate) fn pattern_union(&self, other: &SparseMatrix) -> SparseMatrix {
        let mut m = SparseMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            let (ra, va) = self.col(j);
            let (rb, _) = other.col(j);
            let (mut a, mut b) = (0, 0);
            while a < ra.len() || b < rb.len() {
                let take_a = b >= rb.len() || (a < ra.len() && ra[a] <= rb[b]);
                if take_a {
                    if b < rb.len() && rb[b] == ra[a] {
                        b += 1;
                    }
                    m.row_idx.push(ra[a]);
                    m.values.push(va[a]);
                    a += 1;
                } else {
                    m.row_idx.push(rb[b]);
                    m.values.push(0.0);
                    b += 1;
                }
            }
            m.col_ptr[j + 1] = m.row_idx.len();
        }
        m
    }

    pub fn is_square(&self) -> bool {
        self.nrows == self.ncols
    }

    /// True when `|A_ij - A_ji| <= tol` for every stored entry.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square() && self.iter().all(|(i, j, v)| (self.get(j, i) - v).abs() <= tol)
    }

    /// Elementwise l1 norm.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// Elementwise l1 norm excluding the diagonal.
    pub fn l1_norm_offdiag(&self) -> f64 {
        self.iter().filter(|(i, j, _)| i != j).map(|(_, _, v)| v.abs()).sum()
    }

    /// Rows that hold at least one stored entry.
    pub fn nonempty_rows(&self) -> Vec<bool> {
        let mut rows = vec![false; self.nrows];
        for &i in &self.row_idx {
            rows[i] = true;
        }
        rows
    }
}
