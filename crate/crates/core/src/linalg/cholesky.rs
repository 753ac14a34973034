//! Sparse Cholesky factorization with a minimum-degree ordering.
//!
//! The factorization is up-looking: row `k` of `L` is obtained from a sparse triangular
//! solve whose pattern is the reach of column `k` in the elimination tree. The symbolic
//! part (ordering, elimination tree, column counts) depends only on the pattern and is
//! reused across numeric factorizations, which is what the line search does when it
//! factors `Λ + αΔ` for several step sizes.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::{structural, Result};
use crate::linalg::SparseMatrix;

const NONE: usize = usize::MAX;

/// Minimum-degree elimination ordering of a symmetric pattern. `perm[k]` is the original
/// index eliminated at step `k`; ties are broken by the smaller index.
pub fn minimum_degree_ordering(a: &SparseMatrix) -> Vec<usize> {
    let n = a.ncols();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (i, j, _) in a.iter() {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
    let mut perm = Vec::with_capacity(n);
    while let Some((_, v)) = queue.pop_first() {
        perm.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &nbrs {
            queue.remove(&(adj[u].len(), u));
            adj[u].remove(&v);
            for &w in &nbrs {
                if w != u {
                    adj[u].insert(w);
                }
            }
            queue.insert((adj[u].len(), u));
        }
    }
    perm
}

/// Pattern-only analysis: ordering, elimination tree and the column layout of `L`.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    pinv: Vec<usize>,
    parent: Vec<usize>,
    l_col_ptr: Vec<usize>,
}

impl SymbolicCholesky {
    pub fn analyze(a: &SparseMatrix) -> Result<Self> {
        if !a.is_square() {
            return structural(format!("Cholesky needs a square matrix, got {}x{}", a.nrows(), a.ncols()));
        }
        let n = a.ncols();
        let perm = minimum_degree_ordering(a);
        let mut pinv = vec![0; n];
        for (k, &v) in perm.iter().enumerate() {
            pinv[v] = k;
        }
        let upper = permuted_upper(a, &pinv);
        let parent = etree(n, &upper);

        let mut counts = vec![1usize; n];
        let mut mark = vec![NONE; n];
        let mut stack = Vec::new();
        for k in 0..n {
            ereach(k, &upper[k], &parent, &mut mark, &mut stack);
            for &i in &stack {
                counts[i] += 1;
            }
        }
        let mut l_col_ptr = vec![0; n + 1];
        for k in 0..n {
            l_col_ptr[k + 1] = l_col_ptr[k] + counts[k];
        }
        Ok(SymbolicCholesky { n, perm, pinv, parent, l_col_ptr })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Number of stored entries of `L`, diagonal included.
    pub fn factor_nnz(&self) -> usize {
        self.l_col_ptr[self.n]
    }

    /// Numeric factorization of `a`, whose pattern must be contained in the analyzed one.
    /// Returns `Ok(None)` when `a` is not positive definite.
    pub fn factor(self: &Arc<Self>, a: &SparseMatrix) -> Result<Option<CholeskyFactor>> {
        if a.ncols() != self.n || a.nrows() != self.n {
            return structural("matrix dimension differs from the analyzed pattern");
        }
        let n = self.n;
        let upper = permuted_upper(a, &self.pinv);
        let nnz = self.factor_nnz();
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut next: Vec<usize> = self.l_col_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut mark = vec![NONE; n];
        let mut stack = Vec::new();

        for k in 0..n {
            ereach(k, &upper[k], &self.parent, &mut mark, &mut stack);
            stack.sort_unstable();
            for &(i, v) in &upper[k] {
                x[i] += v;
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack {
                let start = self.l_col_ptr[i];
                if next[i] >= self.l_col_ptr[i + 1] {
                    return structural("matrix pattern exceeds the analyzed pattern");
                }
                let lki = x[i] / lx[start];
                x[i] = 0.0;
                for p in start + 1..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Ok(None);
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
        }
        Ok(Some(CholeskyFactor { symbolic: Arc::clone(self), li, lx }))
    }
}

/// Upper triangle (diagonal included) of `P A P^T`, one entry list per column.
fn permuted_upper(a: &SparseMatrix, pinv: &[usize]) -> Vec<Vec<(usize, f64)>> {
    let mut upper: Vec<Vec<(usize, f64)>> = vec![Vec::new(); a.ncols()];
    for (i, j, v) in a.iter() {
        let (pi, pj) = (pinv[i], pinv[j]);
        if pi <= pj {
            upper[pj].push((pi, v));
        }
    }
    upper
}

fn etree(n: usize, upper: &[Vec<(usize, f64)>]) -> Vec<usize> {
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &(row, _) in &upper[k] {
            let mut i = row;
            while i != NONE && i < k {
                let inext = ancestor[i];
                ancestor[i] = k;
                if inext == NONE {
                    parent[i] = k;
                }
                i = inext;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L` (excluding the diagonal), written into `out`.
fn ereach(k: usize, col: &[(usize, f64)], parent: &[usize], mark: &mut [usize], out: &mut Vec<usize>) {
    out.clear();
    mark[k] = k;
    for &(row, _) in col {
        let mut i = row;
        if i > k {
            continue;
        }
        while mark[i] != k {
            out.push(i);
            mark[i] = k;
            i = parent[i];
            if i == NONE {
                break;
            }
        }
    }
}

/// Numeric Cholesky factor `P A P^T = L L^T`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    li: Vec<usize>,
    lx: Vec<f64>,
}

impl CholeskyFactor {
    /// Analyzes and factors in one call. `Ok(None)` when `a` is not positive definite.
    pub fn new(a: &SparseMatrix) -> Result<Option<Self>> {
        Arc::new(SymbolicCholesky::analyze(a)?).factor(a)
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn logdet(&self) -> f64 {
        let cp = &self.symbolic.l_col_ptr;
        (0..self.dim()).map(|k| self.lx[cp[k]].ln()).sum::<f64>() * 2.0
    }

    /// In place `w <- L^{-1} w`, with `w` in permuted coordinates.
    fn forward(&self, w: &mut [f64]) {
        let cp = &self.symbolic.l_col_ptr;
        for j in 0..self.dim() {
            let wj = w[j] / self.lx[cp[j]];
            w[j] = wj;
            if wj != 0.0 {
                for p in cp[j] + 1..cp[j + 1] {
                    w[self.li[p]] -= self.lx[p] * wj;
                }
            }
        }
    }

    /// In place `w <- L^{-T} w`, with `w` in permuted coordinates.
    fn backward(&self, w: &mut [f64]) {
        let cp = &self.symbolic.l_col_ptr;
        for j in (0..self.dim()).rev() {
            let mut s = w[j];
            for p in cp[j] + 1..cp[j + 1] {
                s -= self.lx[p] * w[self.li[p]];
            }
            w[j] = s / self.lx[cp[j]];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let perm = &self.symbolic.perm;
        let mut w: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
        self.forward(&mut w);
        self.backward(&mut w);
        let mut x = vec![0.0; self.dim()];
        for (k, &p) in perm.iter().enumerate() {
            x[p] = w[k];
        }
        x
    }

    /// `b^T A^{-1} b`, computed as `‖L^{-1} P b‖²`.
    pub fn inverse_quadratic_form(&self, b: &[f64]) -> f64 {
        let mut w: Vec<f64> = self.symbolic.perm.iter().map(|&p| b[p]).collect();
        self.forward(&mut w);
        w.iter().map(|v| v * v).sum()
    }

    /// Maps a standard normal vector `z` to `P^T L^{-T} z`, whose covariance is `A^{-1}`.
    pub fn whiten_inverse(&self, z: &[f64]) -> Vec<f64> {
        let mut w = z.to_vec();
        self.backward(&mut w);
        let mut x = vec![0.0; self.dim()];
        for (k, &p) in self.symbolic.perm.iter().enumerate() {
            x[p] = w[k];
        }
        x
    }
}

/// Outcome of [`sparse_cholesky_logdet`]. `logdet` is meaningful only when `is_pd`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDet {
    pub logdet: f64,
    pub is_pd: bool,
}

/// Log-determinant of a symmetric matrix through its sparse Cholesky factor.
pub fn sparse_cholesky_logdet(a: &SparseMatrix) -> Result<LogDet> {
    if !a.is_square() {
        return structural(format!("expected a square matrix, got {}x{}", a.nrows(), a.ncols()));
    }
    if !a.is_symmetric(1e-12 * (1.0 + a.values().iter().fold(0.0f64, |m, v| m.max(v.abs())))) {
        return structural("matrix is not symmetric");
    }
    Ok(match CholeskyFactor::new(a)? {
        Some(f) => LogDet { logdet: f.logdet(), is_pd: true },
        None => LogDet { logdet: f64::NAN, is_pd: false },
    })
}
