//! On-demand `Σ` and `Ψ` columns.

use nalgebra::DMatrix;

use crate::error::{CggmError, Result};
use crate::linalg::{cg_solve, SparseMatrix};
use crate::model::DerivedState;

/// Supplier of single columns of `Σ = Λ⁻¹` and `Ψ = ΣΘᵀS_xxΘΣ`.
pub trait ColumnSource: Sync {
    fn dim(&self) -> usize;

    fn sigma(&self, j: usize) -> Result<Vec<f64>>;

    /// Column `j` of `Ψ`, given column `j` of `Σ`.
    fn psi(&self, j: usize, sigma_j: &[f64]) -> Result<Vec<f64>>;
}

/// Columns copied out of a dense [`DerivedState`].
#[derive(Debug, Clone, Copy)]
pub struct DenseColumns<'a> {
    state: &'a DerivedState,
}

impl<'a> DenseColumns<'a> {
    pub fn new(state: &'a DerivedState) -> Self {
        DenseColumns { state }
    }
}

impl ColumnSource for DenseColumns<'_> {
    fn dim(&self) -> usize {
        self.state.sigma.nrows()
    }

    fn sigma(&self, j: usize) -> Result<Vec<f64>> {
        Ok(self.state.sigma.column(j).iter().copied().collect())
    }

    fn psi(&self, j: usize, _sigma_j: &[f64]) -> Result<Vec<f64>> {
        Ok(self.state.psi.column(j).iter().copied().collect())
    }
}

/// Columns obtained by conjugate gradient on `Λ`.
///
/// `Σ_j` solves `Λ Σ_j = e_j`. For `Ψ_j`, `R_j = XΘΣ_j` is formed and `Λ Ψ_j = ΘᵀXᵀR_j`
/// is solved, so neither `R` nor `Σ` is ever held whole.
#[derive(Debug, Clone, Copy)]
pub struct CgColumns<'a> {
    lambda: &'a SparseMatrix,
    theta: &'a SparseMatrix,
    x: &'a DMatrix<f64>,
    rel_tol: f64,
    max_iters: usize,
}

impl<'a> CgColumns<'a> {
    pub fn new(lambda: &'a SparseMatrix, theta: &'a SparseMatrix, x: &'a DMatrix<f64>, rel_tol: f64) -> Self {
        CgColumns { lambda, theta, x, rel_tol, max_iters: 10 * lambda.nrows().max(1) }
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    fn solve(&self, b: &[f64], what: &str, j: usize) -> Result<Vec<f64>> {
        let out = cg_solve(self.lambda, b, self.rel_tol, self.max_iters)?;
        if !out.converged {
            return Err(CggmError::Numerical(format!(
                "CG for {what} column {j} stopped after {} iterations with relative residual {:e}",
                out.iters, out.residual
            )));
        }
        Ok(out.x)
    }
}

impl ColumnSource for CgColumns<'_> {
    fn dim(&self) -> usize {
        self.lambda.nrows()
    }

    fn sigma(&self, j: usize) -> Result<Vec<f64>> {
        let mut e = vec![0.0; self.dim()];
        e[j] = 1.0;
        self.solve(&e, "Σ", j)
    }

    fn psi(&self, j: usize, sigma_j: &[f64]) -> Result<Vec<f64>> {
        let q = self.dim();
        if self.theta.nnz() == 0 {
            return Ok(vec![0.0; q]);
        }
        let v = self.theta.mul_vec(sigma_j);
        let r = self.x * nalgebra::DVector::from_column_slice(&v);
        let w = self.x.tr_mul(&r);
        let b = self.theta.tr_mul_vec(w.as_slice());
        self.solve(&b, "Ψ", j)
    }
}
