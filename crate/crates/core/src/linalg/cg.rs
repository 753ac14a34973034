//! Conjugate gradient for symmetric positive-definite operators.

use crate::error::{config, structural, Result};
use crate::linalg::{dot, ReductionMode, SparseMatrix};

/// A symmetric linear operator `y = A x`.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOperator for SparseMatrix {
    fn dim(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.mul_vec_into(x, y);
    }
}

/// Result of a CG run. `residual` is the true residual norm `‖A x − b‖₂` at exit.
#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iters: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Solves `A x = b` until `‖A x − b‖₂ ≤ rel_tol ‖b‖₂` or `max_iters` iterations.
///
/// Non-convergence is reported through [`CgOutcome::converged`]; it is the caller's call
/// whether that is an error.
pub fn cg_solve<A: LinearOperator + ?Sized>(op: &A, b: &[f64], rel_tol: f64, max_iters: usize) -> Result<CgOutcome> {
    let n = op.dim();
    if b.len() != n {
        return structural(format!("cg_solve: rhs has length {}, operator has dimension {n}", b.len()));
    }
    if !(rel_tol > 0.0) {
        return config("cg_solve: rel_tol must be positive");
    }
    let mode = ReductionMode::Sequential;
    let bnorm = dot(b, b, mode).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(CgOutcome { x, iters: 0, residual: 0.0, converged: true });
    }
    let target = rel_tol * bnorm;
    let mut r = b.to_vec();
    let mut ap = vec![0.0; n];
    let mut iters = 0;
    loop {
        let mut p = r.clone();
        let mut rr = dot(&r, &r, mode);
        while iters < max_iters && rr.sqrt() > target {
            op.apply(&p, &mut ap);
            let pap = dot(&p, &ap, mode);
            if !(pap > 0.0) {
                break;
            }
            let alpha = rr / pap;
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            let rr_new = dot(&r, &r, mode);
            let beta = rr_new / rr;
            rr = rr_new;
            for k in 0..n {
                p[k] = r[k] + beta * p[k];
            }
            iters += 1;
        }
        // the recurrence drifts from the true residual; recheck and restart if needed
        op.apply(&x, &mut ap);
        for k in 0..n {
            r[k] = b[k] - ap[k];
        }
        let residual = dot(&r, &r, mode).sqrt();
        if residual <= target || iters >= max_iters || rr.sqrt() > target {
            return Ok(CgOutcome { x, iters, residual, converged: residual <= target });
        }
    }
}
