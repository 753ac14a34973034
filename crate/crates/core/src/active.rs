//! Active-set selection.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::Result;
use crate::model::{grad_lambda, grad_theta, CggmModel, DerivedState, Hyperparams, SufficientStats};
use crate::linalg::SparseMatrix;

/// Coordinates eligible for updates in one outer iteration.
///
/// `lambda_coords` holds `(i, j)` with `i ≤ j`, one entry per symmetric pair; both lists are
/// sorted column-major (by column, then row).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActiveSet {
    pub lambda_coords: Vec<(usize, usize)>,
    pub theta_coords: Vec<(usize, usize)>,
}

impl ActiveSet {
    pub fn m_lambda(&self) -> usize {
        self.lambda_coords.len()
    }

    pub fn m_theta(&self) -> usize {
        self.theta_coords.len()
    }

    /// Whether `(i, j)` or `(j, i)` is an active `Λ` coordinate.
    pub fn contains_lambda(&self, i: usize, j: usize) -> bool {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.lambda_coords.binary_search_by(|&(r, c)| (c, r).cmp(&(b, a))).is_ok()
    }

    pub fn contains_theta(&self, i: usize, j: usize) -> bool {
        self.theta_coords.binary_search_by(|&(r, c)| (c, r).cmp(&(j, i))).is_ok()
    }
}

/// Active `Λ` rows `i ≤ j` of column `j`, given that column of the gradient.
pub fn select_lambda_column(j: usize, grad_col: &[f64], lambda: &SparseMatrix, hyper: &Hyperparams) -> Vec<(usize, usize)> {
    let (rows, vals) = lambda.col(j);
    let mut k = 0;
    let mut out = Vec::new();
    for i in 0..=j {
        while k < rows.len() && rows[k] < i {
            k += 1;
        }
        let nonzero = k < rows.len() && rows[k] == i && vals[k] != 0.0;
        if nonzero || grad_col[i].abs() > hyper.lambda_weight(i, j) {
            out.push((i, j));
        }
    }
    out
}

/// Active `Θ` rows of column `j`. Constant inputs never enter.
pub fn select_theta_column(
    j: usize,
    grad_col: &[f64],
    theta: &SparseMatrix,
    stats: &SufficientStats,
    hyper: &Hyperparams,
) -> Vec<(usize, usize)> {
    let (rows, vals) = theta.col(j);
    let constant = stats.constant_inputs();
    let mut k = 0;
    let mut out = Vec::new();
    for i in 0..theta.nrows() {
        if constant[i] {
            continue;
        }
        while k < rows.len() && rows[k] < i {
            k += 1;
        }
        let nonzero = k < rows.len() && rows[k] == i && vals[k] != 0.0;
        if nonzero || grad_col[i].abs() > hyper.lambda_map {
            out.push((i, j));
        }
    }
    out
}

/// Applies the selection rule to full gradients.
pub fn select_from_gradients(
    model: &CggmModel,
    grad_l: &DMatrix<f64>,
    grad_t: &DMatrix<f64>,
    stats: &SufficientStats,
    hyper: &Hyperparams,
) -> ActiveSet {
    let q = model.q();
    let per_col: Vec<(Vec<(usize, usize)>, Vec<(usize, usize)>)> = (0..q)
        .into_par_iter()
        .map(|j| {
            (
                select_lambda_column(j, grad_l.column(j).as_slice(), &model.lambda, hyper),
                select_theta_column(j, grad_t.column(j).as_slice(), &model.theta, stats, hyper),
            )
        })
        .collect();
    let mut set = ActiveSet::default();
    for (l, t) in per_col {
        set.lambda_coords.extend(l);
        set.theta_coords.extend(t);
    }
    set
}

/// `S_Λ = {(i,j): |∇_Λ g|_ij > λ_Λ or Λ_ij ≠ 0}` and likewise for `Θ`.
pub fn select_active(model: &CggmModel, state: &DerivedState, stats: &SufficientStats, hyper: &Hyperparams) -> Result<ActiveSet> {
    let gl = grad_lambda(model, state, stats)?;
    let gt = grad_theta(model, state, stats)?;
    Ok(select_from_gradients(model, &gl, &gt, stats, hyper))
}
