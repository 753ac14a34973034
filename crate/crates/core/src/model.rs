//! Data containers, the penalized objective, its gradients and the stopping statistic.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, structural, CggmError, Result};
use crate::linalg::{sxx_row, CholeskyFactor, ReductionMode, SparseMatrix, SymbolicCholesky};

/// Centered data scaled by `1/√n`, so that inner products are covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

fn check_finite(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if let Some(k) = m.iter().position(|v| !v.is_finite()) {
        let (i, j) = (k % m.nrows(), k / m.nrows());
        return Err(CggmError::Data(format!("{name} has a non-finite entry at ({i}, {j})")));
    }
    Ok(())
}

impl Dataset {
    /// Centers every column and scales by `1/√n`. The inputs are left untouched.
    pub fn center_and_scale(raw_x: &DMatrix<f64>, raw_y: &DMatrix<f64>) -> Result<Self> {
        let n = raw_x.nrows();
        if raw_y.nrows() != n {
            return Err(CggmError::Data(format!("X has {n} rows but Y has {}", raw_y.nrows())));
        }
        if n < 2 {
            return config(format!("need at least 2 samples, got {n}"));
        }
        if raw_x.ncols() == 0 || raw_y.ncols() == 0 {
            return config("X and Y need at least one column each");
        }
        check_finite(raw_x, "X")?;
        check_finite(raw_y, "Y")?;
        let scale = 1.0 / (n as f64).sqrt();
        let prep = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            for mut col in out.column_iter_mut() {
                let mean = col.iter().sum::<f64>() / n as f64;
                col.iter_mut().for_each(|v| *v = (*v - mean) * scale);
            }
            out
        };
        Ok(Dataset { x: prep(raw_x), y: prep(raw_y) })
    }

    /// Wraps matrices that are already centered and scaled.
    pub fn from_scaled(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(CggmError::Data(format!("X has {} rows but Y has {}", x.nrows(), y.nrows())));
        }
        check_finite(&x, "X")?;
        check_finite(&y, "Y")?;
        Ok(Dataset { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }
}

/// `S_yy`, `S_xy` held explicitly; `S_xx` only through the scaled `X`.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    x: Arc<DMatrix<f64>>,
    syy: DMatrix<f64>,
    sxy: DMatrix<f64>,
    sxx_diag: Vec<f64>,
    constant_inputs: Vec<bool>,
}

impl SufficientStats {
    /// Builds statistics from a scaled `X` (so `S_xx = XᵀX`) and explicit `S_yy`, `S_xy`.
    pub fn new(x_scaled: DMatrix<f64>, syy: DMatrix<f64>, sxy: DMatrix<f64>) -> Result<Self> {
        let (p, q) = (x_scaled.ncols(), syy.ncols());
        if syy.nrows() != q {
            return structural("S_yy must be square");
        }
        if sxy.nrows() != p || sxy.ncols() != q {
            return structural(format!("S_xy is {}x{}, expected {p}x{q}", sxy.nrows(), sxy.ncols()));
        }
        check_finite(&x_scaled, "X")?;
        check_finite(&syy, "S_yy")?;
        check_finite(&sxy, "S_xy")?;
        let scale = syy.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if (&syy - syy.transpose()).amax() > 1e-9 * scale {
            return structural("S_yy is not symmetric");
        }
        let sxx_diag: Vec<f64> = x_scaled.column_iter().map(|c| c.norm_squared()).collect();
        let max_diag = sxx_diag.iter().fold(0.0f64, |m, v| m.max(*v));
        let constant_inputs = sxx_diag.iter().map(|&d| d <= 1e-14 * max_diag || d == 0.0).collect();
        Ok(SufficientStats { x: Arc::new(x_scaled), syy, sxy, sxx_diag, constant_inputs })
    }

    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let syy = data.y().transpose() * data.y();
        let syy = (&syy + syy.transpose()) * 0.5;
        let sxy = data.x().transpose() * data.y();
        Self::new(data.x().clone(), syy, sxy)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.syy.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn syy(&self) -> &DMatrix<f64> {
        &self.syy
    }

    pub fn sxy(&self) -> &DMatrix<f64> {
        &self.sxy
    }

    /// Diagonal of `S_xx`.
    pub fn sxx_diag(&self) -> &[f64] {
        &self.sxx_diag
    }

    /// Inputs with (numerically) zero variance.
    pub fn constant_inputs(&self) -> &[bool] {
        &self.constant_inputs
    }
}

/// Regularization weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda_net: f64,
    pub lambda_map: f64,
    pub penalize_lambda_diagonal: bool,
}

impl Hyperparams {
    pub fn new(lambda_net: f64, lambda_map: f64) -> Result<Self> {
        let h = Hyperparams { lambda_net, lambda_map, penalize_lambda_diagonal: true };
        h.validate()?;
        Ok(h)
    }

    pub fn with_unpenalized_diagonal(mut self) -> Self {
        self.penalize_lambda_diagonal = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_net > 0.0 && self.lambda_net.is_finite()) || !(self.lambda_map > 0.0 && self.lambda_map.is_finite()) {
            return config(format!(
                "regularization weights must be positive and finite, got {} and {}",
                self.lambda_net, self.lambda_map
            ));
        }
        Ok(())
    }

    /// l1 weight of `Λ_ij`.
    #[inline]
    pub fn lambda_weight(&self, i: usize, j: usize) -> f64 {
        if i == j && !self.penalize_lambda_diagonal {
            0.0
        } else {
            self.lambda_net
        }
    }

    /// `λ_Λ‖Λ‖₁` with the diagonal handled per the flag.
    pub fn lambda_penalty(&self, lambda: &SparseMatrix) -> f64 {
        let l1 = if self.penalize_lambda_diagonal { lambda.l1_norm() } else { lambda.l1_norm_offdiag() };
        self.lambda_net * l1
    }

    pub fn penalty(&self, model: &CggmModel) -> f64 {
        self.lambda_penalty(&model.lambda) + self.lambda_map * model.theta.l1_norm()
    }
}

/// Output network `Λ` (q×q, symmetric positive definite) and input map `Θ` (p×q).
#[derive(Debug, Clone, PartialEq)]
pub struct CggmModel {
    pub lambda: SparseMatrix,
    pub theta: SparseMatrix,
}

impl CggmModel {
    /// `Λ = I`, `Θ = 0`.
    pub fn initial(p: usize, q: usize) -> Self {
        CggmModel { lambda: SparseMatrix::identity(q), theta: SparseMatrix::zeros(p, q) }
    }

    pub fn new(lambda: SparseMatrix, theta: SparseMatrix) -> Result<Self> {
        if !lambda.is_square() || theta.ncols() != lambda.ncols() {
            return structural(format!(
                "Λ is {}x{} and Θ is {}x{}",
                lambda.nrows(),
                lambda.ncols(),
                theta.nrows(),
                theta.ncols()
            ));
        }
        let scale = lambda.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if !lambda.is_symmetric(1e-12 * scale) {
            return structural("Λ is not symmetric");
        }
        Ok(CggmModel { lambda, theta })
    }

    pub fn p(&self) -> usize {
        self.theta.nrows()
    }

    pub fn q(&self) -> usize {
        self.lambda.ncols()
    }

    /// `‖Λ‖₁ + ‖Θ‖₁`, the scale of the stopping rule.
    pub fn param_l1(&self) -> f64 {
        self.lambda.l1_norm() + self.theta.l1_norm()
    }

    /// Hash of patterns and value bits, used to detect stale derived state.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for m in [&self.lambda, &self.theta] {
            m.nrows().hash(&mut h);
            m.col_ptr().hash(&mut h);
            m.row_indices().hash(&mut h);
            for v in m.values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn check_stats(&self, stats: &SufficientStats) -> Result<()> {
        if self.p() != stats.p() || self.q() != stats.q() {
            return structural(format!(
                "model is p={}, q={} but data is p={}, q={}",
                self.p(),
                self.q(),
                stats.p(),
                stats.q()
            ));
        }
        Ok(())
    }
}

/// `XΘ` stored transposed (q×n) so that each sample is a contiguous column.
pub(crate) fn x_theta_t(x: &DMatrix<f64>, theta: &SparseMatrix) -> DMatrix<f64> {
    let (n, q) = (x.nrows(), theta.ncols());
    let mut out = DMatrix::zeros(q, n);
    for (i, j, v) in theta.iter() {
        let xi = x.column(i);
        for s in 0..n {
            out[(j, s)] += v * xi[s];
        }
    }
    out
}

/// Objective evaluation for a fixed `Θ` and varying `Λ`, as needed by the line search.
#[derive(Debug, Clone)]
pub struct ObjectiveEvaluator<'a> {
    stats: &'a SufficientStats,
    hyper: Hyperparams,
    xtheta_t: DMatrix<f64>,
    theta_is_zero: bool,
    linear_theta: f64,
    penalty_theta: f64,
}

/// Smooth and penalized objective values with the log-determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub g: f64,
    pub f: f64,
    pub logdet: f64,
}

impl<'a> ObjectiveEvaluator<'a> {
    pub fn new(theta: &SparseMatrix, stats: &'a SufficientStats, hyper: &Hyperparams) -> Self {
        let linear_theta = 2.0 * theta.iter().map(|(i, j, v)| v * stats.sxy[(i, j)]).sum::<f64>();
        ObjectiveEvaluator {
            stats,
            hyper: *hyper,
            xtheta_t: x_theta_t(stats.x(), theta),
            theta_is_zero: theta.nnz() == 0,
            linear_theta,
            penalty_theta: hyper.lambda_map * theta.l1_norm(),
        }
    }

    /// Evaluates with an existing factor of `Λ`.
    pub fn eval_with_factor(&self, lambda: &SparseMatrix, factor: &CholeskyFactor) -> ObjectiveValue {
        let logdet = factor.logdet();
        let linear_lambda: f64 = lambda.iter().map(|(i, j, v)| v * self.stats.syy[(i, j)]).sum();
        let trace = if self.theta_is_zero {
            0.0
        } else {
            self.xtheta_t.column_iter().map(|m| factor.inverse_quadratic_form(m.as_slice())).sum()
        };
        let g = -logdet + linear_lambda + self.linear_theta + trace;
        let f = g + self.hyper.lambda_penalty(lambda) + self.penalty_theta;
        ObjectiveValue { g, f, logdet }
    }

    /// `None` when `Λ` is not positive definite.
    pub fn eval(&self, lambda: &SparseMatrix, symbolic: &Arc<SymbolicCholesky>) -> Result<Option<(ObjectiveValue, CholeskyFactor)>> {
        Ok(symbolic.factor(lambda)?.map(|fac| (self.eval_with_factor(lambda, &fac), fac)))
    }
}

/// `g(Λ, Θ) = −log|Λ| + tr(S_yy Λ) + 2 tr(S_xyᵀ Θ) + tr(Λ⁻¹ Θᵀ S_xx Θ)`.
pub fn smooth_loss(model: &CggmModel, stats: &SufficientStats) -> Result<f64> {
    model.check_stats(stats)?;
    let hyper = Hyperparams { lambda_net: 0.0, lambda_map: 0.0, penalize_lambda_diagonal: true };
    let fac = CholeskyFactor::new(&model.lambda)?.ok_or(CggmError::NotPositiveDefinite)?;
    Ok(ObjectiveEvaluator::new(&model.theta, stats, &hyper).eval_with_factor(&model.lambda, &fac).g)
}

/// `f = g + λ_Λ‖Λ‖₁ + λ_Θ‖Θ‖₁`.
pub fn objective(model: &CggmModel, stats: &SufficientStats, hyper: &Hyperparams) -> Result<f64> {
    Ok(smooth_loss(model, stats)? + hyper.penalty(model))
}

/// Dense inverse of `Λ` from its Cholesky factor, columns solved in parallel.
pub(crate) fn dense_inverse(factor: &CholeskyFactor) -> DMatrix<f64> {
    let q = factor.dim();
    let cols: Vec<Vec<f64>> = (0..q)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            factor.solve(&e)
        })
        .collect();
    let mut sigma = DMatrix::zeros(q, q);
    for (j, c) in cols.iter().enumerate() {
        sigma.column_mut(j).copy_from_slice(c);
    }
    (&sigma + sigma.transpose()) * 0.5
}

/// `Σ = Λ⁻¹`, `R = XΘΣ`, `Ψ = RᵀR` for one model, held densely.
#[derive(Debug, Clone)]
pub struct DerivedState {
    pub sigma: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub logdet: f64,
    fingerprint: u64,
}

impl DerivedState {
    pub fn compute(model: &CggmModel, stats: &SufficientStats) -> Result<Self> {
        model.check_stats(stats)?;
        let fac = CholeskyFactor::new(&model.lambda)?.ok_or(CggmError::NotPositiveDefinite)?;
        Ok(Self::with_sigma(model, stats, dense_inverse(&fac), fac.logdet()))
    }

    /// Completes the state from an already computed `Σ`.
    pub fn with_sigma(model: &CggmModel, stats: &SufficientStats, sigma: DMatrix<f64>, logdet: f64) -> Self {
        let (n, q) = (stats.n(), model.q());
        let (r, psi) = if model.theta.nnz() == 0 {
            (DMatrix::zeros(n, q), DMatrix::zeros(q, q))
        } else {
            let r = x_theta_t(stats.x(), &model.theta).transpose() * &sigma;
            let psi = r.transpose() * &r;
            let psi = (&psi + psi.transpose()) * 0.5;
            (r, psi)
        };
        DerivedState { sigma, r, psi, logdet, fingerprint: model.fingerprint() }
    }

    pub fn check(&self, model: &CggmModel) -> Result<()> {
        if self.fingerprint != model.fingerprint() {
            return Err(CggmError::StaleState);
        }
        Ok(())
    }
}

/// `∇_Λ g = S_yy − Σ − Ψ`.
pub fn grad_lambda(model: &CggmModel, state: &DerivedState, stats: &SufficientStats) -> Result<DMatrix<f64>> {
    state.check(model)?;
    model.check_stats(stats)?;
    Ok(stats.syy() - &state.sigma - &state.psi)
}

/// Full `∇_Θ g = 2 S_xy + 2 XᵀR`.
pub fn grad_theta(model: &CggmModel, state: &DerivedState, stats: &SufficientStats) -> Result<DMatrix<f64>> {
    state.check(model)?;
    model.check_stats(stats)?;
    if model.theta.nnz() == 0 {
        return Ok(stats.sxy() * 2.0);
    }
    Ok((stats.sxy() + stats.x().transpose() * &state.r) * 2.0)
}

/// Selected rows of `∇_Θ g = 2 S_xy + 2 S_xx ΘΣ`, via restricted `S_xx` rows against the
/// nonzero rows of `V = ΘΣ`. Row `k` of the result corresponds to `rows[k]`.
pub fn grad_theta_rows(
    model: &CggmModel,
    state: &DerivedState,
    stats: &SufficientStats,
    rows: &[usize],
) -> Result<DMatrix<f64>> {
    state.check(model)?;
    model.check_stats(stats)?;
    let (p, q) = (model.p(), model.q());
    if let Some(&bad) = rows.iter().find(|&&i| i >= p) {
        return structural(format!("row {bad} out of range for p = {p}"));
    }
    let nonzero: Vec<usize> = model.theta.nonempty_rows().iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
    let mut v = DMatrix::<f64>::zeros(p, q);
    for (i, j, val) in model.theta.iter() {
        for t in 0..q {
            v[(i, t)] += val * state.sigma[(j, t)];
        }
    }
    let mut out = DMatrix::zeros(rows.len(), q);
    for (k, &i) in rows.iter().enumerate() {
        let row = sxx_row(stats.x(), i, Some(&nonzero), ReductionMode::Sequential)?;
        for t in 0..q {
            let gamma: f64 = row.entries.iter().map(|&(l, s)| s * v[(l, t)]).sum();
            out[(k, t)] = 2.0 * (stats.sxy()[(i, t)] + gamma);
        }
    }
    Ok(out)
}

/// Magnitude of the minimum-norm subgradient for one coordinate.
#[inline]
pub fn subgradient_entry(value: f64, grad: f64, weight: f64) -> f64 {
    if value != 0.0 {
        (grad + weight * value.signum()).abs()
    } else {
        (grad.abs() - weight).max(0.0)
    }
}

/// Sum of [`subgradient_entry`] over every entry of `Λ` and `Θ`.
pub fn subgradient_from_gradients(
    model: &CggmModel,
    grad_l: &DMatrix<f64>,
    grad_t: &DMatrix<f64>,
    hyper: &Hyperparams,
) -> f64 {
    let mut total = 0.0;
    for j in 0..model.q() {
        let (rows, vals) = model.lambda.col(j);
        let mut k = 0;
        for i in 0..model.q() {
            let v = if k < rows.len() && rows[k] == i {
                k += 1;
                vals[k - 1]
            } else {
                0.0
            };
            total += subgradient_entry(v, grad_l[(i, j)], hyper.lambda_weight(i, j));
        }
        let (rows, vals) = model.theta.col(j);
        let mut k = 0;
        for i in 0..model.p() {
            let v = if k < rows.len() && rows[k] == i {
                k += 1;
                vals[k - 1]
            } else {
                0.0
            };
            total += subgradient_entry(v, grad_t[(i, j)], hyper.lambda_map);
        }
    }
    total
}

/// l1 norm of the minimum-norm subgradient of `f`.
pub fn min_norm_subgradient(
    model: &CggmModel,
    state: &DerivedState,
    stats: &SufficientStats,
    hyper: &Hyperparams,
) -> Result<f64> {
    let gl = grad_lambda(model, state, stats)?;
    let gt = grad_theta(model, state, stats)?;
    Ok(subgradient_from_gradients(model, &gl, &gt, hyper))
}

/// Conditional mean `−Λ⁻¹ Θᵀ x`.
pub fn predict_mean(model: &CggmModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.p() {
        return structural(format!("input has length {}, model expects {}", x.len(), model.p()));
    }
    let fac = CholeskyFactor::new(&model.lambda)?.ok_or(CggmError::NotPositiveDefinite)?;
    let b = model.theta.tr_mul_vec(x);
    Ok(fac.solve(&b).into_iter().map(|v| -v).collect())
}
