//! Dense proximal-gradient reference solver for small problems.
//!
//! Shares only the data containers with the main solver: gradients, objective and
//! subgradient statistic are recomputed here from dense matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{config, CggmError, Result};
use crate::linalg::SparseMatrix;
use crate::model::{CggmModel, Dataset, Hyperparams, SufficientStats};

/// Largest `p + q` accepted by the oracle.
pub const ORACLE_MAX_DIM: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Step shrink factor during backtracking.
    pub beta: f64,
    /// Stop once the subgradient statistic is below `tol · (‖Λ‖₁ + ‖Θ‖₁)`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { beta: 0.5, tol: 1e-10, max_iters: 200_000 }
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub model: CggmModel,
    pub objective: f64,
    pub subgrad: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct Point {
    lambda: DMatrix<f64>,
    theta: DMatrix<f64>,
    g: f64,
    grad_l: DMatrix<f64>,
    grad_t: DMatrix<f64>,
}

struct Problem<'a> {
    syy: &'a DMatrix<f64>,
    sxy: &'a DMatrix<f64>,
    sxx: DMatrix<f64>,
    hyper: Hyperparams,
}

impl Problem<'_> {
    /// Smooth part and its gradient; `None` outside the PD cone.
    fn eval(&self, lambda: DMatrix<f64>, theta: DMatrix<f64>) -> Option<Point> {
        let chol = lambda.clone().cholesky()?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let sigma = chol.inverse();
        let a = theta.transpose() * &self.sxx * &theta;
        let g = -logdet + self.syy.component_mul(&lambda).sum() + 2.0 * self.sxy.component_mul(&theta).sum() + (&sigma * &a).trace();
        if !g.is_finite() {
            return None;
        }
        let psi = &sigma * &a * &sigma;
        let grad_l = self.syy - &sigma - &psi;
        let grad_l = (&grad_l + grad_l.transpose()) * 0.5;
        let grad_t = (self.sxy + &self.sxx * &theta * &sigma) * 2.0;
        Some(Point { lambda, theta, g, grad_l, grad_t })
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        if i == j && !self.hyper.penalize_lambda_diagonal {
            0.0
        } else {
            self.hyper.lambda_net
        }
    }

    fn penalty(&self, lambda: &DMatrix<f64>, theta: &DMatrix<f64>) -> f64 {
        let mut h = self.hyper.lambda_map * theta.abs().sum();
        for j in 0..lambda.ncols() {
            for i in 0..lambda.nrows() {
                h += self.weight(i, j) * lambda[(i, j)].abs();
            }
        }
        h
    }

    fn prox(&self, pt: &Point, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let shrink = |v: f64, r: f64| v.signum() * (v.abs() - r).max(0.0);
        let q = pt.lambda.nrows();
        let mut l = DMatrix::zeros(q, q);
        for j in 0..q {
            for i in 0..q {
                l[(i, j)] = shrink(pt.lambda[(i, j)] - t * pt.grad_l[(i, j)], t * self.weight(i, j));
            }
        }
        let l = (&l + l.transpose()) * 0.5;
        let th = (&pt.theta - &pt.grad_t * t).map(|v| shrink(v, t * self.hyper.lambda_map));
        (l, th)
    }

    fn subgrad(&self, pt: &Point) -> f64 {
        let entry = |v: f64, g: f64, w: f64| if v != 0.0 { (g + w * v.signum()).abs() } else { (g.abs() - w).max(0.0) };
        let mut s = 0.0;
        for j in 0..pt.lambda.ncols() {
            for i in 0..pt.lambda.nrows() {
                s += entry(pt.lambda[(i, j)], pt.grad_l[(i, j)], self.weight(i, j));
            }
            for i in 0..pt.theta.nrows() {
                s += entry(pt.theta[(i, j)], pt.grad_t[(i, j)], self.hyper.lambda_map);
            }
        }
        s
    }
}

/// Proximal gradient with Barzilai–Borwein trial steps and backtracking on the smooth
/// part. Trial points outside the PD cone are rejected by shrinking the step.
pub fn prox_grad_fit(data: &Dataset, hyper: &Hyperparams, cfg: &OracleConfig) -> Result<OracleResult> {
    prox_grad_fit_stats(&SufficientStats::from_dataset(data)?, hyper, cfg)
}

pub fn prox_grad_fit_stats(stats: &SufficientStats, hyper: &Hyperparams, cfg: &OracleConfig) -> Result<OracleResult> {
    hyper.validate()?;
    let (p, q) = (stats.p(), stats.q());
    if p + q > ORACLE_MAX_DIM {
        return config(format!("oracle refuses p + q = {} > {ORACLE_MAX_DIM}", p + q));
    }
    if !(cfg.tol > 0.0) || !(cfg.beta > 0.0 && cfg.beta < 1.0) {
        return config("oracle needs tol > 0 and beta in (0, 1)");
    }
    let x = stats.x();
    let prob = Problem { syy: stats.syy(), sxy: stats.sxy(), sxx: x.transpose() * x, hyper: *hyper };
    let mut pt = prob
        .eval(DMatrix::identity(q, q), DMatrix::zeros(p, q))
        .ok_or_else(|| CggmError::Numerical("objective undefined at the identity".into()))?;
    let mut t = 1.0;
    let mut iterations = 0;
    let mut stat = prob.subgrad(&pt);
    let l1 = |pt: &Point| pt.lambda.abs().sum() + pt.theta.abs().sum();
    while stat >= cfg.tol * l1(&pt) && iterations < cfg.max_iters {
        iterations += 1;
        let mut next = None;
        for _ in 0..100 {
            let (l, th) = prob.prox(&pt, t);
            let (dl, dt) = (&l - &pt.lambda, &th - &pt.theta);
            if let Some(cand) = prob.eval(l, th) {
                let sq = dl.norm_squared() + dt.norm_squared();
                let curvature = if (cand.g - pt.g).abs() > 1e-10 * pt.g.abs().max(1.0) {
                    let lin = pt.grad_l.component_mul(&dl).sum() + pt.grad_t.component_mul(&dt).sum();
                    cand.g - pt.g - lin
                } else {
                    // objective differences are lost to rounding here; the trapezoid rule on
                    // the gradients gives the same quantity without cancellation
                    0.5 * ((&cand.grad_l - &pt.grad_l).component_mul(&dl).sum() + (&cand.grad_t - &pt.grad_t).component_mul(&dt).sum())
                };
                if curvature <= sq / (2.0 * t) {
                    next = Some((cand, dl, dt));
                    break;
                }
            }
            t *= cfg.beta;
        }
        let Some((cand, dl, dt)) = next else {
            return Err(CggmError::Numerical("oracle backtracking failed".into()));
        };
        let (yl, yt) = (&cand.grad_l - &pt.grad_l, &cand.grad_t - &pt.grad_t);
        let sy = dl.component_mul(&yl).sum() + dt.component_mul(&yt).sum();
        let ss = dl.norm_squared() + dt.norm_squared();
        if ss == 0.0 {
            pt = cand;
            stat = prob.subgrad(&pt);
            break;
        }
        t = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e6) } else { (t * 2.0).min(1e6) };
        pt = cand;
        stat = prob.subgrad(&pt);
    }
    let objective = pt.g + prob.penalty(&pt.lambda, &pt.theta);
    let converged = stat < cfg.tol * l1(&pt);
    let model = CggmModel::new(SparseMatrix::from_dense(&pt.lambda, 0.0), SparseMatrix::from_dense(&pt.theta, 0.0))?;
    Ok(OracleResult { model, objective, subgrad: stat, iterations, converged })
}
