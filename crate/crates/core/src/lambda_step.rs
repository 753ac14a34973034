//! Newton direction for `Λ` by coordinate descent, and the Armijo line search.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::active::ActiveSet;
use crate::error::{config, CggmError, Result};
use crate::linalg::{dot, soft_threshold, CholeskyFactor, ReductionMode, SparseMatrix, SymbolicCholesky};
use crate::model::{CggmModel, DerivedState, Hyperparams, ObjectiveEvaluator, ObjectiveValue, SufficientStats};

const NONE: usize = usize::MAX;

/// Second-order, first-order and offset terms of one `Λ` coordinate problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LambdaCoefficients {
    /// Minimizer of `b μ + a μ²/2 + w |c + μ|`.
    #[inline]
    pub fn step(&self, weight: f64) -> f64 {
        -self.c + soft_threshold(self.c - self.b / self.a, weight / self.a)
    }
}

/// Columns `Σ_t`, `Ψ_t` and `U_t = Δ Σ_t` resident for one index `t`.
#[derive(Debug, Clone)]
struct Resident {
    sigma: Vec<f64>,
    psi: Vec<f64>,
    u: Vec<f64>,
}

/// Coordinate-descent state for the `Λ` direction over a fixed active set.
///
/// Only resident columns can take part in an update. With every column resident this is
/// the in-memory method; the block engine loads and releases columns around it.
#[derive(Debug)]
pub struct LambdaWorkspace<'a> {
    syy: &'a DMatrix<f64>,
    hyper: Hyperparams,
    mode: ReductionMode,
    coords: &'a [(usize, usize)],
    lambda_vals: Vec<f64>,
    delta: Vec<f64>,
    grad: Vec<f64>,
    slot_of: Vec<usize>,
    slots: Vec<Option<(usize, Resident)>>,
    free: Vec<usize>,
    resident: usize,
    high_water: usize,
    flagged: usize,
}

impl<'a> LambdaWorkspace<'a> {
    pub fn new(model: &CggmModel, stats: &'a SufficientStats, active: &'a ActiveSet, hyper: &Hyperparams, mode: ReductionMode) -> Self {
        let coords = &active.lambda_coords[..];
        let lambda_vals = coords.iter().map(|&(i, j)| model.lambda.get(i, j)).collect();
        LambdaWorkspace {
            syy: stats.syy(),
            hyper: *hyper,
            mode,
            coords,
            lambda_vals,
            delta: vec![0.0; coords.len()],
            grad: vec![f64::NAN; coords.len()],
            slot_of: vec![NONE; model.q()],
            slots: Vec::new(),
            free: Vec::new(),
            resident: 0,
            high_water: 0,
            flagged: 0,
        }
    }

    pub fn is_resident(&self, t: usize) -> bool {
        self.slot_of[t] != NONE
    }

    pub fn resident_count(&self) -> usize {
        self.resident
    }

    /// Largest number of simultaneously resident columns seen so far.
    pub fn high_water(&self) -> usize {
        self.high_water
    }

    /// Coordinates skipped because their second-order coefficient vanished.
    pub fn flagged(&self) -> usize {
        self.flagged
    }

    /// Makes column `t` resident; `U_t` is rebuilt from the current `Δ`.
    pub fn load(&mut self, t: usize, sigma: Vec<f64>, psi: Vec<f64>) {
        if self.is_resident(t) {
            return;
        }
        let mut u = vec![0.0; sigma.len()];
        for (k, &(i, j)) in self.coords.iter().enumerate() {
            let d = self.delta[k];
            if d != 0.0 {
                u[i] += d * sigma[j];
                if i != j {
                    u[j] += d * sigma[i];
                }
            }
        }
        let col = Resident { sigma, psi, u };
        let slot = match self.free.pop() {
            Some(s) => {
                self.slots[s] = Some((t, col));
                s
            }
            None => {
                self.slots.push(Some((t, col)));
                self.slots.len() - 1
            }
        };
        self.slot_of[t] = slot;
        self.resident += 1;
        self.high_water = self.high_water.max(self.resident);
    }

    pub fn release(&mut self, t: usize) {
        let s = self.slot_of[t];
        if s != NONE {
            self.slots[s] = None;
            self.free.push(s);
            self.slot_of[t] = NONE;
            self.resident -= 1;
        }
    }

    fn col(&self, t: usize) -> &Resident {
        &self.slots[self.slot_of[t]].as_ref().expect("resident column").1
    }

    /// Coefficients of coordinate `k` of the active list; both endpoints must be resident.
    pub fn coefficients(&self, k: usize) -> LambdaCoefficients {
        let (i, j) = self.coords[k];
        let (ci, cj) = (self.col(i), self.col(j));
        let m = self.mode;
        let g = self.syy[(i, j)] - ci.sigma[j] - ci.psi[j];
        let (sij, sii, sjj) = (ci.sigma[j], ci.sigma[i], cj.sigma[j]);
        let (pij, pii, pjj) = (ci.psi[j], ci.psi[i], cj.psi[j]);
        if i == j {
            LambdaCoefficients {
                a: sii * sii + 2.0 * sii * pii,
                b: g + dot(&ci.sigma, &ci.u, m) + 2.0 * dot(&ci.psi, &ci.u, m),
                c: self.lambda_vals[k] + self.delta[k],
            }
        } else {
            LambdaCoefficients {
                a: sij * sij + sii * sjj + sii * pjj + sjj * pii + 2.0 * sij * pij,
                b: g + dot(&ci.sigma, &cj.u, m) + dot(&ci.psi, &cj.u, m) + dot(&cj.psi, &ci.u, m),
                c: self.lambda_vals[k] + self.delta[k],
            }
        }
    }

    /// Updates coordinate `k` and returns the applied change.
    pub fn update(&mut self, k: usize) -> f64 {
        let (i, j) = self.coords[k];
        let coef = self.coefficients(k);
        let ci = self.col(i);
        self.grad[k] = self.syy[(i, j)] - ci.sigma[j] - ci.psi[j];
        if !(coef.a > 0.0) || !coef.a.is_finite() {
            self.flagged += 1;
            return 0.0;
        }
        let mu = coef.step(self.hyper.lambda_weight(i, j));
        if mu == 0.0 || !mu.is_finite() {
            return 0.0;
        }
        self.delta[k] += mu;
        for (_, col) in self.slots.iter_mut().flatten() {
            let (si, sj) = (col.sigma[i], col.sigma[j]);
            col.u[i] += mu * sj;
            if i != j {
                col.u[j] += mu * si;
            }
        }
        mu
    }

    /// Records `∇_Λ g` at coordinate `k` without updating it.
    pub fn record_gradient(&mut self, k: usize) {
        let (i, j) = self.coords[k];
        let ci = self.col(i);
        self.grad[k] = self.syy[(i, j)] - ci.sigma[j] - ci.psi[j];
    }

    /// Current `U_t`, for tests and diagnostics.
    pub fn u_column(&self, t: usize) -> Option<&[f64]> {
        self.is_resident(t).then(|| &self.col(t).u[..])
    }

    pub fn finish(self, q: usize) -> Result<LambdaDirection> {
        let mut trip = Vec::new();
        let mut grad_dot_delta = 0.0;
        for (k, &(i, j)) in self.coords.iter().enumerate() {
            let d = self.delta[k];
            if d != 0.0 {
                if self.grad[k].is_nan() {
                    return Err(CggmError::Numerical(format!("missing gradient at Λ({i}, {j})")));
                }
                let mult = if i == j { 1.0 } else { 2.0 };
                grad_dot_delta += mult * self.grad[k] * d;
                trip.push((i, j, d));
                if i != j {
                    trip.push((j, i, d));
                }
            }
        }
        Ok(LambdaDirection {
            delta: SparseMatrix::from_triplets(q, q, &trip)?,
            grad_dot_delta,
            flagged: self.flagged,
        })
    }
}

/// A Newton direction for `Λ` together with `tr(∇_Λ g Δ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaDirection {
    pub delta: SparseMatrix,
    pub grad_dot_delta: f64,
    pub flagged: usize,
}

/// Coordinate descent on the l1-regularized quadratic model of `g` around `Λ`.
///
/// Visits the active coordinates `passes` times in list order, or follows `order` (indices
/// into `active.lambda_coords`, repeats allowed) for each pass when given.
pub fn newton_direction_lambda(
    model: &CggmModel,
    state: &DerivedState,
    stats: &SufficientStats,
    active: &ActiveSet,
    hyper: &Hyperparams,
    passes: usize,
    order: Option<&[usize]>,
    mode: ReductionMode,
) -> Result<LambdaDirection> {
    state.check(model)?;
    let q = model.q();
    let mut ws = LambdaWorkspace::new(model, stats, active, hyper, mode);
    if active.lambda_coords.is_empty() {
        return ws.finish(q);
    }
    for t in 0..q {
        ws.load(t, state.sigma.column(t).iter().copied().collect(), state.psi.column(t).iter().copied().collect());
    }
    let default_order: Vec<usize> = (0..active.m_lambda()).collect();
    let order = order.unwrap_or(&default_order);
    for _ in 0..passes {
        for &k in order {
            ws.update(k);
        }
    }
    for k in 0..active.m_lambda() {
        ws.record_gradient(k);
    }
    ws.finish(q)
}

/// Value of `tr(GΔ) + ½tr(ΣΔΣΔ) + tr(ΔΣΔΨ) + λ‖Λ+Δ‖₁`, the local model minimized above.
pub fn quadratic_model_value(
    lambda: &SparseMatrix,
    delta: &DMatrix<f64>,
    state: &DerivedState,
    grad: &DMatrix<f64>,
    hyper: &Hyperparams,
) -> f64 {
    let s = &state.sigma;
    let sd = s * delta;
    let lin = grad.component_mul(delta).sum();
    let quad = 0.5 * (&sd * &sd).trace() + (delta * &sd * &state.psi).trace();
    let mut pen = 0.0;
    for j in 0..delta.ncols() {
        for i in 0..delta.nrows() {
            pen += hyper.lambda_weight(i, j) * (lambda.get(i, j) + delta[(i, j)]).abs();
        }
    }
    lin + quad + pen
}

/// Armijo parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearchParams {
    pub beta: f64,
    pub sigma: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearchParams {
    fn default() -> Self {
        LineSearchParams { beta: 0.5, sigma: 1e-4, max_backtracks: 30 }
    }
}

impl LineSearchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) || !(self.sigma > 0.0 && self.sigma < 1.0) {
            return config("line search needs beta and sigma in (0, 1)");
        }
        Ok(())
    }
}

/// Accepted step.
#[derive(Debug, Clone)]
pub struct LineSearchOutcome {
    pub alpha: f64,
    pub lambda: SparseMatrix,
    pub value: ObjectiveValue,
    pub factor: CholeskyFactor,
    pub backtracks: usize,
}

/// Largest `α ∈ {1, β, β², …}` with `Λ + αΔ` positive definite and
/// `f(Λ + αΔ) ≤ f(Λ) + σαδ`, where `δ = tr(∇gΔ) + λ(‖Λ+Δ‖₁ − ‖Λ‖₁)`.
///
/// `current` must be `f` at `(Λ, Θ)` as produced by `evaluator`. Exhausting the backtracks
/// is a numerical error.
pub fn line_search_lambda(
    lambda: &SparseMatrix,
    direction: &LambdaDirection,
    current: &ObjectiveValue,
    evaluator: &ObjectiveEvaluator<'_>,
    hyper: &Hyperparams,
    params: &LineSearchParams,
) -> Result<LineSearchOutcome> {
    params.validate()?;
    let delta = &direction.delta;
    let full = lambda.add_scaled(delta, 1.0)?;
    let decrease = direction.grad_dot_delta + hyper.lambda_penalty(&full) - hyper.lambda_penalty(lambda);
    let symbolic = Arc::new(SymbolicCholesky::analyze(&lambda.pattern_union(delta))?);
    let mut alpha = 1.0;
    for backtracks in 0..=params.max_backtracks {
        let trial = if alpha == 1.0 { full.clone() } else { lambda.add_scaled(delta, alpha)? };
        if let Some((value, factor)) = evaluator.eval(&trial, &symbolic)? {
            if value.f <= current.f + params.sigma * alpha * decrease {
                return Ok(LineSearchOutcome { alpha, lambda: trial, value, factor, backtracks });
            }
        }
        alpha *= params.beta;
    }
    Err(CggmError::Numerical(format!(
        "line search failed after {} backtracks (predicted decrease {decrease:e})",
        params.max_backtracks
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::active::select_active;
    use crate::model::{grad_lambda, objective, Dataset};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(n: usize, p: usize, q: usize, seed: u64) -> (SufficientStats, CggmModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0));
        let stats = SufficientStats::from_dataset(&Dataset::center_and_scale(&x, &y).unwrap()).unwrap();
        let mut t = Vec::new();
        for i in 0..q {
            t.push((i, i, 1.5 + rng.random_range(0.0..1.0)));
            if i + 1 < q {
                let v = rng.random_range(-0.4..0.4);
                t.push((i, i + 1, v));
                t.push((i + 1, i, v));
            }
        }
        let mut tt = Vec::new();
        for i in 0..p {
            for j in 0..q {
                if rng.random_bool(0.5) {
                    tt.push((i, j, rng.random_range(-0.5..0.5)));
                }
            }
        }
        let m = CggmModel::new(SparseMatrix::from_triplets(q, q, &t).unwrap(), SparseMatrix::from_triplets(p, q, &tt).unwrap()).unwrap();
        (stats, m)
    }

    fn all_lambda(q: usize) -> ActiveSet {
        let mut a = ActiveSet::default();
        for j in 0..q {
            for i in 0..=j {
                a.lambda_coords.push((i, j));
            }
        }
        a
    }

    #[test]
    fn scalar_unpenalized_step_is_one_minus_s() {
        let s = 0.3;
        let stats = SufficientStats::new(DMatrix::from_element(2, 1, 0.5), DMatrix::from_element(1, 1, s), DMatrix::from_element(1, 1, 0.0))
            .unwrap();
        let m = CggmModel::initial(1, 1);
        let st = DerivedState::compute(&m, &stats).unwrap();
        let active = all_lambda(1);
        let hyper = Hyperparams::new(1.0, 1.0).unwrap().with_unpenalized_diagonal();
        let d = newton_direction_lambda(&m, &st, &stats, &active, &hyper, 1, None, ReductionMode::Sequential).unwrap();
        assert!((d.delta.get(0, 0) - (1.0 - s)).abs() < 1e-15);
        // one exact minimization of the scalar model -Δ + sΔ + Δ²/2
        let grid_best = (0..=2000).map(|k| k as f64 / 1000.0 - 0.5).map(|x| ((s - 1.0) * x + 0.5 * x * x, x)).fold((f64::MAX, 0.0), |a, b| if b.0 < a.0 { b } else { a });
        assert!((grid_best.1 - (1.0 - s)).abs() < 1e-3);
    }

    #[test]
    fn empty_active_set_gives_zero_direction() {
        let (stats, m) = instance(20, 2, 3, 1);
        let st = DerivedState::compute(&m, &stats).unwrap();
        let hyper = Hyperparams::new(0.1, 0.1).unwrap();
        let d = newton_direction_lambda(&m, &st, &stats, &ActiveSet::default(), &hyper, 1, None, ReductionMode::Sequential).unwrap();
        assert_eq!(d.delta.nnz(), 0);
        assert_eq!(d.grad_dot_delta, 0.0);
    }

    #[test]
    fn stationary_coordinate_does_not_move() {
        let c = LambdaCoefficients { a: 2.0, b: 0.0, c: 0.0 };
        assert_eq!(c.step(0.3), 0.0);
        assert_eq!(c.step(0.0), 0.0);
    }

    #[test]
    fn incremental_u_matches_recomputation() {
        let (stats, m) = instance(25, 3, 6, 2);
        let st = DerivedState::compute(&m, &stats).unwrap();
        let active = all_lambda(6);
        let hyper = Hyperparams::new(0.05, 0.1).unwrap();
        let mut ws = LambdaWorkspace::new(&m, &stats, &active, &hyper, ReductionMode::Sequential);
        for t in 0..6 {
            ws.load(t, st.sigma.column(t).iter().copied().collect(), st.psi.column(t).iter().copied().collect());
        }
        for k in 0..active.m_lambda() {
            ws.update(k);
            let mut delta = DMatrix::zeros(6, 6);
            for (kk, &(i, j)) in active.lambda_coords.iter().enumerate() {
                delta[(i, j)] = ws.delta[kk];
                delta[(j, i)] = ws.delta[kk];
            }
            let u = &delta * &st.sigma;
            for t in 0..6 {
                let got = ws.u_column(t).unwrap();
                for r in 0..6 {
                    assert!((got[r] - u[(r, t)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn each_update_decreases_quadratic_model() {
        for seed in 0..6 {
            let q = 3 + seed as usize;
            let (stats, m) = instance(30, 3, q, 10 + seed);
            let st = DerivedState::compute(&m, &stats).unwrap();
            let g = grad_lambda(&m, &st, &stats).unwrap();
            let active = all_lambda(q);
            let hyper = Hyperparams::new(0.1, 0.1).unwrap();
            let mut ws = LambdaWorkspace::new(&m, &stats, &active, &hyper, ReductionMode::Sequential);
            for t in 0..q {
                ws.load(t, st.sigma.column(t).iter().copied().collect(), st.psi.column(t).iter().copied().collect());
            }
            let dense = |ws: &LambdaWorkspace| {
                let mut d = DMatrix::zeros(q, q);
                for (kk, &(i, j)) in active.lambda_coords.iter().enumerate() {
                    d[(i, j)] = ws.delta[kk];
                    d[(j, i)] = ws.delta[kk];
                }
                d
            };
            let mut prev = quadratic_model_value(&m.lambda, &dense(&ws), &st, &g, &hyper);
            for _ in 0..3 {
                for k in 0..active.m_lambda() {
                    ws.update(k);
                    let d = dense(&ws);
                    assert!((&d - d.transpose()).amax() == 0.0);
                    let now = quadratic_model_value(&m.lambda, &d, &st, &g, &hyper);
                    assert!(now <= prev + 1e-12, "{now} > {prev}");
                    prev = now;
                }
            }
        }
    }

    #[test]
    fn many_passes_reach_model_minimizer() {
        let q = 5;
        let (stats, m) = instance(40, 3, q, 33);
        let st = DerivedState::compute(&m, &stats).unwrap();
        let g = grad_lambda(&m, &st, &stats).unwrap();
        let active = all_lambda(q);
        let hyper = Hyperparams::new(0.08, 0.1).unwrap();
        let d = newton_direction_lambda(&m, &st, &stats, &active, &hyper, 50, None, ReductionMode::Sequential).unwrap();
        // proximal gradient on the vectorized quadratic model over symmetric Δ
        let lam = m.lambda.to_dense();
        let s = &st.sigma;
        let psi = &st.psi;
        let grad_model = |x: &DMatrix<f64>| -> DMatrix<f64> {
            let a = s * x * s;
            let b = psi * x * s + s * x * psi;
            g.clone() + a + b
        };
        let mut x = DMatrix::zeros(q, q);
        let step = 0.05;
        for _ in 0..200_000 {
            let gm = grad_model(&x);
            let mut nx = DMatrix::zeros(q, q);
            for j in 0..q {
                for i in 0..q {
                    let w = hyper.lambda_weight(i, j);
                    let v = lam[(i, j)] + x[(i, j)] - step * gm[(i, j)];
                    nx[(i, j)] = soft_threshold(v, step * w) - lam[(i, j)];
                }
            }
            let diff = (&nx - &x).amax();
            x = nx;
            if diff < 1e-15 {
                break;
            }
        }
        let got = d.delta.to_dense();
        assert!((&got - &x).amax() < 1e-6, "{}", (&got - &x).amax());
    }

    #[test]
    fn line_search_backtracks_to_positive_definite() {
        let q = 2;
        let stats = SufficientStats::new(DMatrix::from_element(3, 1, 0.2), DMatrix::identity(q, q) * 3.0, DMatrix::zeros(1, q)).unwrap();
        let m = CggmModel::initial(1, q);
        let hyper = Hyperparams::new(1e-3, 1.0).unwrap().with_unpenalized_diagonal();
        let delta = SparseMatrix::diagonal(&[-2.0, -2.0]);
        let dir = LambdaDirection { delta, grad_dot_delta: -2.0 * 2.0 * 2.0, flagged: 0 };
        let ev = ObjectiveEvaluator::new(&m.theta, &stats, &hyper);
        let sym = Arc::new(SymbolicCholesky::analyze(&m.lambda).unwrap());
        let cur = ev.eval(&m.lambda, &sym).unwrap().unwrap().0;
        let out = line_search_lambda(&m.lambda, &dir, &cur, &ev, &hyper, &LineSearchParams::default()).unwrap();
        assert_eq!(out.alpha, 0.25);
        assert_eq!(out.backtracks, 2);
        assert!(out.value.f < cur.f);
    }

    #[test]
    fn tiny_direction_takes_full_step() {
        let (stats, m) = instance(30, 3, 4, 7);
        let st = DerivedState::compute(&m, &stats).unwrap();
        let hyper = Hyperparams::new(0.1, 0.1).unwrap();
        let active = select_active(&m, &st, &stats, &hyper).unwrap();
        let d = newton_direction_lambda(&m, &st, &stats, &active, &hyper, 1, None, ReductionMode::Sequential).unwrap();
        let small = LambdaDirection {
            delta: SparseMatrix::from_triplets(4, 4, &d.delta.iter().map(|(i, j, v)| (i, j, v * 1e-6)).collect::<Vec<_>>()).unwrap(),
            grad_dot_delta: d.grad_dot_delta * 1e-6,
            flagged: 0,
        };
        let ev = ObjectiveEvaluator::new(&m.theta, &stats, &hyper);
        let sym = Arc::new(SymbolicCholesky::analyze(&m.lambda).unwrap());
        let cur = ev.eval(&m.lambda, &sym).unwrap().unwrap().0;
        let out = line_search_lambda(&m.lambda, &small, &cur, &ev, &hyper, &LineSearchParams::default()).unwrap();
        assert_eq!(out.alpha, 1.0);
        assert!(out.value.f < cur.f);
        let f_direct = objective(&CggmModel::new(out.lambda.clone(), m.theta.clone()).unwrap(), &stats, &hyper).unwrap();
        assert!((f_direct - out.value.f).abs() < 1e-12);
        assert!(out.lambda.is_symmetric(1e-12));
    }
}
