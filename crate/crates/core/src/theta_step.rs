//! Direct coordinate descent on `Θ` with `Λ` held fixed.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::active::ActiveSet;
use crate::error::{structural, Result};
use crate::linalg::{dot, soft_threshold, ReductionMode, SparseMatrix};
use crate::model::{CggmModel, Hyperparams, SufficientStats};

/// Terms of one `Θ` coordinate problem: `a = Σ_jj (S_xx)_ii`,
/// `b = 2 (S_xy)_ij + 2 (S_xx Θ Σ)_ij`, `c = Θ_ij`.
///
/// In the change `μ` the coordinate objective reads `b μ + a μ² + λ|c + μ|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ThetaCoefficients {
    /// Exact minimizer of the coordinate objective.
    #[inline]
    pub fn step(&self, weight: f64) -> f64 {
        let two_a = 2.0 * self.a;
        -self.c + soft_threshold(self.c - self.b / two_a, weight / two_a)
    }
}

/// Counters for one or more block sweeps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ThetaCounters {
    /// `S_xx` rows computed.
    pub sxx_rows: usize,
    /// Column dot products spent on those rows.
    pub sxx_dots: usize,
    /// Coordinates forced to zero because `a` vanished.
    pub flagged: usize,
}

/// One recorded coordinate update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaUpdateRecord {
    pub i: usize,
    pub j: usize,
    pub coefficients: ThetaCoefficients,
    pub mu: f64,
}

/// Row-wise `Θ` under modification plus the counters of the sweeps applied to it.
#[derive(Debug)]
pub struct ThetaWorkspace<'a> {
    stats: &'a SufficientStats,
    hyper: Hyperparams,
    mode: ReductionMode,
    rows: Vec<Vec<(usize, f64)>>,
    q: usize,
    counters: ThetaCounters,
    record: Option<Vec<ThetaUpdateRecord>>,
}

impl<'a> ThetaWorkspace<'a> {
    pub fn new(theta: &SparseMatrix, stats: &'a SufficientStats, hyper: &Hyperparams, mode: ReductionMode) -> Self {
        let mut rows = vec![Vec::new(); theta.nrows()];
        for (i, j, v) in theta.iter() {
            rows[i].push((j, v));
        }
        for r in rows.iter_mut() {
            r.sort_by_key(|e| e.0);
        }
        ThetaWorkspace { stats, hyper: *hyper, mode, rows, q: theta.ncols(), counters: ThetaCounters::default(), record: None }
    }

    /// Keeps every update's coefficients for inspection.
    pub fn enable_recording(&mut self) {
        self.record = Some(Vec::new());
    }

    pub fn recorded(&self) -> &[ThetaUpdateRecord] {
        self.record.as_deref().unwrap_or(&[])
    }

    pub fn counters(&self) -> ThetaCounters {
        self.counters
    }

    /// Rows of `Θ` holding at least one nonzero.
    pub fn nonzero_rows(&self) -> Vec<usize> {
        self.rows.iter().enumerate().filter(|(_, r)| !r.is_empty()).map(|(i, _)| i).collect()
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        match self.rows[i].binary_search_by_key(&j, |e| e.0) {
            Ok(k) => self.rows[i][k].1,
            Err(_) => 0.0,
        }
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let row = &mut self.rows[i];
        match row.binary_search_by_key(&j, |e| e.0) {
            Ok(k) if v == 0.0 => {
                row.remove(k);
            }
            Ok(k) => row[k].1 = v,
            Err(k) if v != 0.0 => row.insert(k, (j, v)),
            Err(_) => {}
        }
    }

    pub fn theta(&self) -> SparseMatrix {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.q];
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                cols[j].push((i, v));
            }
        }
        SparseMatrix::from_columns(self.rows.len(), cols)
    }

    /// One sweep over the columns `cols`, whose `Σ` columns are `sigma` (aligned with
    /// `cols`). `work` lists, by ascending row, the active columns of that row inside the
    /// block in the order they are visited.
    pub fn sweep_block(&mut self, cols: &[usize], sigma: &[Vec<f64>], work: &[(usize, Vec<usize>)]) -> Result<()> {
        if cols.len() != sigma.len() {
            return structural("one Σ column per block column is required");
        }
        let p = self.rows.len();
        let mut local = vec![usize::MAX; self.q];
        for (l, &c) in cols.iter().enumerate() {
            local[c] = l;
        }
        // V_C = Θ Σ_C, column-major p × |C|
        let rows = &self.rows;
        let vcols: Vec<Vec<f64>> = sigma
            .par_iter()
            .map(|s| {
                let mut v = vec![0.0; p];
                for (i, r) in rows.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(j, val) in r {
                        acc += val * s[j];
                    }
                    v[i] = acc;
                }
                v
            })
            .collect();
        let mut v: Vec<f64> = vcols.concat();
        let base: Vec<usize> = self.nonzero_rows();
        let mut in_base = vec![false; p];
        for &k in &base {
            in_base[k] = true;
        }
        let mut extra: Vec<usize> = Vec::new();
        let x = self.stats.x();
        let mode = self.mode;

        for (i, js) in work {
            let i = *i;
            let xi = x.column(i);
            let xi = xi.as_slice();
            let row_vals: Vec<f64> = base.par_iter().map(|&k| dot(xi, x.column(k).as_slice(), mode)).collect();
            self.counters.sxx_rows += 1;
            self.counters.sxx_dots += base.len();
            let mut extra_vals: Vec<f64> = Vec::with_capacity(extra.len());
            for &k in &extra {
                extra_vals.push(self.sxx_entry(i, k));
            }
            let sxx_ii = self.stats.sxx_diag()[i];
            for &j in js {
                let lj = local[j];
                if lj == usize::MAX {
                    return structural(format!("column {j} is not part of the block"));
                }
                let vj = &v[lj * p..(lj + 1) * p];
                let mut gamma = 0.0;
                for (&k, &s) in base.iter().zip(&row_vals) {
                    gamma += s * vj[k];
                }
                for (&k, &s) in extra.iter().zip(&extra_vals) {
                    gamma += s * vj[k];
                }
                let coef = ThetaCoefficients {
                    a: sigma[lj][j] * sxx_ii,
                    b: 2.0 * self.stats.sxy()[(i, j)] + 2.0 * gamma,
                    c: self.get(i, j),
                };
                let mu = if !(coef.a > 0.0) || !coef.a.is_finite() {
                    self.counters.flagged += 1;
                    -coef.c
                } else {
                    coef.step(self.hyper.lambda_map)
                };
                if let Some(rec) = self.record.as_mut() {
                    rec.push(ThetaUpdateRecord { i, j, coefficients: coef, mu });
                }
                if mu == 0.0 || !mu.is_finite() {
                    continue;
                }
                self.set(i, j, coef.c + mu);
                for (l, s) in sigma.iter().enumerate() {
                    v[l * p + i] += mu * s[j];
                }
                if !in_base[i] && !extra.contains(&i) {
                    extra.push(i);
                    extra_vals.push(sxx_ii);
                }
            }
        }
        Ok(())
    }

    fn sxx_entry(&mut self, i: usize, k: usize) -> f64 {
        if i == k {
            return self.stats.sxx_diag()[i];
        }
        self.counters.sxx_dots += 1;
        let x = self.stats.x();
        dot(x.column(i).as_slice(), x.column(k).as_slice(), self.mode)
    }
}

/// Groups the active `Θ` coordinates whose column lies in `cols` by row, ascending, with
/// the columns of each row ascending.
pub fn theta_work_for_block(active: &ActiveSet, in_block: &[bool]) -> Vec<(usize, Vec<usize>)> {
    let mut coords: Vec<(usize, usize)> = active.theta_coords.iter().copied().filter(|&(_, j)| in_block[j]).collect();
    coords.sort_unstable();
    let mut work: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, j) in coords {
        match work.last_mut() {
            Some((r, js)) if *r == i => js.push(j),
            _ => work.push((i, vec![j])),
        }
    }
    work
}

/// Result of [`cd_theta_sweep`].
#[derive(Debug, Clone)]
pub struct ThetaSweep {
    pub theta: SparseMatrix,
    pub counters: ThetaCounters,
}

/// `passes` row-major sweeps over the active `Θ` coordinates with a dense `Σ`.
pub fn cd_theta_sweep(
    model: &CggmModel,
    sigma: &DMatrix<f64>,
    stats: &SufficientStats,
    active: &ActiveSet,
    hyper: &Hyperparams,
    passes: usize,
    mode: ReductionMode,
) -> Result<ThetaSweep> {
    let q = model.q();
    if sigma.nrows() != q || sigma.ncols() != q {
        return structural("Σ has the wrong shape");
    }
    let mut ws = ThetaWorkspace::new(&model.theta, stats, hyper, mode);
    let work = theta_work_for_block(active, &vec![true; q]);
    if !work.is_empty() {
        let cols: Vec<usize> = (0..q).collect();
        let sig: Vec<Vec<f64>> = (0..q).map(|t| sigma.column(t).iter().copied().collect()).collect();
        for _ in 0..passes {
            ws.sweep_block(&cols, &sig, &work)?;
        }
    }
    Ok(ThetaSweep { theta: ws.theta(), counters: ws.counters() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{objective, Dataset, DerivedState};
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
        let m = CggmModel::new(SparseMatrix::from_triplets(q, q, &t).unwrap(), SparseMatrix::zeros(p, q)).unwrap();
        (stats, m)
    }

    fn all_theta(p: usize, q: usize) -> ActiveSet {
        let mut a = ActiveSet::default();
        for j in 0..q {
            for i in 0..p {
                a.theta_coords.push((i, j));
            }
        }
        a
    }

    #[test]
    fn huge_penalty_zeroes_theta() {
        let (stats, mut m) = instance(30, 4, 3, 1);
        m.theta = SparseMatrix::from_dense(&DMatrix::from_element(4, 3, 0.3), 0.0);
        let st = DerivedState::compute(&m, &stats).unwrap();
        let hyper = Hyperparams::new(0.1, 1e3).unwrap();
        let out = cd_theta_sweep(&m, &st.sigma, &stats, &all_theta(4, 3), &hyper, 1, ReductionMode::Sequential).unwrap();
        assert_eq!(out.theta.nnz(), 0);
    }

    #[test]
    fn scalar_lasso_closed_form() {
        let (sxy, sxx, sig, lam) = (0.8, 1.7, 0.6, 0.3);
        let x = DMatrix::from_column_slice(2, 1, &[(sxx / 2.0f64).sqrt(), -(sxx / 2.0f64).sqrt()]);
        let stats = SufficientStats::new(x, DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, sxy)).unwrap();
        let m = CggmModel::new(SparseMatrix::diagonal(&[1.0 / sig]), SparseMatrix::zeros(1, 1)).unwrap();
        let st = DerivedState::compute(&m, &stats).unwrap();
        let hyper = Hyperparams::new(0.1, lam).unwrap();
        let out = cd_theta_sweep(&m, &st.sigma, &stats, &all_theta(1, 1), &hyper, 1, ReductionMode::Sequential).unwrap();
        // minimize 2 s_xy θ + σ s_xx θ² + λ|θ|
        let want = soft_threshold(-2.0 * sxy, lam) / (2.0 * sig * sxx);
        assert!((out.theta.get(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn zero_theta_first_update_uses_sxy_only() {
        let (stats, m) = instance(20, 3, 2, 4);
        let st = DerivedState::compute(&m, &stats).unwrap();
        let hyper = Hyperparams::new(0.1, 0.05).unwrap();
        let mut ws = ThetaWorkspace::new(&m.theta, &stats, &hyper, ReductionMode::Sequential);
        ws.enable_recording();
        let sig: Vec<Vec<f64>> = (0..2).map(|t| st.sigma.column(t).iter().copied().collect()).collect();
        ws.sweep_block(&[0, 1], &sig, &[(1, vec![0])]).unwrap();
        let rec = ws.recorded()[0];
        assert_eq!(rec.coefficients.b, 2.0 * stats.sxy()[(1, 0)]);
        assert_eq!(rec.coefficients.c, 0.0);
        assert_eq!(ws.counters().sxx_dots, 0);
    }

    #[test]
    fn inside_band_does_not_move() {
        let c = ThetaCoefficients { a: 1.0, b: 0.1, c: 0.0 };
        assert_eq!(c.step(0.5), 0.0);
    }

    #[test]
    fn updates_decrease_objective_and_keep_v_consistent() {
        for seed in 0..5 {
            let (p, q) = (3 + seed as usize, 2 + seed as usize);
            let (stats, m) = instance(30, p, q, 20 + seed);
            let st = DerivedState::compute(&m, &stats).unwrap();
            let hyper = Hyperparams::new(0.1, 0.05).unwrap();
            let active = all_theta(p, q);
            let mut ws = ThetaWorkspace::new(&m.theta, &stats, &hyper, ReductionMode::Sequential);
            ws.enable_recording();
            let sig: Vec<Vec<f64>> = (0..q).map(|t| st.sigma.column(t).iter().copied().collect()).collect();
            let work = theta_work_for_block(&active, &vec![true; q]);
            let mut prev = objective(&m, &stats, &hyper).unwrap();
            for (i, js) in &work {
                for &j in js {
                    ws.sweep_block(&(0..q).collect::<Vec<_>>(), &sig, &[(*i, vec![j])]).unwrap();
                    let mm = CggmModel::new(m.lambda.clone(), ws.theta()).unwrap();
                    let now = objective(&mm, &stats, &hyper).unwrap();
                    assert!(now <= prev + 1e-12);
                    prev = now;
                    // b recomputed from scratch matches the incremental one used in the next visit
                    let v = ws.theta().to_dense() * &st.sigma;
                    let sxx = stats.x().transpose() * stats.x();
                    let gamma = &sxx * &v;
                    let fresh = 2.0 * stats.sxy()[(*i, j)] + 2.0 * gamma[(*i, j)];
                    let mut probe = ThetaWorkspace::new(&ws.theta(), &stats, &hyper, ReductionMode::Sequential);
                    probe.enable_recording();
                    probe.sweep_block(&(0..q).collect::<Vec<_>>(), &sig, &[(*i, vec![j])]).unwrap();
                    assert!((probe.recorded()[0].coefficients.b - fresh).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn repeated_sweeps_reach_quadratic_lasso_minimizer() {
        let (p, q) = (6, 5);
        let (stats, m) = instance(40, p, q, 77);
        let st = DerivedState::compute(&m, &stats).unwrap();
        let hyper = Hyperparams::new(0.1, 0.04).unwrap();
        let out = cd_theta_sweep(&m, &st.sigma, &stats, &all_theta(p, q), &hyper, 100, ReductionMode::Sequential).unwrap();
        // proximal gradient on 2tr(S_xyᵀΘ) + tr(ΣΘᵀS_xxΘ) + λ‖Θ‖₁
        let sxx = stats.x().transpose() * stats.x();
        let s = &st.sigma;
        let lip = 2.0 * sxx.clone().symmetric_eigen().eigenvalues.amax() * s.clone().symmetric_eigen().eigenvalues.amax();
        let step = 1.0 / lip;
        let mut th = DMatrix::zeros(p, q);
        for _ in 0..100_000 {
            let g = stats.sxy() * 2.0 + &sxx * &th * s * 2.0;
            let nt = (&th - g * step).map(|v| soft_threshold(v, step * hyper.lambda_map));
            let d = (&nt - &th).amax();
            th = nt;
            if d < 1e-16 {
                break;
            }
        }
        assert!((out.theta.to_dense() - th).amax() < 1e-7);
    }

    #[test]
    fn restricted_rows_spend_p_tilde_dots() {
        let (stats, mut m) = instance(30, 8, 3, 5);
        m.theta = SparseMatrix::from_triplets(8, 3, &[(1, 0, 0.2), (4, 1, -0.1), (6, 2, 0.3)]).unwrap();
        let st = DerivedState::compute(&m, &stats).unwrap();
        let hyper = Hyperparams::new(0.1, 1e-6).unwrap();
        let mut active = ActiveSet::default();
        active.theta_coords = vec![(1, 0), (4, 1), (6, 2)];
        let out = cd_theta_sweep(&m, &st.sigma, &stats, &active, &hyper, 1, ReductionMode::Sequential).unwrap();
        assert_eq!(out.counters.sxx_rows, 3);
        assert_eq!(out.counters.sxx_dots, 3 * 3);
    }
}
