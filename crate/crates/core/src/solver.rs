//! Outer loop of alternating Newton coordinate descent, in memory or block-wise.

use std::time::Instant;

use rayon::ThreadPoolBuilder;
use serde::{Deserialize, Serialize};

use crate::active::{select_from_gradients, ActiveSet};
use crate::block::{
    active_theta_rows, block_cd_theta, block_gradient_pass, block_newton_lambda, partition_lambda, partition_theta, BlockPlan, CacheStats, CgColumns,
    MemoryBudget,
};
use crate::error::{config, CggmError, Result};
use crate::lambda_step::{line_search_lambda, newton_direction_lambda, LambdaDirection, LineSearchParams};
use crate::linalg::{CholeskyFactor, ReductionMode};
use crate::model::{
    dense_inverse, grad_lambda, grad_theta, min_norm_subgradient, subgradient_from_gradients, CggmModel, Dataset, DerivedState,
    Hyperparams, ObjectiveEvaluator, ObjectiveValue, SufficientStats,
};
use crate::theta_step::cd_theta_sweep;

/// Where `Σ` and `Ψ` live during a fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Dense `Σ`, `Ψ` rebuilt once per outer iteration.
    #[default]
    InMemory,
    /// Columns computed on demand by conjugate gradient under a memory budget.
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub hyper: Hyperparams,
    /// Stop once the subgradient statistic falls below `tol · (‖Λ‖₁ + ‖Θ‖₁)`.
    pub tol: f64,
    pub max_outer_iters: usize,
    /// Coordinate-descent sweeps per phase and outer iteration.
    pub cd_passes: usize,
    pub line_search: LineSearchParams,
    pub mode: Mode,
    pub budget: MemoryBudget,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub seed: u64,
    pub reduction: ReductionMode,
    /// Relative residual for conjugate-gradient column solves.
    pub cg_tol: f64,
}

impl SolverConfig {
    pub fn new(hyper: Hyperparams) -> Self {
        SolverConfig {
            hyper,
            tol: 0.01,
            max_outer_iters: 200,
            cd_passes: 1,
            line_search: LineSearchParams::default(),
            mode: Mode::InMemory,
            budget: MemoryBudget::default(),
            threads: 0,
            seed: 0,
            reduction: ReductionMode::Sequential,
            cg_tol: 1e-9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.line_search.validate()?;
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return config(format!("tol must be positive and finite, got {}", self.tol));
        }
        if self.max_outer_iters == 0 || self.cd_passes == 0 {
            return config("max_outer_iters and cd_passes must be at least 1");
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return config(format!("cg_tol must lie in (0, 1), got {}", self.cg_tol));
        }
        Ok(())
    }
}

/// How a fit ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    Numerical,
}

/// One outer iteration, recorded after its `Θ` step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub f: f64,
    pub g: f64,
    pub subgrad: f64,
    pub m_lambda: usize,
    pub m_theta: usize,
    pub alpha: f64,
    pub sigma_cols: usize,
    pub psi_cols: usize,
    pub sxx_rows: usize,
    pub seconds: f64,
    /// `‖Λ‖₁ + ‖Θ‖₁` at the recorded iterate.
    #[serde(skip)]
    pub param_l1: f64,
    #[serde(skip)]
    pub cache: CacheStats,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: CggmModel,
    pub trace: Vec<TraceEntry>,
    pub status: FitStatus,
    pub message: Option<String>,
    /// Objective at `Λ = I`, `Θ = 0`.
    pub initial_objective: f64,
    /// Counters summed over iterations; high-water marks are maxima.
    pub cache: CacheStats,
    pub plan: Option<BlockPlan>,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.status == FitStatus::Converged
    }

    pub fn objective(&self) -> f64 {
        self.trace.last().map_or(self.initial_objective, |t| t.f)
    }
}

/// `‖grad^S‖₁ < tol · (‖Λ‖₁ + ‖Θ‖₁)`.
pub fn should_stop(model: &CggmModel, state: &DerivedState, stats: &SufficientStats, hyper: &Hyperparams, tol: f64) -> Result<bool> {
    Ok(min_norm_subgradient(model, state, stats, hyper)? < tol * model.param_l1())
}

/// Fits a model to a centered and scaled dataset.
pub fn fit(data: &Dataset, cfg: &SolverConfig) -> Result<FitResult> {
    fit_stats(&SufficientStats::from_dataset(data)?, cfg)
}

/// Fits a model from sufficient statistics, starting at `Λ = I`, `Θ = 0`.
pub fn fit_stats(stats: &SufficientStats, cfg: &SolverConfig) -> Result<FitResult> {
    cfg.validate()?;
    let pool = ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CggmError::Config(format!("thread pool: {e}")))?;
    pool.install(|| Solver::new(stats, cfg)?.run())
}

struct Step {
    active: ActiveSet,
    subgrad: f64,
}

struct Solver<'a> {
    stats: &'a SufficientStats,
    cfg: &'a SolverConfig,
    plan: Option<BlockPlan>,
    model: CggmModel,
    factor: CholeskyFactor,
    value: ObjectiveValue,
    state: Option<DerivedState>,
}

enum Stop {
    Status(FitStatus, String),
    Fail(CggmError),
}

impl From<CggmError> for Stop {
    fn from(e: CggmError) -> Self {
        match e {
            CggmError::Numerical(m) => Stop::Status(FitStatus::Numerical, m),
            other => Stop::Fail(other),
        }
    }
}

impl<'a> Solver<'a> {
    fn new(stats: &'a SufficientStats, cfg: &'a SolverConfig) -> Result<Self> {
        let (p, q) = (stats.p(), stats.q());
        let plan = match cfg.mode {
            Mode::InMemory => None,
            Mode::Block => Some(cfg.budget.plan(p, q)?),
        };
        let model = CggmModel::initial(p, q);
        let factor = CholeskyFactor::new(&model.lambda)?.ok_or(CggmError::NotPositiveDefinite)?;
        let value = ObjectiveEvaluator::new(&model.theta, stats, &cfg.hyper).eval_with_factor(&model.lambda, &factor);
        Ok(Solver { stats, cfg, plan, model, factor, value, state: None })
    }

    fn run(mut self) -> Result<FitResult> {
        let start = Instant::now();
        let initial_objective = self.value.f;
        let mut trace = Vec::new();
        let mut total = CacheStats::default();
        let outcome = (|| -> std::result::Result<FitStatus, Stop> {
            let mut step = self.gradient_step()?;
            for iter in 1..=self.cfg.max_outer_iters {
                let (alpha, cs) = self.iterate(&step.active)?;
                let (m_lambda, m_theta) = (step.active.m_lambda(), step.active.m_theta());
                step = self.gradient_step()?;
                total.merge(&cs);
                let param_l1 = self.model.param_l1();
                trace.push(TraceEntry {
                    iter,
                    f: self.value.f,
                    g: self.value.g,
                    subgrad: step.subgrad,
                    m_lambda,
                    m_theta,
                    alpha,
                    sigma_cols: cs.lambda_sigma_cols + cs.theta_sigma_cols,
                    psi_cols: cs.lambda_psi_cols,
                    sxx_rows: cs.sxx_rows,
                    seconds: start.elapsed().as_secs_f64(),
                    param_l1,
                    cache: cs,
                });
                if step.subgrad < self.cfg.tol * param_l1 {
                    return Ok(FitStatus::Converged);
                }
            }
            Ok(FitStatus::MaxIterations)
        })();
        let (status, message) = match outcome {
            Ok(s) => (s, None),
            Err(Stop::Status(s, m)) => (s, Some(m)),
            Err(Stop::Fail(e)) => return Err(e),
        };
        Ok(FitResult { model: self.model, trace, status, message, initial_objective, cache: total, plan: self.plan })
    }

    /// Active set and subgradient statistic at the current iterate.
    fn gradient_step(&mut self) -> Result<Step> {
        let (stats, hyper) = (self.stats, &self.cfg.hyper);
        match self.plan {
            None => {
                let state = match self.state.take() {
                    Some(s) => s,
                    None => DerivedState::with_sigma(&self.model, stats, dense_inverse(&self.factor), self.factor.logdet()),
                };
                let gl = grad_lambda(&self.model, &state, stats)?;
                let gt = grad_theta(&self.model, &state, stats)?;
                let step = Step {
                    active: select_from_gradients(&self.model, &gl, &gt, stats, hyper),
                    subgrad: subgradient_from_gradients(&self.model, &gl, &gt, hyper),
                };
                self.state = Some(state);
                Ok(step)
            }
            Some(plan) => {
                let src = CgColumns::new(&self.model.lambda, &self.model.theta, stats.x(), self.cfg.cg_tol);
                let pass = block_gradient_pass(&self.model, stats, hyper, &src, plan.lambda_capacity)?;
                Ok(Step { active: pass.active, subgrad: pass.subgrad })
            }
        }
    }

    /// One `Λ` step and one `Θ` step; returns the step size and the work counters.
    fn iterate(&mut self, active: &ActiveSet) -> std::result::Result<(f64, CacheStats), Stop> {
        let (stats, cfg) = (self.stats, self.cfg);
        let (p, q) = (stats.p(), stats.q());
        let mut cs = CacheStats::default();

        let direction: LambdaDirection = match self.plan {
            None => {
                let state = self.state.as_ref().expect("state of the current iterate");
                cs.lambda_sigma_cols = q;
                cs.lambda_psi_cols = q;
                newton_direction_lambda(&self.model, state, stats, active, &cfg.hyper, cfg.cd_passes, None, cfg.reduction)?
            }
            Some(plan) => {
                let part = partition_lambda(active, q, plan.k_lambda, cfg.seed)?;
                let src = CgColumns::new(&self.model.lambda, &self.model.theta, stats.x(), cfg.cg_tol);
                let res = block_newton_lambda(
                    &self.model,
                    stats,
                    active,
                    &cfg.hyper,
                    &part,
                    &src,
                    plan.lambda_capacity,
                    cfg.cd_passes,
                    cfg.reduction,
                )?;
                cs.merge(&res.stats);
                res.direction
            }
        };
        self.state = None;

        let mut alpha = 0.0;
        let full = self.model.lambda.add_scaled(&direction.delta, 1.0)?;
        let decrease = direction.grad_dot_delta + cfg.hyper.lambda_penalty(&full) - cfg.hyper.lambda_penalty(&self.model.lambda);
        if direction.delta.nnz() > 0 && decrease < 0.0 {
            let evaluator = ObjectiveEvaluator::new(&self.model.theta, stats, &cfg.hyper);
            let out = line_search_lambda(&self.model.lambda, &direction, &self.value, &evaluator, &cfg.hyper, &cfg.line_search)
                .map_err(|e| match e {
                    CggmError::Numerical(m) => Stop::Status(FitStatus::LineSearchFailed, m),
                    other => Stop::Fail(other),
                })?;
            alpha = out.alpha;
            self.model.lambda = out.lambda;
            self.factor = out.factor;
            self.value = out.value;
        }

        let (theta, sigma) = match self.plan {
            None => {
                let sigma = dense_inverse(&self.factor);
                let sweep = cd_theta_sweep(&self.model, &sigma, stats, active, &cfg.hyper, cfg.cd_passes, cfg.reduction)?;
                cs.sxx_rows += sweep.counters.sxx_rows;
                cs.sxx_dots += sweep.counters.sxx_dots;
                cs.flagged += sweep.counters.flagged;
                cs.theta_sigma_cols += q;
                cs.theta_rows += cfg.cd_passes * active_theta_rows(active);
                (sweep.theta, Some(sigma))
            }
            Some(plan) => {
                let part = partition_theta(active, p, q, plan.k_theta, cfg.seed)?;
                let src = CgColumns::new(&self.model.lambda, &self.model.theta, stats.x(), cfg.cg_tol);
                let res = block_cd_theta(&self.model.theta, stats, active, &cfg.hyper, &part, &src, plan.theta_capacity, cfg.cd_passes, cfg.reduction)?;
                cs.merge(&res.stats);
                (res.theta, None)
            }
        };
        let value = ObjectiveEvaluator::new(&theta, stats, &cfg.hyper).eval_with_factor(&self.model.lambda, &self.factor);
        // exact coordinate minimization cannot raise f; rounding or CG error can
        if value.f <= self.value.f {
            self.model.theta = theta;
            self.value = value;
        }
        if let Some(sigma) = sigma {
            self.state = Some(DerivedState::with_sigma(&self.model, stats, sigma, self.factor.logdet()));
        }
        Ok((alpha, cs))
    }
}
