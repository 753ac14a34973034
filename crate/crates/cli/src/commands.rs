//! Subcommands: `generate`, `fit` and `evaluate`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cggm::block::{parse_byte_size, MemoryBudget};
use cggm::datagen::{f1_structure, gen_chain, gen_clustered, gen_clustered_with, sample, F1Score, GroundTruth};
use cggm::linalg::ReductionMode;
use cggm::oracle::{prox_grad_fit, OracleConfig};
use cggm::solver::{fit, FitStatus, Mode, SolverConfig};
use cggm::{CggmModel, Dataset, Hyperparams};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::error::{exit, CliError, CliResult};
use crate::formats::{read_mtx, read_tsv, write_mtx, write_trace, write_tsv, Symmetry};
use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "cggm", version, about = "Sparse conditional Gaussian graphical models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic problem and its samples.
    Generate {
        #[command(subcommand)]
        kind: GenerateKind,
    },
    /// Fit `Λ` and `Θ` to a dataset.
    Fit(FitArgs),
    /// Score estimated supports against the truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Subcommand)]
pub enum GenerateKind {
    /// Chain network over the outputs, `Θ = I` on the first `q` inputs.
    Chain {
        #[arg(long)]
        q: usize,
        /// Inputs beyond the `q` connected ones.
        #[arg(long, default_value_t = 0)]
        extra_inputs: usize,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[command(flatten)]
        common: GenerateCommon,
    },
    /// Random clustered network.
    Clustered {
        #[arg(long)]
        p: usize,
        #[arg(long)]
        q: usize,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        cluster_size: Option<usize>,
        #[command(flatten)]
        common: GenerateCommon,
    },
}

#[derive(Debug, Args)]
pub struct GenerateCommon {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverKind {
    Newton,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    InMemory,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReductionArg {
    Sequential,
    Fast,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long)]
    pub lambda_net: f64,
    #[arg(long)]
    pub lambda_map: f64,
    /// Leave the diagonal of `Λ` unpenalized.
    #[arg(long)]
    pub unpenalized_diagonal: bool,
    /// Stop once the minimum-norm subgradient falls below `tol · (‖Λ‖₁ + ‖Θ‖₁)`.
    #[arg(long, default_value_t = 0.01)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, value_enum, default_value_t = SolverKind::Newton)]
    pub solver: SolverKind,
    #[arg(long, value_enum, default_value_t = ModeArg::InMemory)]
    pub mode: ModeArg,
    /// Cache budget for block mode, e.g. `64MB` or `1.5GiB`.
    #[arg(long)]
    pub mem_budget: Option<String>,
    #[arg(long)]
    pub k_lambda: Option<usize>,
    #[arg(long)]
    pub k_theta: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, value_enum, default_value_t = ReductionArg::Sequential)]
    pub reduction: ReductionArg,
    #[arg(long, default_value_t = 1)]
    pub cd_passes: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub cg_tol: f64,
    /// Seed for block partitioning.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub lambda: PathBuf,
    #[arg(long)]
    pub truth_lambda: PathBuf,
    #[arg(long, requires = "truth_theta")]
    pub theta: Option<PathBuf>,
    #[arg(long, requires = "theta")]
    pub truth_theta: Option<PathBuf>,
    /// Count the diagonal of `Λ` as edges.
    #[arg(long)]
    pub include_diagonal: bool,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub lambda: F1Score,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<F1Score>,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> CliResult<u8> {
    match cli.command {
        Command::Generate { kind } => generate(kind).map(|_| exit::SUCCESS),
        Command::Fit(args) => run_fit(&args),
        Command::Evaluate(args) => {
            let report = evaluate(&args)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
            println!("{text}");
            if let Some(path) = &args.out {
                std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))?;
            }
            Ok(exit::SUCCESS)
        }
    }
}

fn make_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn generate(kind: GenerateKind) -> CliResult<()> {
    let start = Instant::now();
    let (truth, n, common): (GroundTruth, usize, GenerateCommon) = match kind {
        GenerateKind::Chain { q, extra_inputs, n, common } => (gen_chain(q, extra_inputs)?, n, common),
        GenerateKind::Clustered { p, q, n, cluster_size, common } => {
            let truth = match cluster_size {
                Some(cs) => gen_clustered_with(p, q, common.seed, cs)?,
                None => gen_clustered(p, q, common.seed)?,
            };
            (truth, n, common)
        }
    };
    let samples = sample(&truth, n, common.seed)?;
    let dir = &common.out;
    make_dir(dir)?;
    write_tsv(&dir.join("X.tsv"), &samples.x, "x")?;
    write_tsv(&dir.join("Y.tsv"), &samples.y, "y")?;
    write_mtx(&dir.join("truth_lambda.mtx"), &truth.lambda, Symmetry::Symmetric)?;
    write_mtx(&dir.join("truth_theta.mtx"), &truth.theta, Symmetry::General)?;
    let config = json!({ "generator": truth.descriptor, "n": n, "p": truth.p(), "q": truth.q() });
    let mut m = RunManifest::new("generate", config, Some(common.seed));
    m.result = json!({ "lambda_nnz": truth.lambda.nnz(), "theta_nnz": truth.theta.nnz() });
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(dir, &["X.tsv", "Y.tsv", "truth_lambda.mtx", "truth_theta.mtx"])
}

/// Solver configuration described by the flags.
pub fn solver_config(args: &FitArgs) -> CliResult<SolverConfig> {
    let mut hyper = Hyperparams::new(args.lambda_net, args.lambda_map)?;
    if args.unpenalized_diagonal {
        hyper = hyper.with_unpenalized_diagonal();
    }
    let budget = MemoryBudget {
        bytes: args.mem_budget.as_deref().map(parse_byte_size).transpose()?,
        k_lambda: args.k_lambda,
        k_theta: args.k_theta,
    };
    let cfg = SolverConfig {
        tol: args.tol,
        max_outer_iters: args.max_iters,
        cd_passes: args.cd_passes,
        mode: match args.mode {
            ModeArg::InMemory => Mode::InMemory,
            ModeArg::Block => Mode::Block,
        },
        budget,
        threads: args.threads,
        seed: args.seed,
        reduction: match args.reduction {
            ReductionArg::Sequential => ReductionMode::Sequential,
            ReductionArg::Fast => ReductionMode::Fast,
        },
        cg_tol: args.cg_tol,
        ..SolverConfig::new(hyper)
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(args: &FitArgs) -> CliResult<Dataset> {
    let (x, y) = (read_tsv(&args.x)?, read_tsv(&args.y)?);
    if x.nrows() != y.nrows() {
        return Err(CliError::Data(format!("X has {} rows but Y has {}", x.nrows(), y.nrows())));
    }
    Ok(Dataset::center_and_scale(&x, &y)?)
}

fn write_model(dir: &Path, model: &CggmModel) -> CliResult<()> {
    write_mtx(&dir.join("lambda.mtx"), &model.lambda, Symmetry::Symmetric)?;
    write_mtx(&dir.join("theta.mtx"), &model.theta, Symmetry::General)
}

fn run_fit(args: &FitArgs) -> CliResult<u8> {
    let start = Instant::now();
    let cfg = solver_config(args)?;
    let data = load_dataset(args)?;
    let dir = &args.out;
    let mut config = serde_json::to_value(&cfg).map_err(|e| CliError::Data(e.to_string()))?;
    config["solver"] = json!(match args.solver {
        SolverKind::Newton => "newton",
        SolverKind::Oracle => "oracle",
    });
    let mut manifest = RunManifest::new("fit", config, Some(cfg.seed));
    manifest.add_input(&args.x)?;
    manifest.add_input(&args.y)?;
    let code = match args.solver {
        SolverKind::Newton => {
            let res = fit(&data, &cfg)?;
            make_dir(dir)?;
            write_model(dir, &res.model)?;
            write_trace(&dir.join("trace.jsonl"), &res.trace)?;
            manifest.result = json!({
                "status": res.status,
                "message": res.message,
                "objective": res.objective(),
                "iterations": res.trace.len(),
                "plan": res.plan,
                "cache": {
                    "lambda_sigma_cols": res.cache.lambda_sigma_cols,
                    "lambda_psi_cols": res.cache.lambda_psi_cols,
                    "lambda_offdiag_cols": res.cache.lambda_offdiag_cols,
                    "theta_sigma_cols": res.cache.theta_sigma_cols,
                    "sxx_rows": res.cache.sxx_rows,
                    "lambda_high_water": res.cache.lambda_high_water,
                    "theta_high_water": res.cache.theta_high_water,
                },
            });
            match res.status {
                FitStatus::Converged => exit::SUCCESS,
                FitStatus::MaxIterations => exit::NOT_CONVERGED,
                FitStatus::LineSearchFailed | FitStatus::Numerical => exit::NUMERICAL,
            }
        }
        SolverKind::Oracle => {
            let ocfg = OracleConfig { tol: cfg.tol, ..OracleConfig::default() };
            let res = prox_grad_fit(&data, &cfg.hyper, &ocfg)?;
            make_dir(dir)?;
            write_model(dir, &res.model)?;
            write_trace(&dir.join("trace.jsonl"), &[])?;
            manifest.result = json!({
                "converged": res.converged,
                "objective": res.objective,
                "subgrad": res.subgrad,
                "iterations": res.iterations,
            });
            if res.converged {
                exit::SUCCESS
            } else {
                exit::NOT_CONVERGED
            }
        }
    };
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    manifest.write(dir, &["lambda.mtx", "theta.mtx", "trace.jsonl"])?;
    Ok(code)
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<EvaluationReport> {
    let score = |est: &Path, truth: &Path, ignore_diag: bool| -> CliResult<F1Score> {
        Ok(f1_structure(&read_mtx(est)?, &read_mtx(truth)?, ignore_diag)?)
    };
    let lambda = score(&args.lambda, &args.truth_lambda, !args.include_diagonal)?;
    let theta = match (&args.theta, &args.truth_theta) {
        (Some(e), Some(t)) => Some(score(e, t, false)?),
        _ => None,
    };
    Ok(EvaluationReport { lambda, theta })
}
