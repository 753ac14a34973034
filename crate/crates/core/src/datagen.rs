//! Synthetic ground truths, sampling, and structure-recovery scoring.

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, structural, CggmError, Result};
use crate::linalg::{CholeskyFactor, SparseMatrix};

/// Parameters that, with the seed, determine a generated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorDescriptor {
    Chain { q: usize, extra_inputs: usize },
    Clustered { p: usize, q: usize, seed: u64, cluster_size: usize, active_rows: usize },
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub lambda: SparseMatrix,
    pub theta: SparseMatrix,
    pub descriptor: GeneratorDescriptor,
}

impl GroundTruth {
    pub fn p(&self) -> usize {
        self.theta.nrows()
    }

    pub fn q(&self) -> usize {
        self.lambda.nrows()
    }
}

/// Chain network: `Λ_ii = 2.25`, `Λ_{i,i±1} = 1`, `Θ_ii = 1` for `i < q`, and
/// `extra_inputs` further inputs connected to nothing.
pub fn gen_chain(q: usize, extra_inputs: usize) -> Result<GroundTruth> {
    if q < 2 {
        return config(format!("chain needs q ≥ 2, got {q}"));
    }
    let mut t = Vec::with_capacity(3 * q);
    for i in 0..q {
        t.push((i, i, 2.25));
        if i + 1 < q {
            t.push((i, i + 1, 1.0));
            t.push((i + 1, i, 1.0));
        }
    }
    let p = q + extra_inputs;
    let th: Vec<(usize, usize, f64)> = (0..q).map(|i| (i, i, 1.0)).collect();
    Ok(GroundTruth {
        lambda: SparseMatrix::from_triplets(q, q, &t)?,
        theta: SparseMatrix::from_triplets(p, q, &th)?,
        descriptor: GeneratorDescriptor::Chain { q, extra_inputs },
    })
}

/// Default cluster size: 250, or for `q < 250` the divisor of `q` closest to
/// `max(25, q/2)` (ties go to the smaller divisor).
pub fn default_cluster_size(q: usize) -> usize {
    if q >= 250 {
        return 250;
    }
    let target = 25.max(q / 2) as i64;
    (1..=q.max(1)).filter(|d| q % d == 0).min_by_key(|&d| ((d as i64 - target).abs(), d)).unwrap_or(1)
}

/// Clustered random network with the default cluster size.
pub fn gen_clustered(p: usize, q: usize, seed: u64) -> Result<GroundTruth> {
    gen_clustered_with(p, q, seed, default_cluster_size(q))
}

/// Clustered random network: `5q` unit-weight edges (average degree 10), 90% of them
/// inside clusters of `cluster_size` randomly assigned outputs, diagonal set to the row
/// absolute sum plus one. `Θ` has `min(round(100√p), p)` active rows carrying `10q` unit
/// entries, each active row holding at least one.
pub fn gen_clustered_with(p: usize, q: usize, seed: u64, cluster_size: usize) -> Result<GroundTruth> {
    if q < 2 || p == 0 || cluster_size == 0 {
        return config("clustered generator needs q ≥ 2, p ≥ 1 and a positive cluster size");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<usize> = (0..q).collect();
    nodes.shuffle(&mut rng);
    let clusters: Vec<&[usize]> = nodes.chunks(cluster_size).collect();
    let mut cluster_of = vec![0; q];
    for (c, members) in clusters.iter().enumerate() {
        for &v in *members {
            cluster_of[v] = c;
        }
    }

    let total = 5 * q;
    let all_pairs = q * (q - 1) / 2;
    if total > all_pairs {
        return config(format!("{total} edges requested but only {all_pairs} pairs exist at q = {q}"));
    }
    let intra_pairs: usize = clusters.iter().map(|c| c.len() * (c.len().saturating_sub(1)) / 2).sum();
    let inter_pairs = all_pairs - intra_pairs;
    let mut inter = total - (0.9 * total as f64).round() as usize;
    inter = inter.min(inter_pairs);
    let mut intra = total - inter;
    if intra > intra_pairs {
        let move_out = intra - intra_pairs;
        intra = intra_pairs;
        inter += move_out;
    }

    let mut edges = std::collections::BTreeSet::new();
    let weights: Vec<usize> = clusters.iter().map(|c| c.len() * (c.len().saturating_sub(1)) / 2).collect();
    let dist = rand::distr::weighted::WeightedIndex::new(weights.iter().map(|&w| w as f64)).ok();
    while edges.len() < intra {
        let Some(d) = dist.as_ref() else { break };
        let c = rng.sample(d);
        let m = clusters[c];
        let pick = index::sample(&mut rng, m.len(), 2);
        let (a, b) = (m[pick.index(0)], m[pick.index(1)]);
        edges.insert((a.min(b), a.max(b)));
    }
    let mut n_inter = 0;
    while n_inter < inter {
        let (a, b) = (rng.random_range(0..q), rng.random_range(0..q));
        if a == b || cluster_of[a] == cluster_of[b] {
            continue;
        }
        if edges.insert((a.min(b), a.max(b))) {
            n_inter += 1;
        }
    }

    let mut rowsum = vec![0.0; q];
    let mut t = Vec::with_capacity(2 * total + q);
    for &(a, b) in &edges {
        t.push((a, b, 1.0));
        t.push((b, a, 1.0));
        rowsum[a] += 1.0;
        rowsum[b] += 1.0;
    }
    for (i, s) in rowsum.iter().enumerate() {
        t.push((i, i, s + 1.0));
    }

    let active_rows = ((100.0 * (p as f64).sqrt()).round() as usize).min(p);
    let nnz = 10 * q;
    if nnz > active_rows * q || active_rows > nnz {
        return config(format!("cannot place {nnz} Θ entries on {active_rows} rows of {q} columns"));
    }
    let rows: Vec<usize> = index::sample(&mut rng, p, active_rows).into_vec();
    let mut theta_set = std::collections::BTreeSet::new();
    for &r in &rows {
        theta_set.insert((r, rng.random_range(0..q)));
    }
    while theta_set.len() < nnz {
        let r = rows[rng.random_range(0..active_rows)];
        theta_set.insert((r, rng.random_range(0..q)));
    }
    let th: Vec<(usize, usize, f64)> = theta_set.into_iter().map(|(i, j)| (i, j, 1.0)).collect();
    Ok(GroundTruth {
        lambda: SparseMatrix::from_triplets(q, q, &t)?,
        theta: SparseMatrix::from_triplets(p, q, &th)?,
        descriptor: GeneratorDescriptor::Clustered { p, q, seed, cluster_size, active_rows },
    })
}

/// Cluster of each output as assigned by [`gen_clustered_with`] for the same arguments.
pub fn cluster_assignment(q: usize, seed: u64, cluster_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<usize> = (0..q).collect();
    nodes.shuffle(&mut rng);
    let mut out = vec![0; q];
    for (c, members) in nodes.chunks(cluster_size.max(1)).enumerate() {
        for &v in members {
            out[v] = c;
        }
    }
    out
}

/// Raw (uncentered) samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSamples {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

/// `n` draws with `x ~ N(0, I)` and `y | x ~ N(−Λ⁻¹Θᵀx, Λ⁻¹)`.
pub fn sample(truth: &GroundTruth, n: usize, seed: u64) -> Result<RawSamples> {
    if n < 2 {
        return config(format!("need at least 2 samples, got {n}"));
    }
    let (p, q) = (truth.p(), truth.q());
    let fac = CholeskyFactor::new(&truth.lambda)?.ok_or(CggmError::NotPositiveDefinite)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, p);
    let mut y = DMatrix::zeros(n, q);
    let mut xi = vec![0.0; p];
    let mut z = vec![0.0; q];
    for s in 0..n {
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mean = fac.solve(&truth.theta.tr_mul_vec(&xi));
        let noise = fac.whiten_inverse(&z);
        for j in 0..p {
            x[(s, j)] = xi[j];
        }
        for j in 0..q {
            y[(s, j)] = noise[j] - mean[j];
        }
    }
    Ok(RawSamples { x, y })
}

/// Support-recovery scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of the nonzero pattern of `estimated` against `truth`.
/// An empty estimate has precision 0; an empty truth has recall 1 when the estimate is
/// also empty and 0 otherwise.
pub fn f1_structure(estimated: &SparseMatrix, truth: &SparseMatrix, ignore_diagonal: bool) -> Result<F1Score> {
    if estimated.nrows() != truth.nrows() || estimated.ncols() != truth.ncols() {
        return structural(format!(
            "shape {}×{} does not match {}×{}",
            estimated.nrows(),
            estimated.ncols(),
            truth.nrows(),
            truth.ncols()
        ));
    }
    let support = |m: &SparseMatrix| -> std::collections::BTreeSet<(usize, usize)> {
        m.iter().filter(|&(i, j, v)| v != 0.0 && !(ignore_diagonal && i == j)).map(|(i, j, _)| (i, j)).collect()
    };
    let (e, t) = (support(estimated), support(truth));
    let hits = e.intersection(&t).count() as f64;
    if e.is_empty() && t.is_empty() {
        return Ok(F1Score { precision: 1.0, recall: 1.0, f1: 1.0 });
    }
    let precision = if e.is_empty() { 0.0 } else { hits / e.len() as f64 };
    let recall = if t.is_empty() { 0.0 } else { hits / t.len() as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(F1Score { precision, recall, f1 })
}

/// Bisection in `log λ` for a weight whose fit has about `target` edges.
///
/// `edges(λ)` must be non-increasing in `λ`. Returns the λ among those evaluated whose edge
/// count is closest to `target`.
pub fn lambda_for_edge_count(
    mut edges: impl FnMut(f64) -> Result<usize>,
    target: usize,
    lo: f64,
    hi: f64,
    iters: usize,
) -> Result<f64> {
    if !(lo > 0.0 && hi > lo) {
        return config("bisection needs 0 < lo < hi");
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut best = (usize::MAX, lo);
    for _ in 0..iters.max(1) {
        let mid = 0.5 * (a + b);
        let lam = mid.exp();
        let e = edges(lam)?;
        let gap = e.abs_diff(target);
        if gap < best.0 {
            best = (gap, lam);
        }
        if e == target {
            break;
        }
        if e > target {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(best.1)
}
