//! Block schedules for the `Λ` and `Θ` phases and the column-wise gradient pass.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::active::{select_lambda_column, select_theta_column, ActiveSet};
use crate::block::budget::CacheStats;
use crate::block::columns::ColumnSource;
use crate::block::partition::BlockPartition;
use crate::error::{config, structural, Result};
use crate::lambda_step::{LambdaDirection, LambdaWorkspace};
use crate::linalg::{ReductionMode, SparseMatrix};
use crate::model::{subgradient_entry, CggmModel, Hyperparams, SufficientStats};
use crate::theta_step::{theta_work_for_block, ThetaWorkspace};

/// Output of [`block_newton_lambda`].
#[derive(Debug, Clone)]
pub struct BlockLambdaResult {
    pub direction: LambdaDirection,
    /// Indices into `active.lambda_coords` in the order they were updated.
    pub order: Vec<usize>,
    pub stats: CacheStats,
}

/// Output of [`block_cd_theta`].
#[derive(Debug, Clone)]
pub struct BlockThetaResult {
    pub theta: SparseMatrix,
    pub stats: CacheStats,
}

fn load_columns<S: ColumnSource + ?Sized>(src: &S, cols: &[usize], with_psi: bool) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    cols.par_iter()
        .map(|&t| {
            let s = src.sigma(t)?;
            let p = if with_psi { src.psi(t, &s)? } else { Vec::new() };
            Ok((s, p))
        })
        .collect()
}

/// `passes` sweeps of `Λ` coordinate descent, block by block.
///
/// For every block `C_z` the `Σ` and `Ψ` columns of `C_z` are loaded and the active
/// coordinates inside `C_z × C_z` updated. Then, for each other block `C_r` sharing active
/// coordinates with `C_z`, only the columns `B_zr ⊂ C_r` touched by those coordinates are
/// loaded, the coordinates updated, and `B_zr` released. Coordinates between two blocks are
/// therefore visited twice per pass, once from each side.
pub fn block_newton_lambda<S: ColumnSource + ?Sized>(
    model: &CggmModel,
    stats: &SufficientStats,
    active: &ActiveSet,
    hyper: &Hyperparams,
    partition: &BlockPartition,
    source: &S,
    capacity: usize,
    passes: usize,
    mode: ReductionMode,
) -> Result<BlockLambdaResult> {
    let q = model.q();
    if source.dim() != q || partition.blocks().iter().map(Vec::len).sum::<usize>() != q {
        return structural("partition or column source does not match Λ");
    }
    let mut ws = LambdaWorkspace::new(model, stats, active, hyper, mode);
    let mut cs = CacheStats::default();
    let mut order = Vec::with_capacity(active.m_lambda());
    if active.lambda_coords.is_empty() {
        return Ok(BlockLambdaResult { direction: ws.finish(q)?, order, stats: cs });
    }

    let kb = partition.k();
    let mut within: Vec<Vec<usize>> = vec![Vec::new(); kb];
    let mut cross: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (k, &(i, j)) in active.lambda_coords.iter().enumerate() {
        let (a, b) = (partition.block_of(i), partition.block_of(j));
        if a == b {
            within[a].push(k);
        } else {
            cross.entry((a.min(b), a.max(b))).or_default().push(k);
        }
    }

    for z in (0..passes).flat_map(|_| 0..kb) {
        let cz = &partition.blocks()[z];
        if cz.len() > capacity {
            return config(format!("block of {} columns exceeds capacity {capacity}", cz.len()));
        }
        for (t, (s, p)) in cz.iter().zip(load_columns(source, cz, true)?) {
            ws.load(*t, s, p);
        }
        cs.lambda_sigma_cols += cz.len();
        cs.lambda_psi_cols += cz.len();
        for &k in &within[z] {
            ws.update(k);
            order.push(k);
        }
        for r in 0..kb {
            if r == z {
                continue;
            }
            let Some(coords) = cross.get(&(z.min(r), z.max(r))) else {
                continue;
            };
            let mut bzr: Vec<usize> = coords
                .iter()
                .flat_map(|&k| {
                    let (i, j) = active.lambda_coords[k];
                    [i, j]
                })
                .filter(|&t| partition.block_of(t) == r)
                .collect();
            bzr.sort_unstable();
            bzr.dedup();
            if ws.resident_count() + bzr.len() > capacity {
                return config(format!(
                    "{} resident columns plus {} off-diagonal columns exceed capacity {capacity}",
                    ws.resident_count(),
                    bzr.len()
                ));
            }
            for (t, (s, p)) in bzr.iter().zip(load_columns(source, &bzr, true)?) {
                ws.load(*t, s, p);
            }
            cs.lambda_sigma_cols += bzr.len();
            cs.lambda_psi_cols += bzr.len();
            cs.lambda_offdiag_cols += bzr.len();
            for &k in coords {
                ws.update(k);
                order.push(k);
            }
            for &t in &bzr {
                ws.release(t);
            }
        }
        for &t in cz {
            ws.release(t);
        }
    }
    cs.lambda_high_water = ws.high_water();
    cs.flagged = ws.flagged();
    Ok(BlockLambdaResult { direction: ws.finish(q)?, order, stats: cs })
}

/// `passes` sweeps of `Θ` coordinate descent over column blocks.
///
/// Blocks without active coordinates are skipped entirely; otherwise `Σ_{C_r}` is loaded
/// once and each row with active coordinates in the block fetches its `S_xx` row
/// restricted to the nonzero rows of `Θ`.
pub fn block_cd_theta<S: ColumnSource + ?Sized>(
    theta: &SparseMatrix,
    stats: &SufficientStats,
    active: &ActiveSet,
    hyper: &Hyperparams,
    partition: &BlockPartition,
    source: &S,
    capacity: usize,
    passes: usize,
    mode: ReductionMode,
) -> Result<BlockThetaResult> {
    let q = theta.ncols();
    if source.dim() != q || partition.blocks().iter().map(Vec::len).sum::<usize>() != q {
        return structural("partition or column source does not match Θ");
    }
    let mut ws = ThetaWorkspace::new(theta, stats, hyper, mode);
    let mut cs = CacheStats::default();
    let mut in_block = vec![false; q];
    for cr in (0..passes).flat_map(|_| partition.blocks()) {
        for &t in cr {
            in_block[t] = true;
        }
        let work = theta_work_for_block(active, &in_block);
        for &t in cr {
            in_block[t] = false;
        }
        if work.is_empty() {
            continue;
        }
        if cr.len() > capacity {
            return config(format!("block of {} columns exceeds capacity {capacity}", cr.len()));
        }
        let sigma: Vec<Vec<f64>> = load_columns(source, cr, false)?.into_iter().map(|(s, _)| s).collect();
        cs.theta_sigma_cols += cr.len();
        cs.theta_high_water = cs.theta_high_water.max(cr.len());
        ws.sweep_block(cr, &sigma, &work)?;
    }
    let c = ws.counters();
    cs.sxx_rows = c.sxx_rows;
    cs.sxx_dots = c.sxx_dots;
    cs.flagged = c.flagged;
    cs.theta_rows = passes * active_theta_rows(active);
    Ok(BlockThetaResult { theta: ws.theta(), stats: cs })
}

/// Number of distinct rows among the active `Θ` coordinates.
pub fn active_theta_rows(active: &ActiveSet) -> usize {
    let mut rows: Vec<usize> = active.theta_coords.iter().map(|c| c.0).collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

/// Active set and subgradient statistic of one model, computed column by column.
#[derive(Debug, Clone)]
pub struct GradientPass {
    pub active: ActiveSet,
    pub subgrad: f64,
}

/// Computes `∇_Λ g` and `∇_Θ g` one output column at a time, in chunks of `chunk`
/// columns, and reduces them to the next active set and the subgradient statistic.
/// Column sums are combined in column order, so the result does not depend on the
/// number of worker threads.
pub fn block_gradient_pass<S: ColumnSource + ?Sized>(
    model: &CggmModel,
    stats: &SufficientStats,
    hyper: &Hyperparams,
    source: &S,
    chunk: usize,
) -> Result<GradientPass> {
    let (p, q) = (model.p(), model.q());
    if source.dim() != q {
        return structural("column source does not match Λ");
    }
    let x = stats.x();
    let theta_zero = model.theta.nnz() == 0;
    let chunk = chunk.max(1);
    let mut out = GradientPass { active: ActiveSet::default(), subgrad: 0.0 };
    let cols: Vec<usize> = (0..q).collect();
    for block in cols.chunks(chunk) {
        let per_col: Vec<Result<(Vec<(usize, usize)>, Vec<(usize, usize)>, f64)>> = block
            .par_iter()
            .map(|&j| {
                let sigma = source.sigma(j)?;
                let psi = source.psi(j, &sigma)?;
                let gl: Vec<f64> = (0..q).map(|i| stats.syy()[(i, j)] - sigma[i] - psi[i]).collect();
                let gamma = if theta_zero {
                    vec![0.0; p]
                } else {
                    let v = model.theta.mul_vec(&sigma);
                    let xv = x * DVector::from_column_slice(&v);
                    x.tr_mul(&xv).as_slice().to_vec()
                };
                let gt: Vec<f64> = (0..p).map(|i| 2.0 * (stats.sxy()[(i, j)] + gamma[i])).collect();
                let la = select_lambda_column(j, &gl, &model.lambda, hyper);
                let ta = select_theta_column(j, &gt, &model.theta, stats, hyper);
                let mut sub = 0.0;
                let (rows, vals) = model.lambda.col(j);
                let mut dense = vec![0.0; q];
                for (&i, &v) in rows.iter().zip(vals) {
                    dense[i] = v;
                }
                for i in 0..q {
                    sub += subgradient_entry(dense[i], gl[i], hyper.lambda_weight(i, j));
                }
                let (rows, vals) = model.theta.col(j);
                let mut dense = vec![0.0; p];
                for (&i, &v) in rows.iter().zip(vals) {
                    dense[i] = v;
                }
                for i in 0..p {
                    sub += subgradient_entry(dense[i], gt[i], hyper.lambda_map);
                }
                Ok((la, ta, sub))
            })
            .collect();
        for r in per_col {
            let (la, ta, sub) = r?;
            out.active.lambda_coords.extend(la);
            out.active.theta_coords.extend(ta);
            out.subgrad += sub;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::active::select_active;
    use crate::block::columns::{CgColumns, DenseColumns};
    use crate::block::partition::{partition_lambda, partition_theta};
    use crate::lambda_step::newton_direction_lambda;
    use crate::model::{min_norm_subgradient, Dataset, DerivedState};
    use crate::theta_step::cd_theta_sweep;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(q: usize) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..q {
            t.push((i, i, 2.25));
            if i + 1 < q {
                t.push((i, i + 1, 1.0));
                t.push((i + 1, i, 1.0));
            }
        }
        SparseMatrix::from_triplets(q, q, &t).unwrap()
    }

    fn stats(n: usize, p: usize, q: usize, seed: u64) -> SufficientStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0));
        SufficientStats::from_dataset(&Dataset::center_and_scale(&x, &y).unwrap()).unwrap()
    }

    fn random_theta(p: usize, q: usize, density: f64, seed: u64) -> SparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..p {
            for j in 0..q {
                if rng.random_bool(density) {
                    t.push((i, j, rng.random_range(-0.5..0.5)));
                }
            }
        }
        SparseMatrix::from_triplets(p, q, &t).unwrap()
    }

    fn chain_active(q: usize) -> ActiveSet {
        let mut a = ActiveSet::default();
        for j in 0..q {
            if j > 0 {
                a.lambda_coords.push((j - 1, j));
            }
            a.lambda_coords.push((j, j));
        }
        a
    }

    #[test]
    fn chain_offdiag_loads_are_two_per_boundary() {
        let q = 60;
        let st = stats(40, 5, q, 1);
        let m = CggmModel::new(chain(q), SparseMatrix::zeros(5, q)).unwrap();
        let ds = DerivedState::compute(&m, &st).unwrap();
        let active = chain_active(q);
        let hyper = Hyperparams::new(0.1, 0.1).unwrap();
        for k in [2, 3, 5] {
            let part = partition_lambda(&active, q, k, 3).unwrap();
            let cap = 2 * q.div_ceil(k);
            let res = block_newton_lambda(&m, &st, &active, &hyper, &part, &DenseColumns::new(&ds), cap, 1, ReductionMode::Sequential).unwrap();
            assert_eq!(res.stats.lambda_offdiag_cols, 2 * (k - 1));
            assert_eq!(res.stats.lambda_sigma_cols, q + 2 * (k - 1));
            assert!(res.stats.lambda_high_water <= cap);
        }
    }

    #[test]
    fn block_diagonal_active_set_loads_each_column_once() {
        let q = 12;
        let st = stats(30, 3, q, 2);
        let mut t = Vec::new();
        let mut active = ActiveSet::default();
        for j in 0..q {
            for i in 0..=j {
                if i / 4 == j / 4 {
                    active.lambda_coords.push((i, j));
                    let v = if i == j { 4.0 } else { 0.3 };
                    t.push((i, j, v));
                    if i != j {
                        t.push((j, i, v));
                    }
                }
            }
        }
        let m = CggmModel::new(SparseMatrix::from_triplets(q, q, &t).unwrap(), SparseMatrix::zeros(3, q)).unwrap();
        let ds = DerivedState::compute(&m, &st).unwrap();
        let part = partition_lambda(&active, q, 3, 0).unwrap();
        let res = block_newton_lambda(&m, &st, &active, &Hyperparams::new(0.05, 0.05).unwrap(), &part, &DenseColumns::new(&ds), 8, 1, ReductionMode::Sequential)
            .unwrap();
        assert_eq!(res.stats.lambda_sigma_cols, q);
        assert_eq!(res.stats.lambda_psi_cols, q);
        assert_eq!(res.stats.lambda_offdiag_cols, 0);
    }

    #[test]
    fn dense_active_set_loads_at_most_q_k() {
        let q = 16;
        let st = stats(30, 4, q, 4);
        let m = CggmModel::new(chain(q), random_theta(4, q, 0.4, 5)).unwrap();
        let ds = DerivedState::compute(&m, &st).unwrap();
        let mut active = ActiveSet::default();
        for j in 0..q {
            for i in 0..=j {
                active.lambda_coords.push((i, j));
            }
        }
        let hyper = Hyperparams::new(0.01, 0.01).unwrap();
        for k in [2, 4, 8] {
            let part = partition_lambda(&active, q, k, 0).unwrap();
            let res = block_newton_lambda(&m, &st, &active, &hyper, &part, &DenseColumns::new(&ds), 2 * q.div_ceil(k), 1, ReductionMode::Sequential)
                .unwrap();
            assert!(res.stats.lambda_sigma_cols <= q * k);
            assert_eq!(res.stats.lambda_sigma_cols, q * k);
        }
    }

    #[test]
    fn block_direction_equals_in_memory_with_same_order() {
        let (p, q) = (6, 20);
        let st = stats(50, p, q, 7);
        let m = CggmModel::new(chain(q), random_theta(p, q, 0.3, 8)).unwrap();
        let ds = DerivedState::compute(&m, &st).unwrap();
        let hyper = Hyperparams::new(0.05, 0.05).unwrap();
        let active = select_active(&m, &ds, &st, &hyper).unwrap();
        for k in [1, 2, 4] {
            let part = partition_lambda(&active, q, k, 1).unwrap();
            let cg = CgColumns::new(&m.lambda, &m.theta, st.x(), 1e-13);
            let res = block_newton_lambda(&m, &st, &active, &hyper, &part, &cg, 2 * q.div_ceil(k), 1, ReductionMode::Sequential).unwrap();
            let mem = newton_direction_lambda(&m, &ds, &st, &active, &hyper, 1, Some(&res.order), ReductionMode::Sequential).unwrap();
            let diff = (res.direction.delta.to_dense() - mem.delta.to_dense()).amax();
            assert!(diff < 1e-8, "k = {k}: {diff}");
            assert!((res.direction.grad_dot_delta - mem.grad_dot_delta).abs() < 1e-8);
        }
    }

    #[test]
    fn capacity_violations_are_config_errors() {
        let q = 10;
        let st = stats(20, 2, q, 9);
        let m = CggmModel::new(chain(q), SparseMatrix::zeros(2, q)).unwrap();
        let ds = DerivedState::compute(&m, &st).unwrap();
        let active = chain_active(q);
        let part = partition_lambda(&active, q, 2, 0).unwrap();
        let hyper = Hyperparams::new(0.1, 0.1).unwrap();
        assert!(block_newton_lambda(&m, &st, &active, &hyper, &part, &DenseColumns::new(&ds), 5, 1, ReductionMode::Sequential).is_err());
    }

    #[test]
    fn theta_blocks_match_single_sweep_and_count_rows() {
        let (p, q) = (10, 12);
        let st = stats(40, p, q, 10);
        let m = CggmModel::new(chain(q), random_theta(p, q, 0.2, 11)).unwrap();
        let ds = DerivedState::compute(&m, &st).unwrap();
        let hyper = Hyperparams::new(0.05, 0.02).unwrap();
        let active = select_active(&m, &ds, &st, &hyper).unwrap();
        let single = BlockPartition::single(q);
        let res = block_cd_theta(&m.theta, &st, &active, &hyper, &single, &DenseColumns::new(&ds), q, 1, ReductionMode::Sequential).unwrap();
        let mem = cd_theta_sweep(&m, &ds.sigma, &st, &active, &hyper, 1, ReductionMode::Sequential).unwrap();
        assert_eq!(res.theta, mem.theta);
        assert_eq!(res.stats.sxx_rows, mem.counters.sxx_rows);

        let mut rows: Vec<usize> = active.theta_coords.iter().map(|c| c.0).collect();
        rows.sort_unstable();
        rows.dedup();
        for k in [2, 3, 4] {
            let part = partition_theta(&active, p, q, k, 0).unwrap();
            let cg = CgColumns::new(&m.lambda, &m.theta, st.x(), 1e-12);
            let res = block_cd_theta(&m.theta, &st, &active, &hyper, &part, &cg, q.div_ceil(k), 1, ReductionMode::Sequential).unwrap();
            assert!(res.stats.sxx_rows <= rows.len() * k);
            assert!(res.stats.theta_sigma_cols <= q);
            assert!(res.stats.theta_high_water <= q.div_ceil(k));
            // same visit order through a workspace with dense Σ
            let mut ws = ThetaWorkspace::new(&m.theta, &st, &hyper, ReductionMode::Sequential);
            let mut mask = vec![false; q];
            for cr in part.blocks() {
                cr.iter().for_each(|&t| mask[t] = true);
                let work = theta_work_for_block(&active, &mask);
                cr.iter().for_each(|&t| mask[t] = false);
                if !work.is_empty() {
                    let sig: Vec<Vec<f64>> = cr.iter().map(|&t| ds.sigma.column(t).iter().copied().collect()).collect();
                    ws.sweep_block(cr, &sig, &work).unwrap();
                }
            }
            assert!((ws.theta().to_dense() - res.theta.to_dense()).amax() < 1e-9);
        }
    }

    #[test]
    fn empty_theta_active_set_computes_no_rows() {
        let q = 6;
        let st = stats(20, 4, q, 12);
        let m = CggmModel::new(chain(q), SparseMatrix::zeros(4, q)).unwrap();
        let ds = DerivedState::compute(&m, &st).unwrap();
        let active = chain_active(q);
        let part = partition_theta(&active, 4, q, 2, 0).unwrap();
        let res = block_cd_theta(&m.theta, &st, &active, &Hyperparams::new(0.1, 0.1).unwrap(), &part, &DenseColumns::new(&ds), 3, 1, ReductionMode::Sequential)
            .unwrap();
        assert_eq!(res.stats.sxx_rows, 0);
        assert_eq!(res.stats.theta_sigma_cols, 0);
    }

    #[test]
    fn diagonal_theta_fetches_each_row_once() {
        let q = 8;
        let st = stats(30, q, q, 13);
        let mut t = Vec::new();
        let mut active = ActiveSet::default();
        for j in 0..q {
            t.push((j, j, 0.5));
            active.theta_coords.push((j, j));
        }
        let m = CggmModel::new(chain(q), SparseMatrix::from_triplets(q, q, &t).unwrap()).unwrap();
        let ds = DerivedState::compute(&m, &st).unwrap();
        let part = partition_theta(&active, q, q, 2, 0).unwrap();
        // a tiny λ_Θ keeps every row nonzero, so each row costs exactly p̃ = q dots
        let res = block_cd_theta(&m.theta, &st, &active, &Hyperparams::new(0.1, 1e-9).unwrap(), &part, &DenseColumns::new(&ds), 4, 1, ReductionMode::Sequential)
            .unwrap();
        assert_eq!(res.stats.sxx_rows, q);
        assert_eq!(res.stats.sxx_dots, q * q);
    }

    #[test]
    fn gradient_pass_matches_dense() {
        let (p, q) = (7, 9);
        let st = stats(30, p, q, 14);
        let m = CggmModel::new(chain(q), random_theta(p, q, 0.3, 15)).unwrap();
        let ds = DerivedState::compute(&m, &st).unwrap();
        let hyper = Hyperparams::new(0.08, 0.05).unwrap();
        let cg = CgColumns::new(&m.lambda, &m.theta, st.x(), 1e-13);
        for chunk in [1, 4, 9] {
            let pass = block_gradient_pass(&m, &st, &hyper, &cg, chunk).unwrap();
            assert_eq!(pass.active, select_active(&m, &ds, &st, &hyper).unwrap());
            let dense = min_norm_subgradient(&m, &ds, &st, &hyper).unwrap();
            assert!((pass.subgrad - dense).abs() < 1e-8 * (1.0 + dense));
        }
    }
}
