//! Scalar and covariance kernels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};

/// `S_r(w) = sign(w) max(|w| − r, 0)`.
#[inline]
pub fn soft_threshold(w: f64, r: f64) -> f64 {
    debug_assert!(r >= 0.0);
    if w > r {
        w - r
    } else if w < -r {
        w + r
    } else {
        0.0
    }
}

/// Floating-point reduction order for dot products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReductionMode {
    /// Left-to-right summation; results do not depend on the worker count.
    #[default]
    Sequential,
    /// Four independent accumulators, combined at the end.
    Fast,
}

#[inline]
pub fn dot(a: &[f64], b: &[f64], mode: ReductionMode) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    match mode {
        ReductionMode::Sequential => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        ReductionMode::Fast => {
            let mut acc = [0.0; 4];
            let ca = a.chunks_exact(4);
            let cb = b.chunks_exact(4);
            let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
            for (x, y) in ca.zip(cb) {
                for k in 0..4 {
                    acc[k] += x[k] * y[k];
                }
            }
            (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
        }
    }
}

/// `S_xx v = X^T (X v)` without forming `S_xx`.
pub fn implicit_sxx_apply(x: &DMatrix<f64>, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != x.ncols() {
        return structural(format!("implicit_sxx_apply: vector length {} but X has {} columns", v.len(), x.ncols()));
    }
    let mut xv = vec![0.0; x.nrows()];
    for (j, &vj) in v.iter().enumerate() {
        if vj != 0.0 {
            for (acc, &xij) in xv.iter_mut().zip(x.column(j).iter()) {
                *acc += xij * vj;
            }
        }
    }
    Ok((0..x.ncols()).map(|j| dot(x.column(j).as_slice(), &xv, ReductionMode::Sequential)).collect())
}

/// A (possibly restricted) row of `S_xx`.
#[derive(Debug, Clone, PartialEq)]
pub struct SxxRow {
    /// `(column, value)` pairs in the order requested.
    pub entries: Vec<(usize, f64)>,
    /// Number of length-`n` column dot products performed.
    pub dot_products: usize,
}

/// Row `i` of `S_xx = X^T X`, restricted to `keep` when given.
pub fn sxx_row(x: &DMatrix<f64>, i: usize, keep: Option<&[usize]>, mode: ReductionMode) -> Result<SxxRow> {
    let p = x.ncols();
    if i >= p {
        return structural(format!("sxx_row: row {i} out of range for p = {p}"));
    }
    let xi = x.column(i);
    let xi = xi.as_slice();
    let entries: Vec<(usize, f64)> = match keep {
        Some(cols) => {
            if let Some(&bad) = cols.iter().find(|&&c| c >= p) {
                return structural(format!("sxx_row: column {bad} out of range for p = {p}"));
            }
            cols.iter().map(|&c| (c, dot(xi, x.column(c).as_slice(), mode))).collect()
        }
        None => (0..p).map(|c| (c, dot(xi, x.column(c).as_slice(), mode))).collect(),
    };
    let dot_products = entries.len();
    Ok(SxxRow { entries, dot_products })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn soft_threshold_cases() {
        assert!((soft_threshold(1.2, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(soft_threshold(-0.3, 1.0), 0.0);
        assert_eq!(soft_threshold(-4.5, 0.0), -4.5);
        assert_eq!(soft_threshold(3.25, 0.0), 3.25);
    }

    #[test]
    fn sxx_apply_identity_and_zero() {
        let x = DMatrix::<f64>::identity(4, 4);
        let v = [1.5, -2.0, 0.25, 7.0];
        assert_eq!(implicit_sxx_apply(&x, &v).unwrap(), v.to_vec());
        assert_eq!(implicit_sxx_apply(&x, &[0.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(implicit_sxx_apply(&x, &[0.0; 3]).is_err());
    }

    #[test]
    fn sxx_apply_matches_explicit_product() {
        let x = random(10, 7, 3);
        let sxx = x.transpose() * &x;
        let mut e = [0.0; 7];
        e[2] = 1.0;
        let got = implicit_sxx_apply(&x, &e).unwrap();
        for k in 0..7 {
            assert!((got[k] - sxx[(k, 2)]).abs() < 1e-12);
        }
    }

    #[test]
    fn sxx_row_orthonormal_columns() {
        let x = DMatrix::<f64>::identity(5, 3);
        let row = sxx_row(&x, 1, None, ReductionMode::Sequential).unwrap();
        assert_eq!(row.entries, vec![(0, 0.0), (1, 1.0), (2, 0.0)]);
    }

    #[test]
    fn sxx_row_restricted() {
        let x = random(8, 5, 11);
        let sxx = x.transpose() * &x;
        let row = sxx_row(&x, 2, Some(&[1, 3]), ReductionMode::Sequential).unwrap();
        assert_eq!(row.dot_products, 2);
        assert_eq!(row.entries.len(), 2);
        assert!((row.entries[0].1 - sxx[(2, 1)]).abs() < 1e-12);
        assert!((row.entries[1].1 - sxx[(2, 3)]).abs() < 1e-12);
        let empty = sxx_row(&x, 2, Some(&[]), ReductionMode::Sequential).unwrap();
        assert!(empty.entries.is_empty());
        assert_eq!(empty.dot_products, 0);
        assert!(sxx_row(&x, 5, None, ReductionMode::Sequential).is_err());
    }

    #[test]
    fn fast_dot_agrees() {
        let a: Vec<f64> = (0..103).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..103).map(|i| (i as f64 * 0.11).cos()).collect();
        let s = dot(&a, &b, ReductionMode::Sequential);
        let f = dot(&a, &b, ReductionMode::Fast);
        assert!((s - f).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn soft_threshold_odd_and_nonexpansive(a in -10.0f64..10.0, b in -10.0f64..10.0, r in 0.0f64..5.0) {
            prop_assert_eq!(soft_threshold(-a, r), -soft_threshold(a, r));
            prop_assert!((soft_threshold(a, r) - soft_threshold(b, r)).abs() <= (a - b).abs() + 1e-15);
        }

        #[test]
        fn sxx_apply_matches_dense(n in 1usize..50, p in 1usize..50, seed in 0u64..500) {
            let x = random(n, p, seed);
            let sxx = x.transpose() * &x;
            let v: Vec<f64> = (0..p).map(|k| ((k + 1) as f64).ln() - 1.0).collect();
            let got = nalgebra::DVector::from_vec(implicit_sxx_apply(&x, &v).unwrap());
            let want = &sxx * nalgebra::DVector::from_vec(v);
            prop_assert!((got - &want).norm() <= 1e-10 * want.norm().max(1e-300));
        }
    }
}
