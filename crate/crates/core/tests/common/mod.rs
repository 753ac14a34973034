#![allow(dead_code)]

use cggm::datagen::{sample, GeneratorDescriptor, GroundTruth};
use cggm::{Dataset, SparseMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random sparse ground truth with a diagonally dominant `Λ`.
pub fn random_truth(p: usize, q: usize, seed: u64) -> GroundTruth {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Vec::new();
    let mut rowsum = vec![0.0; q];
    for j in 0..q {
        for i in 0..j {
            if rng.random_bool((2.0 / q as f64).min(1.0)) {
                let v: f64 = rng.random_range(0.2..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                t.push((i, j, v));
                t.push((j, i, v));
                rowsum[i] += v.abs();
                rowsum[j] += v.abs();
            }
        }
    }
    for (i, s) in rowsum.iter().enumerate() {
        t.push((i, i, s + rng.random_range(0.5..1.5)));
    }
    let mut th = Vec::new();
    for i in 0..p {
        for j in 0..q {
            if rng.random_bool((2.0 / p as f64).min(1.0)) {
                th.push((i, j, rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }));
            }
        }
    }
    GroundTruth {
        lambda: SparseMatrix::from_triplets(q, q, &t).unwrap(),
        theta: SparseMatrix::from_triplets(p, q, &th).unwrap(),
        descriptor: GeneratorDescriptor::Chain { q, extra_inputs: 0 },
    }
}

pub fn dataset(truth: &GroundTruth, n: usize, seed: u64) -> Dataset {
    let s = sample(truth, n, seed).unwrap();
    Dataset::center_and_scale(&s.x, &s.y).unwrap()
}

/// Writes triplets with round-trip float formatting and parses them back.
pub fn reload(m: &SparseMatrix) -> SparseMatrix {
    let text: String = m.iter().map(|(i, j, v)| format!("{i} {j} {v:e}\n")).collect();
    let trip: Vec<(usize, usize, f64)> = text
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(' ').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    SparseMatrix::from_triplets(m.nrows(), m.ncols(), &trip).unwrap()
}
