//! Quantization of the covariance space from simulated sample paths.

use std::collections::HashSet;

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::estimator::{g_operator, Covariance, SystemModel};
use crate::channel::{ArrivalOutcome, ArrivalTable};
use crate::error::Result;

use super::SolverConfig;

const PATH_TRACE_GUARD: f64 = 1e8;

#[derive(Debug, Clone)]
pub struct Discretization {
    pub centroids: Vec<Covariance>,
    /// Number of pooled covariance matrices.
    pub pool_size: usize,
    /// Set when fewer distinct matrices than requested centroids were pooled.
    pub truncated: bool,
    /// Mean squared Frobenius distance from each pooled matrix to its centroid.
    pub distortion: f64,
    /// Largest distance from a pooled matrix to its centroid.
    pub max_radius: f64,
}

/// [`discretize_states`] driven by a generator seeded from `cfg.seed`.
pub fn discretize_seeded(model: &SystemModel, table: &ArrivalTable, cfg: &SolverConfig) -> Result<Discretization> {
    discretize_states(model, table, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Simulates covariance paths under uniformly random actions and sampled
/// arrivals, then clusters the visited matrices into `cfg.centroids` centroids.
pub fn discretize_states<R: Rng + ?Sized>(
    model: &SystemModel,
    table: &ArrivalTable,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<Discretization> {
    let key: u64 = rng.random();
    let pool = sample_paths(model, table, cfg, key)?;
    let (centroids, distortion, max_radius, truncated) =
        kmeans_frobenius(&pool, cfg.centroids, cfg.kmeans_iters, key.wrapping_add(1));
    if truncated {
        warn!(
            "only {} distinct covariances pooled for {} requested centroids",
            centroids.len(),
            cfg.centroids
        );
    }
    Ok(Discretization {
        centroids: centroids.into_iter().map(Covariance::from_raw).collect(),
        pool_size: pool.len(),
        truncated,
        distortion,
        max_radius,
    })
}

fn sample_paths(model: &SystemModel, table: &ArrivalTable, cfg: &SolverConfig, key: u64) -> Result<Vec<DMatrix<f64>>> {
    let n = model.n();
    let n_s = model.n_sensors();
    let samplers: Vec<WeightedIndex<f64>> = table
        .dists
        .iter()
        .map(|d| WeightedIndex::new(d.probs().to_vec()).expect("distribution sums to one"))
        .collect();
    let paths: Vec<Result<Vec<DMatrix<f64>>>> = (0..cfg.paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            rng.set_stream(path as u64);
            let scale: f64 = rng.random_range(0.0..2.0);
            let l = DMatrix::from_fn(n, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
            let mut p = Covariance::from_raw(&l * l.transpose() + DMatrix::identity(n, n) * 0.1);
            let mut out = Vec::with_capacity(cfg.path_length);
            for _ in 0..cfg.path_length {
                out.push(p.matrix().clone());
                let a = rng.random_range(0..table.len());
                let bits = samplers[a].sample(&mut rng) as u32;
                p = g_operator(&p, &ArrivalOutcome::new(bits, n_s), model)?;
                if p.trace() > PATH_TRACE_GUARD {
                    break;
                }
            }
            Ok(out)
        })
        .collect();
    let mut pool = Vec::new();
    for p in paths {
        pool.extend(p?);
    }
    Ok(pool)
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = dist_sq(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with Frobenius distance and k-means++ seeding.
///
/// Centroids are element-wise means, so symmetric positive-definite inputs
/// give symmetric positive-definite centroids. Returns
/// `(centroids, distortion, max_radius, truncated)`; when the points hold at
/// most `k` distinct matrices those are returned as-is with `truncated` set
/// if there are strictly fewer than `k`.
pub fn kmeans_frobenius(
    points: &[DMatrix<f64>],
    k: usize,
    iters: usize,
    seed: u64,
) -> (Vec<DMatrix<f64>>, f64, f64, bool) {
    assert!(!points.is_empty() && k > 0);
    let (rows, cols) = points[0].shape();
    let flat: Vec<Vec<f64>> = points.iter().map(|m| m.as_slice().to_vec()).collect();
    let mut seen = HashSet::new();
    let unique: Vec<&Vec<f64>> = flat
        .iter()
        .filter(|p| seen.insert(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect();
    let to_mat = |v: &[f64]| DMatrix::from_column_slice(rows, cols, v);
    if unique.len() <= k {
        let centers: Vec<DMatrix<f64>> = unique.iter().map(|v| to_mat(v)).collect();
        return (centers, 0.0, 0.0, unique.len() < k);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![flat[rng.random_range(0..flat.len())].clone()];
    let mut d2: Vec<f64> = flat.iter().map(|p| dist_sq(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..flat.len())
        };
        let c = flat[next].clone();
        d2.par_iter_mut().zip(flat.par_iter()).for_each(|(d, p)| *d = d.min(dist_sq(p, &c)));
        centers.push(c);
    }

    let dim = rows * cols;
    let mut assign: Vec<(usize, f64)> = flat.par_iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(j, _)) in flat.iter().zip(&assign) {
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // empty cluster: restart it on the worst-served point
                let far = assign
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                centers[j] = flat[far].clone();
                assign[far] = (j, 0.0);
            }
        }
        let next: Vec<(usize, f64)> = flat.par_iter().map(|p| nearest(p, &centers)).collect();
        let changed = next.iter().zip(&assign).any(|(a, b)| a.0 != b.0);
        assign = next;
        if !changed {
            break;
        }
    }
    let distortion = assign.iter().map(|a| a.1).sum::<f64>() / flat.len() as f64;
    let max_radius = assign.iter().map(|a| a.1).fold(0.0, f64::max).sqrt();
    (centers.iter().map(|c| to_mat(c)).collect(), distortion, max_radius, false)
}
