//! Lloyd's algorithm with k-means++ seeding.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{DType, Tensor};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub centroids: Tensor,
    pub iterations_run: usize,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let pairs: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, centroids)).collect();
    let inertia = pairs.iter().map(|&(_, d)| d).sum();
    (pairs.into_iter().map(|(l, _)| l).collect(), inertia)
}

fn seed_plus_plus(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // Rounding can run past the end; take the last positive-weight point.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            chosen.iter().position(|&c| !c).unwrap()
        };
        chosen[pick] = true;
        let c = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn update_means(points: &[&[f64]], labels: &[usize], centroids: &mut [Vec<f64>]) -> Vec<usize> {
    let k = centroids.len();
    let dim = points.first().map_or(0, |p| p.len());
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (j, c) in centroids.iter_mut().enumerate() {
        if counts[j] > 0 {
            *c = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        }
    }
    counts
}

/// Moves the point farthest from its centroid into each empty cluster. Only
/// points from clusters with more than one member are eligible.
fn refill_empty(
    points: &[&[f64]],
    labels: &mut [usize],
    centroids: &mut [Vec<f64>],
    counts: &mut [usize],
) {
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let l = labels[i];
            if counts[l] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[l]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((i, _)) = best else { return };
        counts[labels[i]] -= 1;
        labels[i] = empty;
        counts[empty] = 1;
        centroids[empty] = points[i].to_vec();
    }
}

fn inertia_of(points: &[&[f64]], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

pub fn kmeans(points: &Tensor, k: usize, seed: u64) -> Result<KmeansResult> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::Infeasible { n, k });
    }
    if !points.is_finite() {
        return Err(Error::Data("kmeans input contains non-finite values".into()));
    }
    let dim = points.cols();
    let rows: Vec<&[f64]> = (0..n).map(|i| points.row(i)).collect();
    let mut rng = rng::seeded(seed, 0x6b6d);
    let mut centroids = seed_plus_plus(&rows, k, &mut rng);

    let (mut labels, inertia) = assign(&rows, &centroids);
    let mut history = vec![inertia];
    let mut iterations_run = 0;
    while iterations_run < MAX_ITERATIONS {
        iterations_run += 1;
        let mut counts = update_means(&rows, &labels, &mut centroids);
        refill_empty(&rows, &mut labels, &mut centroids, &mut counts);
        let (next, inertia) = assign(&rows, &centroids);
        history.push(inertia);
        let stable = next == labels;
        labels = next;
        if stable {
            break;
        }
    }

    let mut counts = update_means(&rows, &labels, &mut centroids);
    if counts.contains(&0) {
        refill_empty(&rows, &mut labels, &mut centroids, &mut counts);
        update_means(&rows, &labels, &mut centroids);
    }
    let inertia = inertia_of(&rows, &labels, &centroids);
    let flat = centroids.into_iter().flatten().collect();
    Ok(KmeansResult {
        labels,
        centroids: Tensor::from_rows(k, dim, flat, DType::F64),
        iterations_run,
        inertia,
        inertia_history: history,
    })
}
