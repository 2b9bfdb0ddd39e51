//! Sample-based distances between 2-D point sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Minimum-cost perfect matching on a dense `n×n` cost matrix (row-major).
/// Returns `assignment[row] = column`. Shortest augmenting paths with
/// potentials, `O(n³)` worst case.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n×n");
    // 1-based internally; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - ui0 - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[owner[j] - 1] = j - 1;
    }
    out
}

/// Exact 2-Wasserstein distance between two equal-size empirical measures.
pub fn wasserstein2(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::CountMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n == 0 {
        return Ok(0.0);
    }
    let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| sq_dist(p, q))).collect();
    let assign = assignment(&cost, n);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

/// Median pairwise distance over the pooled sample.
pub fn median_distance(points: &[Point]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            d.push(sq_dist(p, q).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Maximum mean discrepancy (square root of the biased estimate) under a
/// Gaussian kernel whose bandwidth is the pooled median distance.
pub fn mmd(a: &[Point], b: &[Point]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let pooled: Vec<Point> = a.iter().chain(b).copied().collect();
    let h = median_distance(&pooled);
    let gamma = if h > 0.0 { 1.0 / (2.0 * h * h) } else { 0.0 };
    let mean_k = |x: &[Point], y: &[Point]| -> f64 {
        let s: f64 = x.iter().map(|p| y.iter().map(|q| (-gamma * sq_dist(p, q)).exp()).sum::<f64>()).sum();
        s / (x.len() * y.len()) as f64
    };
    let m2 = mean_k(a, a) + mean_k(b, b) - 2.0 * mean_k(a, b);
    m2.max(0.0).sqrt()
}

/// Share of `samples` whose nearest mode is each entry of `modes`.
pub fn mode_fractions(samples: &[Point], modes: &[Point]) -> Vec<f64> {
    let mut counts = vec![0usize; modes.len()];
    for p in samples {
        let nearest = (0..modes.len()).min_by(|&i, &j| sq_dist(p, &modes[i]).total_cmp(&sq_dist(p, &modes[j])));
        if let Some(k) = nearest {
            counts[k] += 1;
        }
    }
    let n = samples.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

pub const COVERAGE_THRESHOLD: f64 = 0.01;

/// Fraction of modes receiving at least 1% of the samples.
pub fn coverage(samples: &[Point], modes: &[Point]) -> f64 {
    if modes.is_empty() {
        return 1.0;
    }
    let hit = mode_fractions(samples, modes).into_iter().filter(|&f| f >= COVERAGE_THRESHOLD).count();
    hit as f64 / modes.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionMetrics {
    pub w2: f64,
    pub mmd: f64,
    pub coverage: f64,
}

/// W2 and MMD between `samples` and `reference`, and coverage of `modes`
/// by `samples`.
pub fn eval_distribution(samples: &[Point], reference: &[Point], modes: &[Point]) -> Result<DistributionMetrics> {
    Ok(DistributionMetrics {
        w2: wasserstein2(samples, reference)?,
        mmd: mmd(samples, reference),
        coverage: coverage(samples, modes),
    })
}
