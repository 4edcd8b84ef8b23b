//! Mini-batch k-means with k-means++ seeding.
//!
//! The main loop follows Sculley-style mini-batch updates with per-center
//! learning rates. Two additions make the result well behaved for the rest
//! of the pipeline:
//!
//! * the returned model is the best snapshot by full-data SSE, so the
//!   recorded SSE trace is non-increasing even though individual mini-batch
//!   steps are noisy;
//! * a short full-data refinement runs after the mini-batch phase, which
//!   pins exact centroid means on small inputs without costing anything at
//!   scale (the pass count is capped).
//!
//! Clusters left empty by the final assignment are reseeded from the point
//! farthest from its centroid; each reseed strictly lowers SSE.

use super::dense::{squared_distance, DenseMatrix};
use super::rng::RngStream;
use crate::error::{Result, TadsError};
use rand::Rng;

const REFINEMENT_PASS_CAP: usize = 10;

#[derive(Debug, Clone)]
pub struct KMeansModel {
    pub k: usize,
    pub centroids: DenseMatrix,
    pub seed: u64,
    pub iterations_run: usize,
    /// Full-data SSE of the best snapshot, recorded after init, after each
    /// mini-batch iteration, after each refinement pass, and after each
    /// empty-cluster repair. Non-increasing by construction.
    pub sse_trace: Vec<f64>,
}

impl KMeansModel {
    /// Index of the nearest centroid, lowest index on ties.
    pub fn assign(&self, point: &[f64]) -> usize {
        nearest(&self.centroids, point).0
    }

    pub fn sse(&self, points: &DenseMatrix) -> f64 {
        points.iter_rows().map(|p| nearest(&self.centroids, p).1).sum()
    }
}

fn nearest(centroids: &DenseMatrix, point: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (idx, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(c, point);
        if d < best.1 {
            best = (idx, d);
        }
    }
    best
}

/// Shared heuristic for how many clusters an `n`-sample pool gets when a
/// config leaves the count unset: one cluster per 500 samples, clamped to
/// [8, 512] and never above `n`.
pub fn default_cluster_count(n: usize) -> usize {
    n.div_ceil(500).clamp(8, 512).min(n)
}

/// Clusters `points` into `k` groups. Returns the fitted model and one
/// cluster index per input row. Fully deterministic given the stream.
pub fn kmeans_cluster(
    points: &DenseMatrix,
    k: usize,
    batch_size: usize,
    iters: usize,
    stream: &RngStream,
) -> Result<(KMeansModel, Vec<usize>)> {
    let n = points.rows();
    if n == 0 {
        return Err(TadsError::InvalidConfig("cannot cluster an empty point set".into()));
    }
    if k == 0 || k > n {
        return Err(TadsError::InvalidConfig(format!("k = {k} with {n} points")));
    }
    if batch_size == 0 {
        return Err(TadsError::InvalidConfig("batch_size must be positive".into()));
    }

    let mut rng = stream.rng();
    let mut centroids = plus_plus_init(points, k, &mut rng);

    let mut best = centroids.clone();
    let mut best_sse = sse_of(&centroids, points);
    let mut trace = vec![best_sse];

    let mut counts = vec![0u64; k];
    for _ in 0..iters {
        for _ in 0..batch_size {
            let idx = rng.gen_range(0..n);
            let point = points.row(idx).to_vec();
            let (c, _) = nearest(&centroids, &point);
            counts[c] += 1;
            let lr = 1.0 / counts[c] as f64;
            let row = centroids.row_mut(c);
            for (w, &x) in row.iter_mut().zip(&point) {
                *w += lr * (x - *w);
            }
        }
        let sse = sse_of(&centroids, points);
        if sse < best_sse {
            best_sse = sse;
            best.as_mut_slice().copy_from_slice(centroids.as_slice());
        }
        trace.push(best_sse);
    }

    // Full-data refinement from the best snapshot. Lloyd steps never
    // increase SSE, so the trace stays monotone.
    let mut assignments = assign_all(&best, points);
    for _ in 0..REFINEMENT_PASS_CAP {
        let moved = lloyd_update(&mut best, points, &assignments);
        let next = assign_all(&best, points);
        let stable = next == assignments;
        assignments = next;
        best_sse = sse_of(&best, points);
        trace.push(best_sse);
        if stable && !moved {
            break;
        }
    }

    // Reseed empty clusters from the globally worst-fit point.
    for _ in 0..k {
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
        let (farthest, _) = points
            .iter_rows()
            .enumerate()
            .map(|(i, p)| (i, squared_distance(p, best.row(assignments[i]))))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty point set");
        let seed_point = points.row(farthest).to_vec();
        best.row_mut(empty).copy_from_slice(&seed_point);
        assignments = assign_all(&best, points);
        best_sse = sse_of(&best, points);
        trace.push(best_sse);
    }

    let model = KMeansModel {
        k,
        centroids: best,
        seed: stream.child_seed(),
        iterations_run: iters,
        sse_trace: trace,
    };
    Ok((model, assignments))
}

fn assign_all(centroids: &DenseMatrix, points: &DenseMatrix) -> Vec<usize> {
    points.iter_rows().map(|p| nearest(centroids, p).0).collect()
}

fn sse_of(centroids: &DenseMatrix, points: &DenseMatrix) -> f64 {
    points.iter_rows().map(|p| nearest(centroids, p).1).sum()
}

/// Moves every non-empty centroid to the mean of its members. Returns true
/// if any centroid changed.
fn lloyd_update(centroids: &mut DenseMatrix, points: &DenseMatrix, assignments: &[usize]) -> bool {
    let (k, d) = (centroids.rows(), centroids.cols());
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter_rows().zip(assignments) {
        counts[a] += 1;
        for (s, &x) in sums[a * d..(a + 1) * d].iter_mut().zip(p) {
            *s += x;
        }
    }
    let mut moved = false;
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        let row = centroids.row_mut(c);
        for (w, &s) in row.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
            let mean = s * inv;
            if mean != *w {
                moved = true;
            }
            *w = mean;
        }
    }
    moved
}

/// k-means++: first center uniform, later centers weighted by squared
/// distance to the nearest chosen center. Falls back to a uniform draw if
/// every candidate weight collapses to zero (duplicate-heavy inputs).
fn plus_plus_init(points: &DenseMatrix, k: usize, rng: &mut impl Rng) -> DenseMatrix {
    let n = points.rows();
    let d = points.cols();
    let mut centroids = DenseMatrix::zeros(k, d);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));

    let mut dist2: Vec<f64> = points.iter_rows().map(|p| squared_distance(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let mut r = rng.gen_range(0.0..1.0) * total;
            let mut chosen = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            let d2 = squared_distance(p, centroids.row(c));
            if d2 < dist2[i] {
                dist2[i] = d2;
            }
        }
    }
    centroids
}
