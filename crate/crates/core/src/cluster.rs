//! Intraclass k-means over encoder features, plus elbow selection for k.
//!
//! All distance math runs in f64 regardless of the feature element type, so
//! the SSE trace is comparable across runs and the monotonicity invariant
//! holds to within f64 rounding.

use crate::error::{Error, Result};
use crate::rng::{seed_rng, uniform_f64, uniform_usize, Rng};
use crate::scalar::Element;
use crate::tensor::Tensor;

pub const KMEANS_MAX_ITERS: usize = 100;

/// Row-major `rows x dim` feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    source: String,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Clustering("feature matrix must be nonempty".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::Clustering(format!(
                "{} values cannot fill {rows}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Clustering("non-finite feature value".into()));
        }
        Ok(Self {
            rows,
            dim,
            data,
            source: String::new(),
        })
    }

    /// Flattens a `[N, D]` tensor, widening to f64.
    pub fn from_tensor<E: Element>(t: &Tensor<E>) -> Result<Self> {
        let (rows, dim) = t.dims2()?;
        Self::new(rows, dim, t.data().iter().map(|v| v.to_f64()).collect())
    }

    /// Labels where the vectors came from (model and layer), for artifacts.
    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies a subset of rows into a new matrix, preserving order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Clustering("cannot select zero rows".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Clustering(format!("row {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self::new(indices.len(), self.dim, data)?.with_source(self.source.clone()))
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[derive(Clone, Debug)]
pub struct KmeansFit {
    /// Cluster index per row.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Total squared error after seeding, then after each iteration.
    pub sse_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KmeansFit {
    pub fn sse(&self) -> f64 {
        *self.sse_trace.last().expect("trace is never empty")
    }
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Ties in nearest-centroid assignment break to the lowest centroid index.
/// A cluster left empty after an update is reseeded to the point currently
/// farthest from its own centroid. Convergence means an assignment pass
/// changed nothing.
pub fn kmeans(features: &FeatureMatrix, k: usize, seed: u64, max_iters: usize) -> Result<KmeansFit> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::Clustering("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Clustering(format!("k = {k} exceeds {n} points")));
    }
    if max_iters == 0 {
        return Err(Error::Clustering("max_iters must be at least 1".into()));
    }
    let mut rng = seed_rng(seed);
    let mut centroids = plus_plus_seeds(features, k, &mut rng);
    let mut assignments = assign_all(features, &centroids);
    let mut trace = vec![total_sse(features, &centroids, &assignments)];

    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..max_iters {
        iterations += 1;
        update_centroids(features, &assignments, &mut centroids);
        reseed_empty_clusters(features, &assignments, &mut centroids);
        let next = assign_all(features, &centroids);
        let changes = next
            .iter()
            .zip(&assignments)
            .filter(|(a, b)| a != b)
            .count();
        assignments = next;
        trace.push(total_sse(features, &centroids, &assignments));
        if changes == 0 {
            converged = true;
            break;
        }
    }

    // Pin nonempty centroids at their member means so the fit is a fixed
    // point of the update step.
    update_centroids(features, &assignments, &mut centroids);
    Ok(KmeansFit {
        assignments,
        centroids,
        sse_trace: trace,
        iterations,
        converged,
    })
}

fn plus_plus_seeds(features: &FeatureMatrix, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = features.rows();
    let mut chosen: Vec<usize> = vec![uniform_usize(rng, n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| dist2(features.row(i), features.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = uniform_f64(rng) * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // all mass at zero: fall back to the first point not yet chosen
            (0..n)
                .find(|i| !chosen.contains(i))
                .expect("k <= n leaves an unused point")
        };
        chosen.push(next);
        for i in 0..n {
            d2[i] = d2[i].min(dist2(features.row(i), features.row(next)));
        }
    }
    chosen
        .into_iter()
        .map(|i| features.row(i).to_vec())
        .collect()
}

fn assign_all(features: &FeatureMatrix, centroids: &[Vec<f64>]) -> Vec<usize> {
    (0..features.rows())
        .map(|i| {
            let row = features.row(i);
            let mut best = 0usize;
            let mut best_d = dist2(row, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = dist2(row, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn update_centroids(features: &FeatureMatrix, assignments: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = features.dim();
    let mut counts = vec![0usize; centroids.len()];
    let mut sums = vec![vec![0.0f64; dim]; centroids.len()];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    for (c, count) in counts.iter().enumerate() {
        if *count > 0 {
            for (slot, s) in centroids[c].iter_mut().zip(&sums[c]) {
                *slot = s / *count as f64;
            }
        }
    }
}

fn reseed_empty_clusters(
    features: &FeatureMatrix,
    assignments: &[usize],
    centroids: &mut [Vec<f64>],
) {
    let mut member_count = vec![0usize; centroids.len()];
    for &c in assignments {
        member_count[c] += 1;
    }
    let mut taken: Vec<usize> = Vec::new();
    for c in 0..centroids.len() {
        if member_count[c] > 0 {
            continue;
        }
        // steal the point farthest from its own centroid
        let mut pick = None;
        let mut pick_d = -1.0f64;
        for (i, &cluster) in assignments.iter().enumerate() {
            if taken.contains(&i) {
                continue;
            }
            let d = dist2(features.row(i), &centroids[cluster]);
            if d > pick_d {
                pick_d = d;
                pick = Some(i);
            }
        }
        if let Some(i) = pick {
            centroids[c] = features.row(i).to_vec();
            taken.push(i);
        }
    }
}

fn total_sse(features: &FeatureMatrix, centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &c)| dist2(features.row(i), &centroids[c]))
        .sum()
}

/// Final SSE for each k in `ks`, in order. Seeds are derived per k so the
/// sweep is reproducible as a whole.
pub fn sweep_k(
    features: &FeatureMatrix,
    ks: &[usize],
    seed: u64,
    max_iters: usize,
) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| {
            let fit = kmeans(
                features,
                k,
                crate::rng::derive_seed(seed, &format!("k{k}")),
                max_iters,
            )?;
            Ok((k, fit.sse()))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElbowChoice {
    pub k: usize,
    /// Set when the curve gave nothing to bend around, in which case `k` is
    /// simply the smallest candidate.
    pub degenerate: bool,
}

/// Picks the k whose (k, SSE) point lies farthest from the chord between the
/// sweep's endpoints. Axes are normalized first, so the choice is invariant
/// under rescaling either axis. Ties go to the smallest k.
pub fn elbow_select(sse_by_k: &[(usize, f64)]) -> Result<ElbowChoice> {
    if sse_by_k.is_empty() {
        return Err(Error::Clustering("elbow needs at least one point".into()));
    }
    if sse_by_k.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Clustering("k values must be strictly increasing".into()));
    }
    if sse_by_k.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::Clustering("non-finite SSE in sweep".into()));
    }
    let first = sse_by_k[0];
    let last = *sse_by_k.last().unwrap();
    if sse_by_k.len() < 3 || first.1 <= last.1 {
        return Ok(ElbowChoice {
            k: first.0,
            degenerate: true,
        });
    }
    let k_span = (last.0 - first.0) as f64;
    let sse_span = first.1 - last.1;
    // After normalization the chord runs from (0, 1) to (1, 0); distance to
    // it is |x + y - 1| / sqrt(2), and the constant factor cannot change the
    // argmax.
    let mut best_k = first.0;
    let mut best_d = 0.0f64;
    for &(k, sse) in sse_by_k {
        let x = (k - first.0) as f64 / k_span;
        let y = (sse - last.1) / sse_span;
        let d = (x + y - 1.0).abs();
        if d > best_d {
            best_d = d;
            best_k = k;
        }
    }
    if best_d < 1e-9 {
        return Ok(ElbowChoice {
            k: first.0,
            degenerate: true,
        });
    }
    Ok(ElbowChoice {
        k: best_k,
        degenerate: false,
    })
}
