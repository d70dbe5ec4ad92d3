//! K-Means clustering of representations and permutation-matched error.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::network::{Tap, TrainedModel};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            clusters: NUM_CLASSES,
            restarts: 10,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f32>,
    /// Within-cluster sum of squared distances.
    pub sse: f64,
    pub restart: usize,
    pub iterations: usize,
    /// SSE after each assignment step of the winning restart.
    pub sse_trace: Vec<f64>,
}

fn row_norms(x: ArrayView2<'_, f32>) -> Vec<f64> {
    x.outer_iter()
        .map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum())
        .collect()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Squared distances from every point to every centroid, `[n, k]`.
fn distances(x: ArrayView2<'_, f32>, norms: &[f64], c: &Array2<f32>) -> Array2<f64> {
    let cross = x.dot(&c.t());
    let cn = row_norms(c.view());
    let mut d = Array2::<f64>::zeros(cross.dim());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (norms[i] - 2.0 * cross[[i, j]] as f64 + cn[j]).max(0.0);
    }
    d
}

fn sample_weighted(weights: &[f64], total: f64, rng: &mut Rng) -> usize {
    if !(total > 0.0) {
        return rng.random_range(0..weights.len());
    }
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Greedy k-means++: each new center is the best of `2 + ln k` candidates
/// drawn proportionally to the squared distance to the nearest center.
fn seed_centroids(x: ArrayView2<'_, f32>, k: usize, rng: &mut Rng) -> Array2<f32> {
    let (n, d) = x.dim();
    let flat = x.as_slice().expect("standard layout");
    let row = |i: usize| &flat[i * d..(i + 1) * d];
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = Array2::<f32>::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let mut closest: Vec<f64> = (0..n).into_par_iter().map(|i| sq_dist(row(i), row(first))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = sample_weighted(&closest, total, rng);
            let updated: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| closest[i].min(sq_dist(row(i), row(cand))))
                .collect();
            let pot: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.0) {
                best = Some((pot, cand, updated));
            }
        }
        let (_, idx, updated) = best.expect("at least one trial");
        centers.row_mut(c).assign(&x.row(idx));
        closest = updated;
    }
    centers
}

fn assign_nearest(dist: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    dist.outer_iter()
        .map(|r| {
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] < r[best] {
                    best = j;
                }
            }
            (best, r[best])
        })
        .unzip()
}

fn lloyd(x: ArrayView2<'_, f32>, k: usize, max_iter: usize, rng: &mut Rng) -> KMeansResult {
    let (n, d) = x.dim();
    let norms = row_norms(x);
    let mut centroids = seed_centroids(x, k, rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let dist = distances(x, &norms, &centroids);
        let (next, best) = assign_nearest(&dist);
        trace.push(best.iter().sum());
        let converged = next == assignments;
        assignments = next;
        if converged {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            sums.row_mut(a).zip_mut_with(&x.row(i), |s, &v| *s += v as f64);
        }
        // Empty clusters move to the points farthest from their centroids.
        let mut far: Vec<usize> = (0..n).collect();
        far.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
        let mut far = far.into_iter();
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                centroids.row_mut(j).zip_mut_with(&sums.row(j), |o, &s| *o = (s / c) as f32);
            } else if let Some(p) = far.next() {
                centroids.row_mut(j).assign(&x.row(p));
            }
        }
    }
    let sse = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            sq_dist(
                x.row(i).as_slice().expect("standard layout"),
                centroids.row(a).as_slice().expect("standard layout"),
            )
        })
        .sum();
    KMeansResult {
        assignments,
        centroids,
        sse,
        restart: 0,
        iterations,
        sse_trace: trace,
    }
}

/// Best of `restarts` seeded Lloyd runs by SSE (lowest restart index on ties).
pub fn kmeans(x: ArrayView2<'_, f32>, cfg: &KMeansConfig, seed: u64) -> Result<KMeansResult> {
    let (n, _) = x.dim();
    if cfg.clusters == 0 || cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(Error::Config("k-means needs positive clusters, restarts and iterations".into()));
    }
    if n < cfg.clusters {
        return Err(Error::Config(format!("{n} points cannot form {} clusters", cfg.clusters)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in k-means input".into()));
    }
    let x = x.as_standard_layout();
    let runs: Vec<KMeansResult> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed, &[seed::KMEANS, r as u64]);
            let mut res = lloyd(x.view(), cfg.clusters, cfg.max_iter, &mut rng);
            res.restart = r;
            res
        })
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.sse < best.sse { r } else { best })
        .expect("at least one restart"))
}

/// Minimum-cost perfect matching on a square matrix; returns row → column.
pub fn hungarian(cost: &Array2<i64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // Potentials with 1-based sentinel column 0.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut matched = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        if matched[j] > 0 {
            out[matched[j] - 1] = j - 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub error: f64,
    pub matched: usize,
    /// `permutation[cluster] = class`.
    pub permutation: Vec<usize>,
}

/// `table[cluster][class]` counts.
pub fn contingency(assignments: &[usize], labels: &[u8], classes: usize) -> Result<Array2<i64>> {
    if assignments.len() != labels.len() {
        return Err(Error::Labels(format!(
            "{} assignments but {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    let mut t = Array2::<i64>::zeros((classes, classes));
    for (&a, &l) in assignments.iter().zip(labels) {
        if a >= classes || l as usize >= classes {
            return Err(Error::Labels(format!(
                "cluster {a} / label {l} outside 0..{classes}"
            )));
        }
        t[[a, l as usize]] += 1;
    }
    Ok(t)
}

/// Error under the best cluster → class bijection over `classes` ids.
pub fn match_and_score_k(assignments: &[usize], labels: &[u8], classes: usize) -> Result<MatchResult> {
    let t = contingency(assignments, labels, classes)?;
    let max = t.iter().copied().max().unwrap_or(0);
    let perm = hungarian(&t.mapv(|c| max - c));
    let matched: i64 = perm.iter().enumerate().map(|(a, &l)| t[[a, l]]).sum();
    let n = labels.len();
    Ok(MatchResult {
        error: if n == 0 { 0.0 } else { 1.0 - matched as f64 / n as f64 },
        matched: matched as usize,
        permutation: perm,
    })
}

pub fn match_and_score(assignments: &[usize], labels: &[u8]) -> Result<MatchResult> {
    match_and_score_k(assignments, labels, NUM_CLASSES)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapScore {
    pub tap: String,
    pub error: f64,
    pub sse: f64,
    pub dim: usize,
    pub permutation: Vec<usize>,
}

/// K-Means on `vectors`, scored against `labels`.
pub fn cluster_error(vectors: ArrayView2<'_, f32>, labels: &[u8], cfg: &KMeansConfig, seed: u64) -> Result<(MatchResult, KMeansResult)> {
    if vectors.nrows() != labels.len() {
        return Err(Error::Labels(format!(
            "{} vectors but {} labels",
            vectors.nrows(),
            labels.len()
        )));
    }
    let km = kmeans(vectors, cfg, seed)?;
    let m = match_and_score_k(&km.assignments, labels, cfg.clusters.max(NUM_CLASSES))?;
    Ok((m, km))
}

pub fn evaluate_model(model: &TrainedModel, images: &ImageSet, tap: Tap, cfg: &KMeansConfig, seed: u64) -> Result<TapScore> {
    let labels = images
        .labels()
        .ok_or_else(|| Error::Labels("evaluation needs labelled images".into()))?;
    let rep = model.represent(images.pixels(), tap)?;
    let (m, km) = cluster_error(rep.view(), labels, cfg, seed)?;
    Ok(TapScore {
        tap: tap.to_string(),
        error: m.error,
        sse: km.sse,
        dim: rep.ncols(),
        permutation: m.permutation,
    })
}

/// Column means, used by tests and diagnostics.
pub fn centroid_of(x: ArrayView2<'_, f32>) -> Vec<f64> {
    x.mapv(f64::from).mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
}
