//! Truncated SVD, k-means and sign clustering.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, job_rng};

const EIGEN_MAX_ITER: usize = 10_000;

/// Leading left singular vectors and values of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEmbedding {
    /// `n x k`, columns ordered by descending singular value.
    pub vectors: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

impl SpectralEmbedding {
    pub fn k(&self) -> usize {
        self.singular_values.len()
    }
}

/// Flip `v` so its largest-magnitude entry (first one on ties) is positive.
fn canonical_sign(mut v: DVector<f64>) -> DVector<f64> {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
    v
}

fn top_eigenpairs(gram: DMatrix<f64>, k: usize) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let eig = SymmetricEigen::try_new(gram, f64::EPSILON, EIGEN_MAX_ITER).ok_or(Error::Convergence {
        iterations: EIGEN_MAX_ITER,
    })?;
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = idx[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = idx[..k].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    Ok((values, vectors))
}

/// Top-`k` left singular vectors of `a` through the eigendecomposition of the
/// smaller Gram matrix (`A A^T` when `a` is wide, `A^T A` otherwise).
pub fn truncated_svd(a: &DMatrix<f64>, k: usize) -> Result<SpectralEmbedding> {
    let (n, m) = a.shape();
    if k == 0 || k > n.min(m) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={} for a {n}x{m} matrix",
            n.min(m)
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to truncated_svd".into()));
    }
    let (eigvals, left): (Vec<f64>, Vec<DVector<f64>>) = if m > n {
        top_eigenpairs(a * a.transpose(), k)?
    } else {
        let (vals, right) = top_eigenpairs(a.transpose() * a, k)?;
        let mut left = Vec::with_capacity(k);
        for (lam, v) in vals.iter().zip(&right) {
            let sigma = lam.sqrt();
            if sigma <= f64::EPSILON.sqrt() * vals[0].sqrt().max(f64::MIN_POSITIVE) {
                return Err(Error::RankDeficient { requested: k });
            }
            left.push((a * v) / sigma);
        }
        (vals, left)
    };
    let sigma1_sq = eigvals[0];
    let mut vectors = DMatrix::zeros(n, k);
    for (c, u) in left.into_iter().enumerate() {
        let u = canonical_sign(u.normalize());
        let resid = (a * (a.transpose() * &u) - &u * eigvals[c]).norm();
        if resid > 1e-6 * sigma1_sq.max(f64::MIN_POSITIVE) && sigma1_sq > 0.0 {
            return Err(Error::Convergence {
                iterations: EIGEN_MAX_ITER,
            });
        }
        vectors.set_column(c, &u);
    }
    Ok(SpectralEmbedding {
        vectors,
        singular_values: eigvals.iter().map(|l| l.sqrt()).collect(),
    })
}

/// Lloyd iteration settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            restarts: 30,
            max_iter: 100,
        }
    }
}

/// Predicted labels in `1..=k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    /// Within-cluster sum of squared distances; 0 for rule-based clusterings.
    pub objective: f64,
    pub seed: u64,
    pub method_tag: String,
    /// Empty-cluster reseeds performed in the winning restart.
    pub empty_reseeds: usize,
    /// Objective after each Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
}

struct LloydRun {
    labels: Vec<usize>,
    objective: f64,
    reseeds: usize,
    trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(point, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(rows: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut centroids = vec![rows[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(rows[pick].clone());
        let newest = centroids.last().expect("just pushed");
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, newest));
        }
    }
    centroids
}

fn lloyd(rows: &[Vec<f64>], k: usize, max_iter: usize, seed: u64) -> LloydRun {
    let n = rows.len();
    let dim = rows[0].len();
    let mut rng = job_rng(seed);
    let mut centroids = plus_plus_init(rows, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut reseeds = 0;
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let (c, _) = nearest(r, &centroids);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(r) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Move the empty centroid onto the worst-fitted point.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&rows[a], &centroids[labels[a]])
                            .total_cmp(&sq_dist(&rows[b], &centroids[labels[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("n >= 1");
                centroids[c] = rows[far].clone();
                reseeds += 1;
            }
        }
        let obj = rows
            .iter()
            .zip(&labels)
            .map(|(r, &l)| sq_dist(r, &centroids[l]))
            .sum();
        trace.push(obj);
    }
    let objective = rows
        .iter()
        .zip(&labels)
        .map(|(r, &l)| sq_dist(r, &centroids[l]))
        .sum();
    LloydRun {
        labels,
        objective,
        reseeds,
        trace,
    }
}

/// k-means++ seeded Lloyd iterations, best objective over `config.restarts`.
///
/// Restart `r` uses `derive_seed(seed, r)`, so adding restarts never worsens the result.
pub fn kmeans(points: &DMatrix<f64>, k: usize, config: KmeansConfig, seed: u64) -> Result<ClusterAssignment> {
    let (n, d) = points.shape();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("K = {k} outside 1..={n}")));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("points have zero dimensions".into()));
    }
    if config.restarts == 0 || config.max_iter == 0 {
        return Err(Error::InvalidArgument("restarts and max_iter must be positive".into()));
    }
    let rows: Vec<Vec<f64>> = points.row_iter().map(|r| r.iter().copied().collect()).collect();
    let runs: Vec<LloydRun> = (0..config.restarts)
        .into_par_iter()
        .map(|r| lloyd(&rows, k, config.max_iter, derive_seed(seed, r as u64)))
        .collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.objective < a.objective { b } else { a })
        .expect("at least one restart");
    Ok(ClusterAssignment {
        labels: best.labels.iter().map(|l| l + 1).collect(),
        k,
        objective: best.objective,
        seed,
        method_tag: "kmeans".into(),
        empty_reseeds: best.reseeds,
        trace: best.trace,
    })
}

/// Label 1 where `xi >= 0`, label 2 otherwise.
pub fn sign_cluster(xi: &[f64]) -> ClusterAssignment {
    ClusterAssignment {
        labels: xi.iter().map(|&v| if v >= 0.0 { 1 } else { 2 }).collect(),
        k: 2,
        objective: 0.0,
        seed: 0,
        method_tag: "sign".into(),
        empty_reseeds: 0,
        trace: Vec::new(),
    }
}
