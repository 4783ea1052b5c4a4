//! Exact classical baselines: Lloyd's algorithm, k-means++ seeding,
//! spectral initialisation, and top-k eigenvector extraction by power
//! iteration with deflation.
//!
//! These are the oracles the constructed transformers are checked against,
//! so they are written for determinism and clarity rather than speed. All
//! ties (nearest centroid, farthest point) break to the lowest index.

use crate::linalg::{jacobi_eigh, l2, power_method_ref, LinalgError, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClassicalError {
    #[error("data has rank < {needed} (eigenvalue {found:e} at position {needed})")]
    RankDeficient { needed: usize, found: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Squared Euclidean distance between column `j` of `x` and column `c` of
/// `cents`.
fn dist2(x: &Mat, j: usize, cents: &Mat, c: usize) -> f64 {
    let mut s = 0.0;
    for r in 0..x.rows() {
        let d = x.get(r, j) - cents.get(r, c);
        s += d * d;
    }
    s
}

fn nearest_centroid(x: &Mat, j: usize, cents: &Mat) -> usize {
    let mut best = 0usize;
    let mut best_d = dist2(x, j, cents, 0);
    for c in 1..cents.cols() {
        let d = dist2(x, j, cents, c);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Full trace of a Lloyd run.
///
/// `assignments[0]` is the initial assignment to the *given* centroids;
/// `assignments[t]` and `centroids[t - 1]` describe round `t`. `objectives`
/// records the k-means objective after every reassignment (length
/// `assignments.len()`), and is non-increasing.
#[derive(Debug, Clone)]
pub struct LloydRun {
    pub assignments: Vec<Vec<usize>>,
    pub centroids: Vec<Mat>,
    pub objectives: Vec<f64>,
    /// True if the run stopped early because assignments repeated.
    pub converged: bool,
}

impl LloydRun {
    /// Assignment after round `t` (`t = 0` is the initial assignment);
    /// clamps to the final assignment if the run converged before `t`.
    pub fn assignment_at(&self, t: usize) -> &[usize] {
        let idx = t.min(self.assignments.len() - 1);
        &self.assignments[idx]
    }

    pub fn final_assignment(&self) -> &[usize] {
        self.assignments.last().unwrap()
    }

    pub fn final_centroids(&self) -> &Mat {
        self.centroids.last().unwrap()
    }
}

fn objective(x: &Mat, z: &[usize], cents: &Mat) -> f64 {
    z.iter().enumerate().map(|(j, &c)| dist2(x, j, cents, c)).sum()
}

/// Lloyd's algorithm for `tau` rounds from the given initial centroids.
///
/// Round structure: assign every point to its nearest initial centroid,
/// then repeat `tau` times: recompute centroids as cluster means (an empty
/// cluster is re-seeded with the point farthest from its own centroid),
/// then reassign. Stops early once assignments repeat.
pub fn lloyd(x: &Mat, init_centroids: &Mat, tau: usize) -> Result<LloydRun, ClassicalError> {
    let (d, n) = (x.rows(), x.cols());
    let k = init_centroids.cols();
    if init_centroids.rows() != d {
        return Err(ClassicalError::InvalidParam(format!(
            "centroid dim {} != data dim {d}",
            init_centroids.rows()
        )));
    }
    if k == 0 || k > n {
        return Err(ClassicalError::InvalidParam(format!("need 1 <= k <= N, got k={k}, N={n}")));
    }

    let z0: Vec<usize> = (0..n).map(|j| nearest_centroid(x, j, init_centroids)).collect();
    let mut assignments = vec![z0];
    let mut centroids: Vec<Mat> = Vec::new();
    let mut objectives = vec![objective(x, assignments.last().unwrap(), init_centroids)];
    let mut converged = false;

    for _ in 0..tau {
        let z_prev = assignments.last().unwrap().clone();
        let mut cents = Mat::zeros(d, k);
        let mut counts = vec![0usize; k];
        for (j, &c) in z_prev.iter().enumerate() {
            counts[c] += 1;
            for r in 0..d {
                cents.add_at(r, c, x.get(r, j));
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for r in 0..d {
                    cents.set(r, c, cents.get(r, c) / counts[c] as f64);
                }
            }
        }
        // Re-seed empty clusters with the point currently farthest from its
        // own (new) centroid; lowest index wins ties.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far_j = 0usize;
            let mut far_d = -1.0;
            for j in 0..n {
                let dj = dist2(x, j, &cents, z_prev[j]);
                if dj > far_d {
                    far_d = dj;
                    far_j = j;
                }
            }
            for r in 0..d {
                cents.set(r, c, x.get(r, far_j));
            }
        }
        let z_new: Vec<usize> = (0..n).map(|j| nearest_centroid(x, j, &cents)).collect();
        objectives.push(objective(x, &z_new, &cents));
        centroids.push(cents);
        let done = z_new == z_prev;
        assignments.push(z_new);
        if done {
            converged = true;
            break;
        }
    }
    Ok(LloydRun { assignments, centroids, objectives, converged })
}

/// k-means++ seeding: first centroid uniform, subsequent centroids sampled
/// with probability proportional to squared distance to the nearest chosen
/// centroid. Deterministic for a fixed seed; centroids are data points.
pub fn kmeanspp(x: &Mat, k: usize, seed: u64) -> Result<Mat, ClassicalError> {
    let (d, n) = (x.rows(), x.cols());
    if k == 0 || k > n {
        return Err(ClassicalError::InvalidParam(format!("need 1 <= k <= N, got k={k}, N={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|j| {
            let mut s = 0.0;
            for r in 0..d {
                let diff = x.get(r, j) - x.get(r, chosen[0]);
                s += diff * diff;
            }
            s
        })
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // All mass at chosen points (duplicate data); fall back to uniform.
            rng.gen_range(0..n)
        } else {
            let mut t = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (j, &w) in d2.iter().enumerate() {
                if t < w {
                    idx = j;
                    break;
                }
                t -= w;
            }
            idx
        };
        chosen.push(pick);
        for j in 0..n {
            let mut s = 0.0;
            for r in 0..d {
                let diff = x.get(r, j) - x.get(r, pick);
                s += diff * diff;
            }
            if s < d2[j] {
                d2[j] = s;
            }
        }
    }
    let mut cents = Mat::zeros(d, k);
    for (c, &j) in chosen.iter().enumerate() {
        for r in 0..d {
            cents.set(r, c, x.get(r, j));
        }
    }
    Ok(cents)
}

/// Spectral initialisation: project onto the top-k eigenvectors of `XXᵀ`,
/// cluster the projection with k-means++ + Lloyd, and lift the clusters back
/// as per-cluster data means in the original space.
pub fn spectral_init(x: &Mat, k: usize, seed: u64) -> Result<Mat, ClassicalError> {
    let (d, n) = (x.rows(), x.cols());
    if k == 0 || k > n {
        return Err(ClassicalError::InvalidParam(format!("need 1 <= k <= N, got k={k}, N={n}")));
    }
    if k > d {
        return Err(ClassicalError::InvalidParam(format!("need k <= d for projection, k={k}, d={d}")));
    }
    let xt = x.transpose();
    let gram = x.matmul(&xt); // d x d
    let (eigvals, eigvecs) = jacobi_eigh(&gram)?;
    let scale = eigvals[0].abs().max(1e-300);
    if eigvals[k - 1] <= 1e-12 * scale {
        return Err(ClassicalError::RankDeficient { needed: k, found: eigvals[k - 1] });
    }
    // U: d x k top eigenvectors; Y = Uᵀ X is the k x N projection.
    let mut ut = Mat::zeros(k, d);
    for c in 0..k {
        for r in 0..d {
            ut.set(c, r, eigvecs.get(r, c));
        }
    }
    let y = ut.matmul(x);
    let init = kmeanspp(&y, k, seed)?;
    let run = lloyd(&y, &init, 100)?;
    let z = run.final_assignment();

    let mut cents = Mat::zeros(d, k);
    let mut counts = vec![0usize; k];
    for (j, &c) in z.iter().enumerate() {
        counts[c] += 1;
        for r in 0..d {
            cents.add_at(r, c, x.get(r, j));
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            // Degenerate projected clustering; keep the centroid at the mean
            // of all data so downstream code still has k finite centroids.
            for r in 0..d {
                let mean: f64 = (0..n).map(|j| x.get(r, j)).sum::<f64>() / n as f64;
                cents.set(r, c, mean);
            }
        } else {
            for r in 0..d {
                cents.set(r, c, cents.get(r, c) / counts[c] as f64);
            }
        }
    }
    Ok(cents)
}

/// Result of [`topk_deflation`].
#[derive(Debug, Clone)]
pub struct TopkResult {
    /// Estimated eigenvectors as columns (`d x k`), unit norm.
    pub vectors: Mat,
    /// Estimated eigenvalues `‖A_i p_i‖`.
    pub values: Vec<f64>,
    /// Set when two consecutive eigenvalue estimates are separated by less
    /// than `1e-8`; the deflation is ill-conditioned in that case.
    pub gap_warning: bool,
}

/// Top-k eigenpairs of a symmetric matrix by power iteration (`tau` steps
/// per vector from a seeded sphere-uniform start) and deflation with the
/// *estimated* pair: `A_{i+1} = A_i − ‖A_i p‖ p pᵀ`.
pub fn topk_deflation(
    a: &Mat,
    k: usize,
    tau: usize,
    seed: u64,
) -> Result<TopkResult, ClassicalError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::NotSquare { rows: a.rows(), cols: a.cols() }.into());
    }
    let d = a.rows();
    if k == 0 || k > d {
        return Err(ClassicalError::InvalidParam(format!("need 1 <= k <= d, got k={k}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = a.clone();
    let mut vectors = Mat::zeros(d, k);
    let mut values: Vec<f64> = Vec::with_capacity(k);
    let mut gap_warning = false;
    for i in 0..k {
        let v0 = sphere_uniform(d, &mut rng);
        let p = power_method_ref(&cur, &v0, tau)?;
        let ap: Vec<f64> = (0..d)
            .map(|r| (0..d).map(|c| cur.get(r, c) * p[c]).sum::<f64>())
            .collect();
        let lam = l2(&ap);
        if let Some(&prev) = values.last() {
            if (prev - lam).abs() < 1e-8 {
                gap_warning = true;
            }
        }
        values.push(lam);
        for r in 0..d {
            vectors.set(r, i, p[r]);
        }
        for r in 0..d {
            for c in 0..d {
                cur.add_at(r, c, -lam * p[r] * p[c]);
            }
        }
    }
    Ok(TopkResult { vectors, values, gap_warning })
}

/// Uniform draw from the unit sphere in `R^d` (normalised Gaussian).
pub fn sphere_uniform(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = l2(&v);
        if n > 1e-12 {
            return v.iter().map(|&x| x / n).collect();
        }
    }
}
