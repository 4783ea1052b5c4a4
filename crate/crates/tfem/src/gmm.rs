//! Synthetic spherical Gaussian mixture instances and clustering metrics.
//!
//! Instances are fully determined by `(k, d, per_cluster, delta, sigma,
//! alpha, seed)`. Means are rejection-sampled in a cube and then rescaled so
//! the *minimum* pairwise mean separation equals `delta` exactly (up to f64
//! rounding), which makes separation sweeps honest: `delta` is the realised
//! separation, not an upper bound.

use crate::linalg::{l2, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("alpha {alpha} infeasible for k={k}: requires alpha*k <= 1")]
    InfeasibleAlpha { alpha: f64, k: usize },
    #[error("mean rejection sampling exceeded {0} tries")]
    RejectionBudget(usize),
    #[error("instance csv parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A sampled mixture instance. `x` is `d x N` (points as columns), labels are
/// 0-based, `means` is `d x k`.
#[derive(Debug, Clone)]
pub struct GmmInstance {
    pub k: usize,
    pub d: usize,
    pub x: Mat,
    pub z: Vec<usize>,
    pub means: Mat,
    pub sigma: f64,
    pub delta: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl GmmInstance {
    pub fn n(&self) -> usize {
        self.x.cols()
    }

    /// Largest point norm, used to size approximation domains.
    pub fn max_point_norm(&self) -> f64 {
        (0..self.n()).map(|j| l2(&self.x.col(j))).fold(0.0, f64::max)
    }
}

fn min_pairwise_dist(means: &Mat) -> f64 {
    let k = means.cols();
    let mut best = f64::INFINITY;
    for a in 0..k {
        for b in (a + 1)..k {
            let d: f64 = (0..means.rows())
                .map(|r| {
                    let diff = means.get(r, a) - means.get(r, b);
                    diff * diff
                })
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Per-cluster sizes for `k` clusters totalling `n`, where the smallest
/// cluster holds `ceil(alpha * n)` points and the rest split the remainder
/// evenly. With `alpha = 1/k` this is the balanced design.
pub fn cluster_counts(k: usize, n: usize, alpha: f64) -> Result<Vec<usize>, GmmError> {
    if alpha <= 0.0 || alpha * k as f64 > 1.0 + 1e-12 {
        return Err(GmmError::InfeasibleAlpha { alpha, k });
    }
    if k == 1 {
        return Ok(vec![n]);
    }
    let n_min = ((alpha * n as f64).ceil() as usize).max(1);
    let rest = n - n_min;
    let base = rest / (k - 1);
    let extra = rest % (k - 1);
    let mut counts = vec![n_min];
    for i in 0..(k - 1) {
        counts.push(base + usize::from(i < extra));
    }
    if counts.iter().any(|&c| c < n_min) {
        return Err(GmmError::InfeasibleAlpha { alpha, k });
    }
    debug_assert_eq!(counts.iter().sum::<usize>(), n);
    Ok(counts)
}

const REJECTION_BUDGET: usize = 100_000;

/// Sample an instance with `per_cluster` points per cluster on average
/// (`n = k * per_cluster` total), exact minimum mean separation `delta`,
/// noise level `sigma`, and minimum cluster fraction `alpha`.
pub fn generate_instance(
    k: usize,
    d: usize,
    per_cluster: usize,
    delta: f64,
    sigma: f64,
    alpha: f64,
    seed: u64,
) -> Result<GmmInstance, GmmError> {
    if k == 0 || d == 0 || per_cluster == 0 {
        return Err(GmmError::InvalidParam("k, d and per_cluster must be positive".into()));
    }
    if !(delta > 0.0) || !(sigma >= 0.0) {
        return Err(GmmError::InvalidParam("need delta > 0 and sigma >= 0".into()));
    }
    let n = k * per_cluster;
    let counts = cluster_counts(k, n, alpha)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Means: uniform in [-1,1]^d, rejected until comfortably spread, then
    // rescaled so the min pairwise distance is delta exactly.
    let mut means = Mat::zeros(d, k);
    if k > 1 {
        let mut ok = false;
        for _ in 0..REJECTION_BUDGET {
            for c in 0..k {
                for r in 0..d {
                    means.set(r, c, rng.gen_range(-1.0..1.0));
                }
            }
            if min_pairwise_dist(&means) >= 0.25 {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(GmmError::RejectionBudget(REJECTION_BUDGET));
        }
        let scale = delta / min_pairwise_dist(&means);
        means.scale(scale);
    }

    let mut z = Vec::with_capacity(n);
    for (c, &cnt) in counts.iter().enumerate() {
        z.extend(std::iter::repeat(c).take(cnt));
    }
    let mut x = Mat::zeros(d, n);
    for (j, &c) in z.iter().enumerate() {
        for r in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            x.set(r, j, means.get(r, c) + sigma * noise);
        }
    }

    Ok(GmmInstance { k, d, x, z, means, sigma, delta, alpha, seed })
}

/// One-hot encoding of labels as a `k x N` matrix.
pub fn one_hot(z: &[usize], k: usize) -> Mat {
    let mut m = Mat::zeros(k, z.len());
    for (j, &c) in z.iter().enumerate() {
        assert!(c < k, "label {c} out of range for k={k}");
        m.set(c, j, 1.0);
    }
    m
}

/// Cost of matching soft-assignment row `r` to true label `c`:
/// `sum_i |a[r,i] - 1{z_i = c}|`.
fn perm_cost_matrix(a: &Mat, z: &[usize], k: usize) -> Mat {
    let n = z.len();
    assert_eq!(a.rows(), k);
    assert_eq!(a.cols(), n);
    let mut cost = Mat::zeros(k, k);
    for r in 0..k {
        for c in 0..k {
            let mut s = 0.0;
            for i in 0..n {
                let t = if z[i] == c { 1.0 } else { 0.0 };
                s += (a.get(r, i) - t).abs();
            }
            cost.set(r, c, s);
        }
    }
    cost
}

fn assignment_cost(cost: &Mat, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(r, &c)| cost.get(r, c)).sum()
}

/// Brute-force minimum-cost assignment over all permutations (k! work).
/// Exposed so the O(k³) solver below can be audited against it.
pub fn assignment_brute(cost: &Mat) -> Vec<usize> {
    let k = cost.rows();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_cost = assignment_cost(cost, &perm);
    // Heap's algorithm, iterative.
    let mut c = vec![0usize; k];
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let cur = assignment_cost(cost, &perm);
            if cur < best_cost {
                best_cost = cur;
                best = perm.clone();
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Hungarian algorithm (Kuhn–Munkres with potentials, O(k³)) for square
/// min-cost assignment. Returns `assign[row] = col`.
pub fn assignment_hungarian(cost: &Mat) -> Vec<usize> {
    let n = cost.rows();
    assert_eq!(n, cost.cols());
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

const BRUTE_FORCE_MAX_K: usize = 8;

/// Permutation-invariant clustering loss: the minimum over label
/// permutations of the mean entrywise L1 distance between the one-hot
/// encoding of the (relabelled) true labels and the soft assignment `a`
/// (`k x N`, columns are per-point distributions).
///
/// Exhaustive search for `k <= 8`, Hungarian assignment above that.
pub fn perm_loss(a: &Mat, z: &[usize], k: usize) -> f64 {
    let cost = perm_cost_matrix(a, z, k);
    let assign = if k <= BRUTE_FORCE_MAX_K {
        assignment_brute(&cost)
    } else {
        assignment_hungarian(&cost)
    };
    assignment_cost(&cost, &assign) / z.len() as f64
}

fn comb2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings.
pub fn ari(z: &[usize], zh: &[usize]) -> f64 {
    assert_eq!(z.len(), zh.len());
    let n = z.len();
    let ka = z.iter().max().map_or(0, |&m| m + 1);
    let kb = zh.iter().max().map_or(0, |&m| m + 1);
    let mut cont = vec![vec![0usize; kb]; ka];
    for i in 0..n {
        cont[z[i]][zh[i]] += 1;
    }
    let a: Vec<usize> = cont.iter().map(|row| row.iter().sum()).collect();
    let b: Vec<usize> = (0..kb).map(|j| cont.iter().map(|row| row[j]).sum()).collect();
    let sum_ij: f64 = cont.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_a: f64 = a.iter().map(|&c| comb2(c)).sum();
    let sum_b: f64 = b.iter().map(|&c| comb2(c)).sum();
    let total = comb2(n);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-300 {
        return 1.0; // both partitions trivial
    }
    (sum_ij - expected) / (max_index - expected)
}

/// Normalized mutual information with arithmetic-mean normalization:
/// `NMI = 2 I(Z; Zh) / (H(Z) + H(Zh))`. Returns 1 for two identical trivial
/// partitions.
pub fn nmi(z: &[usize], zh: &[usize]) -> f64 {
    assert_eq!(z.len(), zh.len());
    let n = z.len() as f64;
    let ka = z.iter().max().map_or(0, |&m| m + 1);
    let kb = zh.iter().max().map_or(0, |&m| m + 1);
    let mut cont = vec![vec![0usize; kb]; ka];
    for i in 0..z.len() {
        cont[z[i]][zh[i]] += 1;
    }
    let a: Vec<f64> = cont.iter().map(|row| row.iter().sum::<usize>() as f64 / n).collect();
    let b: Vec<f64> =
        (0..kb).map(|j| cont.iter().map(|row| row[j]).sum::<usize>() as f64 / n).collect();
    let h = |p: &[f64]| -> f64 { -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>() };
    let ha = h(&a);
    let hb = h(&b);
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let pij = cont[i][j] as f64 / n;
            if pij > 0.0 {
                mi += pij * (pij / (a[i] * b[j])).ln();
            }
        }
    }
    if ha + hb <= 0.0 {
        return 1.0;
    }
    2.0 * mi / (ha + hb)
}

/// Misclassification rate minimised over label permutations.
pub fn misclass(z: &[usize], zh: &[usize], k: usize) -> f64 {
    assert_eq!(z.len(), zh.len());
    let n = z.len();
    // cost[r][c] = number of points with zh = r that would be *wrong* if
    // predicted label r is mapped to true label c.
    let mut agree = Mat::zeros(k, k);
    for i in 0..n {
        agree.add_at(zh[i].min(k - 1), z[i].min(k - 1), 1.0);
    }
    let row_tot: Vec<f64> = (0..k).map(|r| (0..k).map(|c| agree.get(r, c)).sum()).collect();
    let cost = Mat::from_fn(k, k, |r, c| row_tot[r] - agree.get(r, c));
    let assign =
        if k <= BRUTE_FORCE_MAX_K { assignment_brute(&cost) } else { assignment_hungarian(&cost) };
    assignment_cost(&cost, &assign) / n as f64
}

// ---------------------------------------------------------------------------
// Instance CSV format
// ---------------------------------------------------------------------------
//
// #k,d,N,sigma,delta,alpha,seed
// <those seven values>
// #means        (k lines of d values: mean of cluster c on line c)
// #labels       (one line of N 0-based labels)
// #data         (d lines of N values: coordinate r of every point)

fn fmt_f64(v: f64) -> String {
    // `{}` on f64 prints the shortest string that round-trips exactly.
    format!("{v}")
}

impl GmmInstance {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<(), GmmError> {
        writeln!(w, "#k,d,N,sigma,delta,alpha,seed")?;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            self.k,
            self.d,
            self.n(),
            fmt_f64(self.sigma),
            fmt_f64(self.delta),
            fmt_f64(self.alpha),
            self.seed
        )?;
        writeln!(w, "#means")?;
        for c in 0..self.k {
            let line: Vec<String> = (0..self.d).map(|r| fmt_f64(self.means.get(r, c))).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        writeln!(w, "#labels")?;
        let labels: Vec<String> = self.z.iter().map(|c| c.to_string()).collect();
        writeln!(w, "{}", labels.join(","))?;
        writeln!(w, "#data")?;
        for r in 0..self.d {
            let line: Vec<String> = (0..self.n()).map(|j| fmt_f64(self.x.get(r, j))).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: &mut R) -> Result<GmmInstance, GmmError> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String, GmmError> {
            lines
                .next()
                .ok_or_else(|| GmmError::Parse(format!("unexpected end of file, wanted {what}")))?
                .map_err(GmmError::from)
        };
        let expect = |line: &str, tag: &str| -> Result<(), GmmError> {
            if line.trim() == tag {
                Ok(())
            } else {
                Err(GmmError::Parse(format!("expected `{tag}`, got `{line}`")))
            }
        };
        expect(&next("header")?, "#k,d,N,sigma,delta,alpha,seed")?;
        let hdr = next("header values")?;
        let f: Vec<&str> = hdr.trim().split(',').collect();
        if f.len() != 7 {
            return Err(GmmError::Parse(format!("header needs 7 fields, got {}", f.len())));
        }
        let pu = |s: &str| s.parse::<usize>().map_err(|e| GmmError::Parse(e.to_string()));
        let pf = |s: &str| s.parse::<f64>().map_err(|e| GmmError::Parse(e.to_string()));
        let (k, d, n) = (pu(f[0])?, pu(f[1])?, pu(f[2])?);
        let sigma = pf(f[3])?;
        let delta = pf(f[4])?;
        let alpha = pf(f[5])?;
        let seed = f[6].parse::<u64>().map_err(|e| GmmError::Parse(e.to_string()))?;

        expect(&next("#means")?, "#means")?;
        let mut means = Mat::zeros(d, k);
        for c in 0..k {
            let line = next("mean row")?;
            let vals: Vec<&str> = line.trim().split(',').collect();
            if vals.len() != d {
                return Err(GmmError::Parse(format!("mean {c}: wanted {d} values")));
            }
            for (r, v) in vals.iter().enumerate() {
                means.set(r, c, pf(v)?);
            }
        }
        expect(&next("#labels")?, "#labels")?;
        let line = next("labels")?;
        let z: Vec<usize> =
            line.trim().split(',').map(pu).collect::<Result<Vec<usize>, GmmError>>()?;
        if z.len() != n {
            return Err(GmmError::Parse(format!("wanted {n} labels, got {}", z.len())));
        }
        expect(&next("#data")?, "#data")?;
        let mut x = Mat::zeros(d, n);
        for r in 0..d {
            let line = next("data row")?;
            let vals: Vec<&str> = line.trim().split(',').collect();
            if vals.len() != n {
                return Err(GmmError::Parse(format!("data row {r}: wanted {n} values")));
            }
            for (j, v) in vals.iter().enumerate() {
                x.set(r, j, pf(v)?);
            }
        }
        Ok(GmmInstance { k, d, x, z, means, sigma, delta, alpha, seed })
    }
}
