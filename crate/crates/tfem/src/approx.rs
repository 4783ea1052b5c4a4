//! Random-feature approximators and the softmax→hardmax gap bound.
//!
//! The constructed transformers need a few scalar nonlinearities (`1/x`,
//! `1/‖v‖`, `‖v‖^{1/2}`) expressed as sums of attention-representable atoms.
//! We fit them as `f(v) ≈ Σ_m c_m φ(a_mᵀ [v; 1])` where `φ` is either a relu
//! or a "softmax atom": the first coordinate of a softmax over `[t + ln d,
//! 0, …, 0]`, which the `ln d` shift collapses to a plain sigmoid in `t`.
//! Directions are drawn uniformly on the unit sphere of `R^{d+1}` (L2
//! normalization; an L1 convention would differ only by per-atom rescaling),
//! coefficients come from ridge least squares, and the sup error is always
//! *measured* on an independent stratified probe and carried with the
//! approximator rather than asserted from theory.

use crate::classical::sphere_uniform;
use crate::linalg::l2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("least-squares fit failed after {tries} direction resamples")]
    SingularFit { tries: usize },
}

/// Exact hardmax: uniform distribution over the argmax set.
pub fn hardmax(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty());
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let hits = v.iter().filter(|&&x| x == mx).count();
    v.iter().map(|&x| if x == mx { 1.0 / hits as f64 } else { 0.0 }).collect()
}

fn softmax_vec(v: &[f64], beta: f64) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (beta * (x - mx)).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Measured L2 gap between `softmax(beta · v)` and `hardmax(v)`, and its
/// closed-form upper bound
/// `((d − n₂) + (d − n₂)² / n₂³)^{1/2} · exp(−β Δ)`,
/// where `n₂` is the argmax multiplicity and `Δ` the margin to the best
/// non-maximal entry. When every entry is maximal the bound is 0 (and so is
/// the gap).
pub fn hardmax_gap_bound(v: &[f64], beta: f64) -> (f64, f64) {
    let hm = hardmax(v);
    let sm = softmax_vec(v, beta);
    let gap = l2(&sm.iter().zip(hm.iter()).map(|(a, b)| a - b).collect::<Vec<f64>>());
    let d = v.len();
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n2 = v.iter().filter(|&&x| x == mx).count();
    if n2 == d {
        return (gap, 0.0);
    }
    let second = v.iter().cloned().filter(|&x| x < mx).fold(f64::NEG_INFINITY, f64::max);
    let margin = mx - second;
    let rest = (d - n2) as f64;
    let n2f = n2 as f64;
    let bound = (rest + rest * rest / (n2f * n2f * n2f)).sqrt() * (-beta * margin).exp();
    // The inequality is exact in real arithmetic, but the measured gap sums
    // O(1)-magnitude softmax entries, so it carries absolute rounding error
    // of a few machine epsilons; 1e-12 absolute slack absorbs that.
    debug_assert!(gap <= bound * (1.0 + 1e-12) + 1e-12);
    (gap, bound)
}

/// Scalar targets a relu-feature expansion can be fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Target {
    /// `1 / ‖v‖₂` on the annulus `r_lo ≤ ‖v‖ ≤ r_hi` (requires `r_lo > 0`).
    InvNorm,
    /// `‖v‖₂^{1/2}` on `r_lo ≤ ‖v‖ ≤ r_hi`.
    SqrtNorm,
    /// `1 / v₀` for scalar input on `[r_lo, r_hi]` (requires `r_lo > 0`).
    InvScalar,
    /// The linear coordinate `v_i` (sanity target, exactly representable).
    Coordinate(usize),
}

impl Target {
    pub fn eval(&self, v: &[f64]) -> f64 {
        match self {
            Target::InvNorm => 1.0 / l2(v),
            Target::SqrtNorm => l2(v).sqrt(),
            Target::InvScalar => 1.0 / v[0],
            Target::Coordinate(i) => v[*i],
        }
    }

    pub fn name(&self) -> String {
        match self {
            Target::InvNorm => "inv_norm".into(),
            Target::SqrtNorm => "sqrt_norm".into(),
            Target::InvScalar => "inv_scalar".into(),
            Target::Coordinate(i) => format!("coordinate_{i}"),
        }
    }
}

/// Vector-valued targets for the softmax-atom fitter; each of the `k_out`
/// output coordinates gets its own expansion.
#[derive(Debug, Clone, PartialEq)]
pub enum VectorTarget {
    Constant(Vec<f64>),
    Identity,
}

impl VectorTarget {
    fn eval(&self, v: &[f64], out_idx: usize) -> f64 {
        match self {
            VectorTarget::Constant(c) => c[out_idx],
            VectorTarget::Identity => v[out_idx],
        }
    }

    fn name(&self, out_idx: usize) -> String {
        match self {
            VectorTarget::Constant(_) => format!("constant_{out_idx}"),
            VectorTarget::Identity => format!("identity_{out_idx}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AtomKind {
    Relu,
    /// Sigmoid in the pre-activation: a softmax head over `[t + ln d, 0…0]`
    /// whose `ln d` shift exactly cancels the `d` zero slots.
    SoftmaxAtom,
}

#[derive(Debug, Clone)]
pub struct Atom {
    pub coeff: f64,
    /// Direction in `R^{d+1}`: the last entry multiplies the constant 1.
    pub dir: Vec<f64>,
}

/// A fitted feature expansion `f(v) ≈ Σ c_m φ(a_mᵀ [v;1])` with its measured
/// sup error over the fit domain.
#[derive(Debug, Clone)]
pub struct FeatureApprox {
    pub kind: AtomKind,
    /// Human-readable target label (e.g. `inv_norm`).
    pub target: String,
    pub d: usize,
    pub atoms: Vec<Atom>,
    pub r_lo: f64,
    pub r_hi: f64,
    /// Sup error measured on an independent 10⁴-point stratified probe.
    pub sup_error: f64,
}

#[inline]
fn phi(kind: AtomKind, t: f64) -> f64 {
    match kind {
        AtomKind::Relu => t.max(0.0),
        AtomKind::SoftmaxAtom => 1.0 / (1.0 + (-t).exp()),
    }
}

impl FeatureApprox {
    pub fn eval(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.d);
        let mut s = 0.0;
        for atom in &self.atoms {
            let mut t = atom.dir[self.d];
            for (a, &x) in atom.dir.iter().zip(v.iter()) {
                t += a * x;
            }
            s += atom.coeff * phi(self.kind, t);
        }
        s
    }
}

/// Fit domain. `Annulus` is `r_lo ≤ ‖v‖ ≤ r_hi` (an interval for d = 1);
/// `Ball` is `‖v‖ ≤ r` including sign in one dimension.
#[derive(Clone, Copy)]
enum Domain {
    Annulus { lo: f64, hi: f64 },
    Ball { r: f64 },
}

impl Domain {
    fn radius_at(&self, frac: f64) -> f64 {
        match self {
            Domain::Annulus { lo, hi } => lo + frac * (hi - lo),
            Domain::Ball { r } => frac * r,
        }
    }

    fn point(&self, d: usize, frac: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let radius = self.radius_at(frac);
        if d == 1 {
            return match self {
                Domain::Annulus { .. } => vec![radius],
                Domain::Ball { .. } => vec![if rng.gen_bool(0.5) { radius } else { -radius }],
            };
        }
        let dir = sphere_uniform(d, rng);
        dir.iter().map(|&x| x * radius).collect()
    }

    fn sample(&self, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let frac = rng.gen_range(0.0..=1.0);
        self.point(d, frac, rng)
    }

    fn bounds(&self) -> (f64, f64) {
        match self {
            Domain::Annulus { lo, hi } => (*lo, *hi),
            Domain::Ball { r } => (0.0, *r),
        }
    }
}

/// Number of training samples: the prescribed `50·m` capped for tractability
/// (the cap never drops below `2·m`, so the system stays overdetermined; the
/// one-dimensional cap is lower because an interval saturates sooner).
fn train_count(m: usize, d: usize) -> usize {
    let cap = if d == 1 { 8_192 } else { 16_384 };
    (50 * m).min(cap).max(2 * m)
}

const PHI_STORE_LIMIT: usize = 80_000_000; // entries (~640 MB)
const CG_MAX_ITERS: usize = 400;
const RIDGE: f64 = 1e-8;
const PROBE_POINTS: usize = 10_000;
const MAX_RESEEDS: usize = 5;

struct Design<'a> {
    xs: Vec<Vec<f64>>,
    atoms: &'a [Atom],
    kind: AtomKind,
    d: usize,
    /// Row-major `n x m` design matrix, if small enough to keep.
    phi: Option<Vec<f64>>,
}

impl<'a> Design<'a> {
    fn new(xs: Vec<Vec<f64>>, atoms: &'a [Atom], kind: AtomKind, d: usize) -> Self {
        let n = xs.len();
        let m = atoms.len();
        let phi = if n * m <= PHI_STORE_LIMIT {
            let mut data = vec![0.0; n * m];
            let fill = |(i, row): (usize, &mut [f64])| {
                let x = &xs[i];
                for (j, atom) in atoms.iter().enumerate() {
                    let mut t = atom.dir[d];
                    for (a, &xi) in atom.dir.iter().zip(x.iter()) {
                        t += a * xi;
                    }
                    row[j] = phi(kind, t);
                }
            };
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                data.par_chunks_mut(m).enumerate().for_each(fill);
            }
            #[cfg(not(feature = "parallel"))]
            data.chunks_mut(m).enumerate().for_each(fill);
            Some(data)
        } else {
            None
        };
        Design { xs, atoms, kind, d, phi }
    }

    fn n(&self) -> usize {
        self.xs.len()
    }

    fn row_features(&self, i: usize, out: &mut [f64]) {
        let x = &self.xs[i];
        for (j, atom) in self.atoms.iter().enumerate() {
            let mut t = atom.dir[self.d];
            for (a, &xi) in atom.dir.iter().zip(x.iter()) {
                t += a * xi;
            }
            out[j] = phi(self.kind, t);
        }
    }

    /// `out = Φ c`.
    fn apply(&self, c: &[f64]) -> Vec<f64> {
        let m = self.atoms.len();
        let dot_row = |i: usize, buf: &mut Vec<f64>| -> f64 {
            if let Some(phi) = &self.phi {
                let row = &phi[i * m..(i + 1) * m];
                row.iter().zip(c.iter()).map(|(&a, &b)| a * b).sum()
            } else {
                self.row_features(i, buf);
                buf.iter().zip(c.iter()).map(|(&a, &b)| a * b).sum()
            }
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..self.n())
                .into_par_iter()
                .map_init(|| vec![0.0; m], |buf, i| dot_row(i, buf))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            let mut buf = vec![0.0; m];
            (0..self.n()).map(|i| dot_row(i, &mut buf)).collect()
        }
    }

    /// Chunked accumulation of a length-m column statistic over all rows.
    fn accumulate_cols(&self, per_row: impl Fn(&[f64], usize, &mut [f64]) + Sync) -> Vec<f64> {
        let m = self.atoms.len();
        let run = |range: std::ops::Range<usize>| -> Vec<f64> {
            let mut acc = vec![0.0; m];
            let mut buf = vec![0.0; m];
            for i in range {
                if let Some(phi) = &self.phi {
                    per_row(&phi[i * m..(i + 1) * m], i, &mut acc);
                } else {
                    self.row_features(i, &mut buf);
                    per_row(&buf, i, &mut acc);
                }
            }
            acc
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            let n = self.n();
            let chunk = n.div_ceil(rayon::current_num_threads().max(1)).max(1);
            let partials: Vec<Vec<f64>> = (0..n)
                .step_by(chunk)
                .collect::<Vec<usize>>()
                .into_par_iter()
                .map(|start| run(start..(start + chunk).min(n)))
                .collect();
            let mut acc = vec![0.0; m];
            for p in partials {
                for (a, b) in acc.iter_mut().zip(p.iter()) {
                    *a += b;
                }
            }
            acc
        }
        #[cfg(not(feature = "parallel"))]
        run(0..self.n())
    }

    /// `out = Φᵀ u`.
    fn apply_t(&self, u: &[f64]) -> Vec<f64> {
        self.accumulate_cols(|row, i, acc| {
            let ui = u[i];
            if ui != 0.0 {
                for (a, &p) in acc.iter_mut().zip(row.iter()) {
                    *a += ui * p;
                }
            }
        })
    }

    /// `diag(ΦᵀΦ)`.
    fn col_sq_norms(&self) -> Vec<f64> {
        self.accumulate_cols(|row, _i, acc| {
            for (a, &p) in acc.iter_mut().zip(row.iter()) {
                *a += p * p;
            }
        })
    }
}

/// Ridge least squares `min ‖Φc − y‖² + λ‖c‖²` by conjugate gradients on the
/// Jacobi-preconditioned normal equations. Returns `None` on numerical
/// breakdown.
fn ridge_cg(design: &Design, y: &[f64], ridge: f64) -> Option<Vec<f64>> {
    let m = design.atoms.len();
    let col_sq = design.col_sq_norms();
    let scale_ref = col_sq.iter().cloned().fold(0.0f64, f64::max);
    if !(scale_ref > 0.0) || !scale_ref.is_finite() {
        return None;
    }
    let lam = ridge * scale_ref;
    let precond: Vec<f64> = col_sq.iter().map(|&s| 1.0 / (s + lam)).collect();

    let b = design.apply_t(y); // Φᵀ y
    let matvec = |c: &[f64]| -> Vec<f64> {
        let u = design.apply(c);
        let mut w = design.apply_t(&u);
        for (wj, &cj) in w.iter_mut().zip(c.iter()) {
            *wj += lam * cj;
        }
        w
    };

    let mut x = vec![0.0; m];
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(precond.iter()).map(|(&ri, &pi)| ri * pi).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(z.iter()).map(|(&a, &b)| a * b).sum();
    let b_norm = l2(&b).max(1e-300);
    let mut best_rnorm = f64::INFINITY;
    let mut since_improved = 0usize;
    for _ in 0..CG_MAX_ITERS {
        let rnorm = l2(&r);
        if rnorm <= 1e-11 * b_norm {
            break;
        }
        // Stop once CG stagnates; the filtered solution is what we keep.
        if rnorm < 0.999 * best_rnorm {
            best_rnorm = rnorm;
            since_improved = 0;
        } else {
            since_improved += 1;
            if since_improved >= 50 {
                break;
            }
        }
        let ap = matvec(&p);
        let p_ap: f64 = p.iter().zip(ap.iter()).map(|(&a, &b)| a * b).sum();
        if !(p_ap > 0.0) || !p_ap.is_finite() {
            return None;
        }
        let alpha = rz / p_ap;
        for ((xi, &pi), (ri, &api)) in
            x.iter_mut().zip(p.iter()).zip(r.iter_mut().zip(ap.iter()))
        {
            *xi += alpha * pi;
            *ri -= alpha * api;
        }
        z = r.iter().zip(precond.iter()).map(|(&ri, &pi)| ri * pi).collect();
        let rz_new: f64 = r.iter().zip(z.iter()).map(|(&a, &b)| a * b).sum();
        let beta = rz_new / rz.max(1e-300);
        rz = rz_new;
        for (pi, &zi) in p.iter_mut().zip(z.iter()) {
            *pi = zi + beta * *pi;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(x)
}

fn fit_core(
    kind: AtomKind,
    name: String,
    d: usize,
    domain: Domain,
    m: usize,
    seed: u64,
    target_fn: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<FeatureApprox, ApproxError> {
    for attempt in 0..MAX_RESEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64 * 0x9e37_79b9));
        let atoms: Vec<Atom> = (0..m)
            .map(|_| {
                let mut dir = sphere_uniform(d + 1, &mut rng);
                if kind == AtomKind::SoftmaxAtom {
                    // Sigmoids need varied sharpness to span anything useful.
                    let gain = 10f64.powf(rng.gen_range(-1.0..1.3));
                    for x in dir.iter_mut() {
                        *x *= gain;
                    }
                }
                Atom { coeff: 0.0, dir }
            })
            .collect();
        let n = train_count(m, d);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| domain.sample(d, &mut rng)).collect();
        let y: Vec<f64> = xs.iter().map(|x| target_fn(x)).collect();
        let design = Design::new(xs, &atoms, kind, d);
        let Some(coeffs) = ridge_cg(&design, &y, RIDGE) else {
            continue;
        };
        let (r_lo, r_hi) = domain.bounds();
        let mut fitted = FeatureApprox {
            kind,
            target: name.clone(),
            d,
            atoms: atoms
                .iter()
                .zip(coeffs.iter())
                .map(|(a, &c)| Atom { coeff: c, dir: a.dir.clone() })
                .collect(),
            r_lo,
            r_hi,
            sup_error: f64::NAN,
        };
        // Independent probe: radii stratified into equal bins, directions
        // seeded separately from the training draw.
        let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
        let probe: Vec<Vec<f64>> = (0..PROBE_POINTS)
            .map(|i| {
                let frac = (i as f64 + probe_rng.gen_range(0.0..1.0)) / PROBE_POINTS as f64;
                domain.point(d, frac, &mut probe_rng)
            })
            .collect();
        let err = |x: &Vec<f64>| (fitted.eval(x) - target_fn(x)).abs();
        #[cfg(feature = "parallel")]
        let sup = {
            use rayon::prelude::*;
            probe.par_iter().map(err).fold(|| 0.0f64, f64::max).reduce(|| 0.0, f64::max)
        };
        #[cfg(not(feature = "parallel"))]
        let sup = probe.iter().map(err).fold(0.0f64, f64::max);
        if !sup.is_finite() {
            continue;
        }
        fitted.sup_error = sup;
        return Ok(fitted);
    }
    Err(ApproxError::SingularFit { tries: MAX_RESEEDS })
}

/// Fit `target` with `m` relu atoms over the annulus `[r_lo, r_hi]`.
/// Coefficients come from ridge least squares on sampled points; the
/// returned `sup_error` is measured on an independent probe.
pub fn fit_relu_features(
    target: Target,
    d: usize,
    r_lo: f64,
    r_hi: f64,
    m: usize,
    seed: u64,
) -> Result<FeatureApprox, ApproxError> {
    if d == 0 {
        return Err(ApproxError::InvalidParam("need d >= 1".into()));
    }
    if m < 8 {
        return Err(ApproxError::InvalidParam(format!("need m >= 8 atoms, got {m}")));
    }
    if !(r_hi > r_lo) || !(r_lo >= 0.0) {
        return Err(ApproxError::InvalidParam(format!("bad domain [{r_lo}, {r_hi}]")));
    }
    match target {
        Target::InvNorm | Target::InvScalar if r_lo <= 0.0 => {
            return Err(ApproxError::InvalidParam(format!("{} needs r_lo > 0", target.name())));
        }
        Target::InvScalar if d != 1 => {
            return Err(ApproxError::InvalidParam("inv_scalar expects d = 1".into()));
        }
        Target::Coordinate(i) if i >= d => {
            return Err(ApproxError::InvalidParam(format!("coordinate {i} out of range")));
        }
        _ => {}
    }
    fit_core(
        AtomKind::Relu,
        target.name(),
        d,
        Domain::Annulus { lo: r_lo, hi: r_hi },
        m,
        seed,
        &move |v| target.eval(v),
    )
}

/// Fit a vector-valued `target` with softmax atoms over the ball of radius
/// `r`, one expansion per output coordinate.
pub fn fit_softmax_features(
    target: &VectorTarget,
    d: usize,
    k_out: usize,
    r: f64,
    m: usize,
    seed: u64,
) -> Result<Vec<FeatureApprox>, ApproxError> {
    if d == 0 || k_out == 0 {
        return Err(ApproxError::InvalidParam("need d >= 1 and k_out >= 1".into()));
    }
    if m < 8 {
        return Err(ApproxError::InvalidParam(format!("need m >= 8 atoms, got {m}")));
    }
    if !(r > 0.0) {
        return Err(ApproxError::InvalidParam(format!("bad radius {r}")));
    }
    match target {
        VectorTarget::Constant(c) if c.len() != k_out => {
            return Err(ApproxError::InvalidParam(format!(
                "constant target has {} entries, expected {k_out}",
                c.len()
            )));
        }
        VectorTarget::Identity if k_out != d => {
            return Err(ApproxError::InvalidParam("identity target needs k_out = d".into()));
        }
        _ => {}
    }
    (0..k_out)
        .map(|out_idx| {
            fit_core(
                AtomKind::SoftmaxAtom,
                target.name(out_idx),
                d,
                Domain::Ball { r },
                m,
                seed.wrapping_add(out_idx as u64),
                &move |v| target.eval(v, out_idx),
            )
        })
        .collect()
}
