//! Dense row-major matrices and the handful of numerical kernels the rest of
//! the crate is built on.
//!
//! Nothing here is clever: matrices are `Vec<f64>` in row-major order, the
//! eigensolver is cyclic Jacobi (foolproof for symmetric input at the sizes we
//! care about), and operator norms come from power iteration on `MᵀM`. The one
//! performance concession is that `matmul` walks rows and skips zero entries,
//! which makes the extremely sparse constructed attention weights cheap to
//! apply without a separate sparse type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix must be symmetric (max asymmetry {max_asym:e})")]
    NotSymmetric { max_asym: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("vector has zero norm")]
    ZeroNorm,
}

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows: empty");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "from_rows: ragged rows");
        Mat { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] += v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// `self * other`. Walks rows of `self` and skips zero entries, so
    /// matrices with few nonzero rows (constructed attention weights) cost
    /// roughly `nnz * other.cols` instead of `rows * cols * other.cols`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            // Split borrow: out row i vs other rows.
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (l, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(l);
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self += s * other`.
    pub fn scaled_add(&mut self, other: &Mat, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    /// Indices of rows that contain at least one nonzero entry.
    pub fn nonzero_rows(&self) -> Vec<usize> {
        (0..self.rows).filter(|&i| self.row(i).iter().any(|&v| v != 0.0)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Coordinate-list sparse matrix, used for constructed attention weights
/// which have only a handful of nonzero entries in a large `D x D` frame.
/// Entries are kept sorted by (row, col) with duplicates merged.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMat {
    rows: usize,
    cols: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl SparseMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SparseMat { rows, cols, entries: Vec::new() }
    }

    pub fn from_entries(rows: usize, cols: usize, raw: Vec<(usize, usize, f64)>) -> Self {
        let mut entries: Vec<(u32, u32, f64)> = raw
            .into_iter()
            .inspect(|&(i, j, _)| assert!(i < rows && j < cols, "entry ({i},{j}) out of bounds"))
            .map(|(i, j, v)| (i as u32, j as u32, v))
            .collect();
        entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut merged: Vec<(u32, u32, f64)> = Vec::with_capacity(entries.len());
        for (i, j, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => merged.push((i, j, v)),
            }
        }
        merged.retain(|&(_, _, v)| v != 0.0);
        SparseMat { rows, cols, entries: merged }
    }

    pub fn from_dense(m: &Mat) -> Self {
        let mut entries = Vec::new();
        for i in 0..m.rows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                if v != 0.0 {
                    entries.push((i, j, v));
                }
            }
        }
        SparseMat::from_entries(m.rows(), m.cols(), entries)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(u32, u32, f64)] {
        &self.entries
    }

    /// Distinct rows holding at least one nonzero, ascending.
    pub fn nonzero_rows(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for &(i, _, _) in &self.entries {
            if out.last() != Some(&(i as usize)) {
                out.push(i as usize);
            }
        }
        out
    }

    /// The (col, value) pairs of row `r`.
    pub fn row_entries(&self, r: usize) -> &[(u32, u32, f64)] {
        let lo = self.entries.partition_point(|&(i, _, _)| (i as usize) < r);
        let hi = self.entries.partition_point(|&(i, _, _)| (i as usize) <= r);
        &self.entries[lo..hi]
    }

    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros(self.rows, self.cols);
        for &(i, j, v) in &self.entries {
            m.set(i as usize, j as usize, v);
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |m, &(_, _, v)| m.max(v.abs()))
    }
}

/// Spectral norm of a sparse matrix by power iteration on `SᵀS`, avoiding a
/// dense materialization.
pub fn op_norm_sparse(m: &SparseMat) -> f64 {
    if m.nnz() == 0 {
        return 0.0;
    }
    let n = m.cols();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 + 1.0) * 1e-3).collect();
    let nv = l2(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mut sigma = 0.0f64;
    for _ in 0..100_000 {
        let mut w = vec![0.0; m.rows()];
        for &(i, j, a) in m.entries() {
            w[i as usize] += a * v[j as usize];
        }
        let mut u = vec![0.0; n];
        for &(i, j, a) in m.entries() {
            u[j as usize] += a * w[i as usize];
        }
        let nu = l2(&u);
        if nu < 1e-300 {
            return l2(&w);
        }
        let new_sigma = nu.sqrt();
        for x in u.iter_mut() {
            *x /= nu;
        }
        v = u;
        if (new_sigma - sigma).abs() <= 1e-10 * new_sigma.max(1e-300) {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

/// Euclidean norm of a slice.
pub fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|&v| v * v).sum::<f64>().sqrt()
}

/// Frobenius norm.
pub fn fro(m: &Mat) -> f64 {
    l2(m.data())
}

/// Elementwise `max(0, x)`.
pub fn relu(m: &Mat) -> Mat {
    let mut out = m.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Column-wise softmax with per-column max subtraction, so entries of
/// magnitude up to a few thousand do not overflow.
pub fn softmax_cols(m: &Mat) -> Mat {
    let mut out = m.clone();
    for j in 0..m.cols() {
        let mut mx = f64::NEG_INFINITY;
        for i in 0..m.rows() {
            mx = mx.max(m.get(i, j));
        }
        let mut sum = 0.0;
        for i in 0..m.rows() {
            let e = (m.get(i, j) - mx).exp();
            out.set(i, j, e);
            sum += e;
        }
        for i in 0..m.rows() {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    out
}

/// Index of the largest entry, ties resolved to the lowest index.
pub fn argmax_tie_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues sorted in
/// descending order and eigenvectors as the corresponding *columns* of the
/// returned matrix. The reconstruction residual `‖A - VΛVᵀ‖_F` is driven
/// below `1e-10 · ‖A‖_F`.
pub fn jacobi_eigh(a: &Mat) -> Result<(Vec<f64>, Mat), LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    let n = a.rows();
    let scale = fro(a).max(1e-300);
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if max_asym > 1e-8 * scale {
        return Err(LinalgError::NotSymmetric { max_asym });
    }

    let mut m = a.clone();
    // Symmetrise exactly so rotations preserve symmetry bit-for-bit.
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, s);
            m.set(j, i, s);
        }
    }
    let mut v = Mat::identity(n);

    let off = |m: &Mat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m.get(i, j) * m.get(i, j);
                }
            }
        }
        s.sqrt()
    };

    const MAX_SWEEPS: usize = 100;
    let tol = 1e-14 * scale;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off(&m) <= tol {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= tol / (n as f64 * n as f64) {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of M.
                for i in 0..n {
                    let mip = m.get(i, p);
                    let miq = m.get(i, q);
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for j in 0..n {
                    let mpj = m.get(p, j);
                    let mqj = m.get(q, j);
                    m.set(p, j, c * mpj - s * mqj);
                    m.set(q, j, s * mpj + c * mqj);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    if !converged && off(&m) > 1e-10 * scale {
        return Err(LinalgError::NoConvergence(format!(
            "jacobi off-diagonal {:e} after {MAX_SWEEPS} sweeps",
            off(&m)
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut eigvecs = Mat::zeros(n, n);
    for (newcol, &oldcol) in order.iter().enumerate() {
        for i in 0..n {
            eigvecs.set(i, newcol, v.get(i, oldcol));
        }
    }
    Ok((eigvals, eigvecs))
}

/// Reference power iteration: exactly `steps` rounds of `v ← Av / ‖Av‖`
/// starting from `v0`. The starting vector is normalised first.
pub fn power_method_ref(a: &Mat, v0: &[f64], steps: usize) -> Result<Vec<f64>, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    if v0.len() != a.rows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "power_method_ref: v0 has length {}, matrix is {}x{}",
            v0.len(),
            a.rows(),
            a.cols()
        )));
    }
    let n0 = l2(v0);
    if n0 < 1e-300 {
        return Err(LinalgError::ZeroNorm);
    }
    let mut v: Vec<f64> = v0.iter().map(|&x| x / n0).collect();
    for _ in 0..steps {
        let mut w = vec![0.0; a.rows()];
        for i in 0..a.rows() {
            let mut acc = 0.0;
            for (j, &aij) in a.row(i).iter().enumerate() {
                acc += aij * v[j];
            }
            w[i] = acc;
        }
        let nw = l2(&w);
        if nw < 1e-300 {
            return Err(LinalgError::ZeroNorm);
        }
        for x in w.iter_mut() {
            *x /= nw;
        }
        v = w;
    }
    Ok(v)
}

/// Spectral norm `‖M‖₂` via power iteration on `MᵀM`, iterated to relative
/// tolerance `1e-10` on the singular value estimate.
pub fn op_norm(m: &Mat) -> f64 {
    if m.rows() == 0 || m.cols() == 0 {
        return 0.0;
    }
    if m.data().iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let n = m.cols();
    // Deterministic, non-degenerate start.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 + 1.0) * 1e-3).collect();
    let nv = l2(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mut sigma = 0.0f64;
    for _ in 0..100_000 {
        // w = M v ; u = Mᵀ w
        let mut w = vec![0.0; m.rows()];
        for i in 0..m.rows() {
            let mut acc = 0.0;
            for (j, &a) in m.row(i).iter().enumerate() {
                acc += a * v[j];
            }
            w[i] = acc;
        }
        let mut u = vec![0.0; n];
        for i in 0..m.rows() {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            for (j, &a) in m.row(i).iter().enumerate() {
                u[j] += a * wi;
            }
        }
        let nu = l2(&u);
        if nu < 1e-300 {
            return l2(&w); // v happened to be in the null space direction
        }
        let new_sigma = nu.sqrt();
        for x in u.iter_mut() {
            *x /= nu;
        }
        v = u;
        if (new_sigma - sigma).abs() <= 1e-10 * new_sigma.max(1e-300) {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_cols_known_column() {
        // softmax((ln 3, 0)) = (0.75, 0.25)
        let m = Mat::from_rows(&[vec![3.0f64.ln()], vec![0.0]]);
        let s = softmax_cols(&m);
        assert!((s.get(0, 0) - 0.75).abs() < 1e-12);
        assert!((s.get(1, 0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_cols_large_entries_no_overflow() {
        let m = Mat::from_rows(&[vec![1e4], vec![-1e4], vec![0.0]]);
        let s = softmax_cols(&m);
        assert!(s.data().iter().all(|v| v.is_finite()));
        let colsum: f64 = (0..3).map(|i| s.get(i, 0)).sum();
        assert!((colsum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_known_3x3() {
        // Block matrix: eigenvalues of [[3,4],[4,9]] are 11 and 1 (char. poly
        // λ² - 12λ + 11), plus the isolated 2.
        let a = Mat::from_rows(&[
            vec![2.0, 0.0, 0.0],
            vec![0.0, 3.0, 4.0],
            vec![0.0, 4.0, 9.0],
        ]);
        let (l, v) = jacobi_eigh(&a).unwrap();
        assert!((l[0] - 11.0).abs() < 1e-10);
        assert!((l[1] - 2.0).abs() < 1e-10);
        assert!((l[2] - 1.0).abs() < 1e-10);
        // Reconstruction A = VΛVᵀ
        let mut rec = Mat::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for t in 0..3 {
                    s += v.get(i, t) * l[t] * v.get(j, t);
                }
                rec.set(i, j, s);
            }
        }
        rec.scaled_add(&a, -1.0);
        assert!(fro(&rec) <= 1e-8 * fro(&a));
    }

    #[test]
    fn jacobi_orthonormal_columns() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in [2usize, 5, 9] {
            let mut a = Mat::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    a.set(i, j, v);
                    a.set(j, i, v);
                }
            }
            let (_, v) = jacobi_eigh(&a).unwrap();
            for p in 0..n {
                for q in 0..n {
                    let dot: f64 = (0..n).map(|i| v.get(i, p) * v.get(i, q)).sum();
                    let want = if p == q { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10, "n={n} p={p} q={q} dot={dot}");
                }
            }
        }
    }

    #[test]
    fn jacobi_rejects_nonsymmetric() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(jacobi_eigh(&a), Err(LinalgError::NotSymmetric { .. })));
    }

    #[test]
    fn power_method_converges_on_diag() {
        let a = Mat::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]);
        let v = power_method_ref(&a, &[1.0, 1.0], 50).unwrap();
        assert!(v[0].abs() >= 1.0 - 1e-12);
    }

    #[test]
    fn power_method_exact_step_count() {
        // One step from (1,1)/√2 on diag(3,1): Av = (3,1)/√2, normalised =
        // (3,1)/√10.
        let a = Mat::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]);
        let v = power_method_ref(&a, &[1.0, 1.0], 1).unwrap();
        let s = 10.0f64.sqrt();
        assert!((v[0] - 3.0 / s).abs() < 1e-14);
        assert!((v[1] - 1.0 / s).abs() < 1e-14);
    }

    #[test]
    fn op_norm_matches_known_values() {
        let d = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, -5.0]]);
        assert!((op_norm(&d) - 5.0).abs() < 1e-8);
        let nilp = Mat::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert!((op_norm(&nilp) - 1.0).abs() < 1e-8);
        assert_eq!(op_norm(&Mat::zeros(3, 4)), 0.0);
    }

    #[test]
    fn op_norm_agrees_with_jacobi_on_gram() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = Mat::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
        let mt = m.transpose();
        let gram = mt.matmul(&m);
        let (l, _) = jacobi_eigh(&gram).unwrap();
        assert!((op_norm(&m) - l[0].sqrt()).abs() < 1e-7);
    }

    #[test]
    fn sparse_round_trip_and_merge() {
        let s = SparseMat::from_entries(3, 4, vec![(0, 1, 2.0), (2, 3, -1.0), (0, 1, 3.0), (1, 0, 0.0)]);
        assert_eq!(s.nnz(), 2);
        assert_eq!(s.to_dense().get(0, 1), 5.0);
        assert_eq!(s.nonzero_rows(), vec![0, 2]);
        assert_eq!(s.row_entries(2), &[(2, 3, -1.0)]);
        assert!(s.row_entries(1).is_empty());
        let back = SparseMat::from_dense(&s.to_dense());
        assert_eq!(back, s);
    }

    #[test]
    fn sparse_op_norm_matches_dense() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = Mat::from_fn(5, 7, |_, _| {
            if rng.gen_bool(0.3) {
                rng.gen_range(-2.0..2.0)
            } else {
                0.0
            }
        });
        let s = SparseMat::from_dense(&m);
        assert!((op_norm_sparse(&s) - op_norm(&m)).abs() < 1e-8);
        assert_eq!(op_norm_sparse(&SparseMat::zeros(3, 3)), 0.0);
    }

    #[test]
    fn matmul_skips_zero_rows_correctly() {
        let mut a = Mat::zeros(3, 3);
        a.set(1, 2, 2.0);
        let b = Mat::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let c = a.matmul(&b);
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(1, 0), 2.0 * b.get(2, 0));
        assert_eq!(c.get(1, 1), 2.0 * b.get(2, 1));
    }
}
