//! Dense linear algebra helpers shared by the estimators.
//!
//! Matrices are `nalgebra` types; the SVD is delegated to LAPACK. The
//! conventions the rest of the crate relies on: singular values sorted in
//! descending order, a fixed sign for each singular pair, and
//! pseudoinverse solves with a relative cutoff.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use ndarray_linalg::{JobSvd, SVDDC};

/// Components smaller than this (on unit-norm vectors) are treated as zero
/// when fixing singular vector signs.
const SIGN_EPS: f64 = 1e-10;

/// Thin singular value decomposition `A = U diag(s) Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m × r` left singular vectors.
    pub u: DMatrix<f64>,
    /// Singular values, descending.
    pub s: Vec<f64>,
    /// `n × r` right singular vectors.
    pub v: DMatrix<f64>,
}

impl Svd {
    /// Deterministic thin SVD of `a`.
    ///
    /// The first component of each left singular vector exceeding `1e-10` in
    /// magnitude is made nonnegative; the right vector is flipped with it.
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let r = m.min(n);
        if r == 0 {
            return Svd {
                u: DMatrix::zeros(m, 0),
                s: Vec::new(),
                v: DMatrix::zeros(n, 0),
            };
        }
        let (u_raw, s_raw, vt_raw) = lapack_svd(a);

        let mut order: Vec<usize> = (0..r).collect();
        // Stable sort keeps the backend's order among exact ties.
        order.sort_by(|&i, &j| s_raw[j].total_cmp(&s_raw[i]));

        let mut u = DMatrix::zeros(m, r);
        let mut v = DMatrix::zeros(n, r);
        let mut s = Vec::with_capacity(r);
        for (dst, &src) in order.iter().enumerate() {
            let ucol = u_raw.column(src);
            let flip = ucol
                .iter()
                .find(|x| x.abs() > SIGN_EPS)
                .is_some_and(|x| *x < 0.0);
            let sign = if flip { -1.0 } else { 1.0 };
            u.set_column(dst, &(ucol * sign));
            v.set_column(dst, &(vt_raw.row(src).transpose() * sign));
            s.push(s_raw[src].max(0.0));
        }
        Svd { u, s, v }
    }

    /// `Σ_{i<k} s_i u_i v_iᵀ`.
    pub fn reconstruct(&self, k: usize) -> DMatrix<f64> {
        let k = k.min(self.s.len());
        let (m, n) = (self.u.nrows(), self.v.nrows());
        if k == 0 {
            return DMatrix::zeros(m, n);
        }
        let mut us = self.u.columns(0, k).into_owned();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.s[j];
        }
        us * self.v.columns(0, k).transpose()
    }

    /// Number of singular values above the numerical-rank tolerance
    /// `max(m, n) · ε · s₁`.
    pub fn numerical_rank(&self) -> usize {
        let Some(&s1) = self.s.first() else { return 0 };
        let tol = self.u.nrows().max(self.v.nrows()) as f64 * f64::EPSILON * s1;
        self.s.iter().filter(|&&x| x > tol && x > 0.0).count()
    }
}

/// LAPACK divide-and-conquer SVD. `nalgebra`'s own SVD loses accuracy on
/// some rank-deficient inputs, so it is not used.
fn lapack_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    let arr = Array2::from_shape_fn((m, n), |(i, j)| a[(i, j)]);
    let (u, s, vt) = arr
        .svddc(JobSvd::Some)
        .expect("LAPACK SVD failed on a finite matrix");
    let u = u.expect("left singular vectors requested");
    let vt = vt.expect("right singular vectors requested");
    let u = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)]);
    let vt = DMatrix::from_fn(vt.nrows(), vt.ncols(), |i, j| vt[(i, j)]);
    (u, s.to_vec(), vt)
}

/// Minimum-norm least-squares solution of `a x ≈ b`, discarding singular
/// values below `rel_tol · s₁`.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    let svd = Svd::new(a);
    let mut x = DVector::zeros(a.ncols());
    let Some(&s1) = svd.s.first() else { return x };
    if s1 == 0.0 {
        return x;
    }
    let cutoff = rel_tol * s1;
    for (i, &si) in svd.s.iter().enumerate() {
        if si <= cutoff {
            break;
        }
        let coef = svd.u.column(i).dot(b) / si;
        x.axpy(coef, &svd.v.column(i), 1.0);
    }
    x
}

/// Inverse of a symmetric positive-definite matrix.
///
/// Uses a Cholesky factorization; when that fails the inverse is formed from
/// a symmetric eigendecomposition with eigenvalues floored at `floor`. The
/// boolean reports whether the fallback was taken.
pub fn spd_inverse(a: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(a);
    if let Some(chol) = Cholesky::new(sym.clone()) {
        let inv = chol.inverse();
        if inv.iter().all(|x| x.is_finite()) {
            return (symmetrize(&inv), false);
        }
    }
    let eig = SymmetricEigen::new(sym);
    let n = a.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        let q = eig.eigenvectors.column(i);
        inv += (q * q.transpose()) / lambda.max(floor);
    }
    (symmetrize(&inv), true)
}

/// Solves `a x = b` for symmetric positive-definite `a`, falling back to
/// [`spd_inverse`] when the factorization fails.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>, floor: f64) -> DVector<f64> {
    match Cholesky::new(symmetrize(a)) {
        Some(chol) => chol.solve(b),
        None => spd_inverse(a, floor).0 * b,
    }
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}
