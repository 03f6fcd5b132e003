//! Dense symmetric-matrix kernels shared by every solver.
//!
//! Everything here is a pure function on small dense matrices. Problem
//! dimensions in this crate are tiny (a handful of states), so the kernels
//! favour clarity and exact symmetry over blocking or sparsity.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// General dense matrix (dynamics, input and observation matrices).
pub type GenMat = DMatrix<f64>;

/// Dense symmetric matrix. Construction symmetrizes its input, so
/// `m[(i, j)] == m[(j, i)]` holds bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SymMat(DMatrix<f64>);

impl SymMat {
    /// Wraps `m` after replacing it by `(m + mᵀ) / 2`.
    ///
    /// Panics if `m` is not square; callers build these from known shapes.
    pub fn from_matrix(mut m: DMatrix<f64>) -> Self {
        assert!(m.is_square(), "SymMat requires a square matrix, got {:?}", m.shape());
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMat(m)
    }

    pub fn identity(n: usize) -> Self {
        SymMat(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMat(DMatrix::zeros(n, n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        SymMat(DMatrix::identity(n, n) * s)
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMat(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = gen_from_rows(rows)?;
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(SymMat::from_matrix(m))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        gen_to_rows(&self.0)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    #[inline]
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Frobenius inner product `⟨self, other⟩ = tr(self · other)`.
    pub fn dot(&self, other: &SymMat) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn frob_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn scale(&self, s: f64) -> SymMat {
        SymMat(&self.0 * s)
    }

    /// `a · self · aᵀ`, symmetrized.
    pub fn congruence(&self, a: &DMatrix<f64>) -> SymMat {
        SymMat::from_matrix(a * &self.0 * a.transpose())
    }

    /// `aᵀ · self · a`, symmetrized.
    pub fn congruence_t(&self, a: &DMatrix<f64>) -> SymMat {
        SymMat::from_matrix(a.transpose() * &self.0 * a)
    }

    /// Entry-wise maximum absolute difference.
    pub fn max_abs_diff(&self, other: &SymMat) -> f64 {
        (&self.0 - &other.0).amax()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for SymMat {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

impl TryFrom<Vec<Vec<f64>>> for SymMat {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        SymMat::from_rows(&rows)
    }
}

impl From<SymMat> for Vec<Vec<f64>> {
    fn from(m: SymMat) -> Self {
        m.to_rows()
    }
}

macro_rules! sym_binop {
    ($tr:ident, $method:ident, $op:tt) => {
        impl $tr<&SymMat> for &SymMat {
            type Output = SymMat;
            fn $method(self, rhs: &SymMat) -> SymMat {
                SymMat(&self.0 $op &rhs.0)
            }
        }
        impl $tr<SymMat> for SymMat {
            type Output = SymMat;
            fn $method(self, rhs: SymMat) -> SymMat {
                SymMat(self.0 $op rhs.0)
            }
        }
        impl $tr<&SymMat> for SymMat {
            type Output = SymMat;
            fn $method(self, rhs: &SymMat) -> SymMat {
                SymMat(self.0 $op &rhs.0)
            }
        }
    };
}

sym_binop!(Add, add, +);
sym_binop!(Sub, sub, -);

impl AddAssign<&SymMat> for SymMat {
    fn add_assign(&mut self, rhs: &SymMat) {
        self.0 += &rhs.0;
    }
}

impl SubAssign<&SymMat> for SymMat {
    fn sub_assign(&mut self, rhs: &SymMat) {
        self.0 -= &rhs.0;
    }
}

impl Mul<f64> for &SymMat {
    type Output = SymMat;
    fn mul(self, s: f64) -> SymMat {
        SymMat(&self.0 * s)
    }
}

impl Mul<f64> for SymMat {
    type Output = SymMat;
    fn mul(self, s: f64) -> SymMat {
        SymMat(self.0 * s)
    }
}

impl Neg for &SymMat {
    type Output = SymMat;
    fn neg(self) -> SymMat {
        SymMat(-&self.0)
    }
}

pub fn gen_from_rows(rows: &[Vec<f64>]) -> Result<GenMat> {
    let r = rows.len();
    if r == 0 {
        return Err(Error::DimensionMismatch("matrix has no rows".into()));
    }
    let c = rows[0].len();
    if c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::DimensionMismatch("ragged or empty matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn gen_to_rows(m: &GenMat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_factor(m: &SymMat) -> Result<DMatrix<f64>> {
    m.0.clone()
        .cholesky()
        .map(|c| c.unpack())
        .ok_or(Error::NotPositiveDefinite)
}

/// `log det M` through a Cholesky factorization; fails on any non-positive pivot.
pub fn chol_logdet(m: &SymMat) -> Result<f64> {
    let l = cholesky_factor(m)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn is_positive_definite(m: &SymMat) -> bool {
    m.0.clone().cholesky().is_some()
}

pub fn spd_inverse(m: &SymMat) -> Result<SymMat> {
    let c = m.0.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok(SymMat::from_matrix(c.inverse()))
}

/// Eigendecomposition with eigenvalues sorted ascending; columns of the
/// returned matrix are the matching orthonormal eigenvectors.
pub fn eigh(m: &SymMat) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.dim();
    let eig = SymmetricEigen::new(m.0.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// `U diag(d) Uᵀ`, symmetrized.
pub fn from_eigen(vals: &DVector<f64>, vecs: &DMatrix<f64>) -> SymMat {
    let mut scaled = vecs.clone();
    for (k, &d) in vals.iter().enumerate() {
        scaled.column_mut(k).scale_mut(d);
    }
    SymMat::from_matrix(scaled * vecs.transpose())
}

pub fn min_eigenvalue(m: &SymMat) -> f64 {
    SymmetricEigen::new(m.0.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &SymMat) -> f64 {
    SymmetricEigen::new(m.0.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Euclidean (Frobenius) projection onto the PSD cone: clamp negative
/// eigenvalues to zero and recompose.
pub fn psd_project(m: &SymMat) -> SymMat {
    let eig = SymmetricEigen::new(m.0.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return m.clone();
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    from_eigen(&clamped, &eig.eigenvectors)
}

/// The 2n×2n block `[[P − Π, P Aᵀ], [A P, W + A P Aᵀ]]` whose
/// semidefiniteness links the posterior covariance to the log-det variable.
pub fn lmi_block(p: &SymMat, pi: &SymMat, a: &GenMat, w: &SymMat) -> Result<SymMat> {
    let n = p.dim();
    if pi.dim() != n || w.dim() != n || a.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "LMI block expects n = {n} for P, Pi, A, W (got Pi {}, A {:?}, W {})",
            pi.dim(),
            a.shape(),
            w.dim()
        )));
    }
    let ap = a * p.matrix();
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block
        .view_mut((0, 0), (n, n))
        .copy_from(&(p.matrix() - pi.matrix()));
    block.view_mut((n, 0), (n, n)).copy_from(&ap);
    block.view_mut((0, n), (n, n)).copy_from(&ap.transpose());
    block
        .view_mut((n, n), (n, n))
        .copy_from(&(w.matrix() + &ap * a.transpose()));
    Ok(SymMat::from_matrix(block))
}

/// Minimum eigenvalue of [`lmi_block`]; non-negative certifies the LMI.
pub fn lmi_margin(p: &SymMat, pi: &SymMat, a: &GenMat, w: &SymMat) -> Result<f64> {
    Ok(min_eigenvalue(&lmi_block(p, pi, a, w)?))
}

/// Solves `M Λ M + Λ = RHS` for symmetric `Λ` given symmetric PSD `M`.
///
/// With `M = U diag(d) Uᵀ` the equation decouples in the eigenbasis into
/// `(d_i d_j + 1) Λ̃_ij = R̃_ij`.
pub fn sym_solve_sylvester_like(m: &SymMat, rhs: &SymMat) -> Result<SymMat> {
    if m.dim() != rhs.dim() {
        return Err(Error::DimensionMismatch(format!(
            "M is {}x{}, RHS is {}x{}",
            m.dim(),
            m.dim(),
            rhs.dim(),
            rhs.dim()
        )));
    }
    let eig = SymmetricEigen::new(m.0.clone());
    let u = &eig.eigenvectors;
    let d = &eig.eigenvalues;
    let mut rt = u.transpose() * rhs.matrix() * u;
    let n = m.dim();
    for i in 0..n {
        for j in 0..n {
            rt[(i, j)] /= d[i] * d[j] + 1.0;
        }
    }
    Ok(SymMat::from_matrix(u * rt * u.transpose()))
}

/// Upper-triangle index pairs `(a, b)`, `a ≤ b`, in row-major order. These
/// are the coordinates of a symmetric matrix variable: coordinate `(a, b)`
/// equals the entry `X[a][b]`.
pub fn svec_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for a in 0..n {
        for b in a..n {
            out.push((a, b));
        }
    }
    out
}

pub fn svec(m: &SymMat) -> DVector<f64> {
    let pairs = svec_pairs(m.dim());
    DVector::from_iterator(pairs.len(), pairs.iter().map(|&(a, b)| m[(a, b)]))
}

pub fn smat(v: &[f64], n: usize) -> SymMat {
    let mut m = DMatrix::zeros(n, n);
    for (k, (a, b)) in svec_pairs(n).into_iter().enumerate() {
        m[(a, b)] = v[k];
        m[(b, a)] = v[k];
    }
    SymMat(m)
}

/// `⟨G, E_ab⟩` for every coordinate, where `E_ab = e_a e_bᵀ + e_b e_aᵀ`
/// off the diagonal and `e_a e_aᵀ` on it.
pub fn svec_gradient(g: &SymMat) -> DVector<f64> {
    let pairs = svec_pairs(g.dim());
    DVector::from_iterator(
        pairs.len(),
        pairs
            .iter()
            .map(|&(a, b)| if a == b { g[(a, a)] } else { 2.0 * g[(a, b)] }),
    )
}

/// Matrix of `tr(X E_i Y E_j)` over coordinate pairs, for symmetric `X`, `Y`.
pub fn svec_bilinear(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let pairs = svec_pairs(x.nrows());
    let k = pairs.len();
    let mut h = DMatrix::zeros(k, k);
    for (i, &(a, b)) in pairs.iter().enumerate() {
        for (j, &(c, d)) in pairs.iter().enumerate().skip(i) {
            let mut v = x[(d, a)] * y[(b, c)]
                + x[(c, a)] * y[(b, d)]
                + x[(d, b)] * y[(a, c)]
                + x[(c, b)] * y[(a, d)];
            if a == b {
                v *= 0.5;
            }
            if c == d {
                v *= 0.5;
            }
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> SymMat {
        SymMat::from_matrix(DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)))
    }

    fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> SymMat {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SymMat::from_matrix(&g * g.transpose() + DMatrix::identity(n, n) * 0.1)
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> SymMat {
        let r = rng.random_range(1..=n);
        let g = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        SymMat::from_matrix(&g * g.transpose())
    }

    #[test]
    fn logdet_of_identity_and_unit_determinant() {
        assert_eq!(chol_logdet(&SymMat::identity(3)).unwrap(), 0.0);
        let d = chol_logdet(&SymMat::from_diagonal(&[2.0, 0.5])).unwrap();
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn logdet_matches_eigenvalue_logs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_pd(&mut rng, 4);
        let (vals, _) = eigh(&m);
        let oracle: f64 = vals.iter().map(|v| v.ln()).sum();
        assert_abs_diff_eq!(chol_logdet(&m).unwrap(), oracle, epsilon = 1e-10);
    }

    #[test]
    fn logdet_rejects_indefinite() {
        let m = SymMat::from_diagonal(&[1.0, -1e-3]);
        assert!(matches!(chol_logdet(&m), Err(Error::NotPositiveDefinite)));
        assert!(matches!(chol_logdet(&SymMat::zeros(2)), Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn projection_fixes_psd_and_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_psd(&mut rng, 4);
        assert!(psd_project(&m).max_abs_diff(&m) < 1e-12);
        let p = psd_project(&SymMat::from_diagonal(&[1.0, -2.0]));
        assert!(p.max_abs_diff(&SymMat::from_diagonal(&[1.0, 0.0])) < 1e-15);
    }

    #[test]
    fn projection_beats_random_psd_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_sym(&mut rng, 5).scale(3.0);
        let proj = psd_project(&m);
        let best = (&m - &proj).frob_norm();
        for _ in 0..1000 {
            let cand = random_psd(&mut rng, 5);
            assert!(best <= (&m - &cand).frob_norm() + 1e-12);
        }
        // perturbing the projection inside the cone never gets closer either
        for _ in 0..200 {
            let cand = psd_project(&(&proj + &random_sym(&mut rng, 5).scale(0.05)));
            assert!(best <= (&m - &cand).frob_norm() + 1e-12);
        }
    }

    #[test]
    fn lmi_margin_examples() {
        let i = SymMat::identity(2);
        let a = DMatrix::zeros(2, 2);
        let p = SymMat::from_diagonal(&[0.7, 1.3]);
        assert_abs_diff_eq!(lmi_margin(&p, &p, &a, &i).unwrap(), 0.0, epsilon = 1e-15);

        // [[0.5, 1], [1, 2]] has eigenvalues (2.5 ± sqrt(2.25 + 4)) / 2
        let one = |v: f64| SymMat::from_diagonal(&[v]);
        let a1 = DMatrix::from_element(1, 1, 1.0);
        let got = lmi_margin(&one(1.0), &one(0.5), &a1, &one(1.0)).unwrap();
        let (x, y, z) = (0.5f64, 1.0f64, 2.0f64);
        let closed = 0.5 * ((x + z) - ((x - z).powi(2) + 4.0 * y * y).sqrt());
        assert_abs_diff_eq!(got, closed, epsilon = 1e-14);

        let pi = &p + &SymMat::scaled_identity(2, 1e-3);
        assert!(lmi_margin(&p, &pi, &a, &i).unwrap() < 0.0);
    }

    #[test]
    fn lmi_margin_dimension_mismatch() {
        let r = lmi_margin(
            &SymMat::identity(2),
            &SymMat::identity(3),
            &DMatrix::identity(2, 2),
            &SymMat::identity(2),
        );
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn sylvester_like_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rhs = random_sym(&mut rng, 3);
        let l0 = sym_solve_sylvester_like(&SymMat::zeros(3), &rhs).unwrap();
        assert!(l0.max_abs_diff(&rhs) < 1e-14);
        let l1 = sym_solve_sylvester_like(&SymMat::identity(3), &rhs).unwrap();
        assert!(l1.max_abs_diff(&rhs.scale(0.5)) < 1e-14);
    }

    /// Independent PSD certificate: Cholesky of `M + δ I` for a tiny shift.
    fn shifted_cholesky_psd(m: &SymMat) -> bool {
        let shift = 1e-11 * (1.0 + m.matrix().amax());
        is_positive_definite(&(m + &SymMat::scaled_identity(m.dim(), shift)))
    }

    #[test]
    fn lmi_margin_agrees_with_cholesky_certificate() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut seen = [0usize; 2];
        for _ in 0..100 {
            let n = rng.random_range(1..=3);
            let p = random_pd(&mut rng, n);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.2..1.2));
            let w = random_pd(&mut rng, n);
            let pi = random_pd(&mut rng, n).scale(rng.random_range(0.05..0.6));
            let margin = lmi_margin(&p, &pi, &a, &w).unwrap();
            let block = lmi_block(&p, &pi, &a, &w).unwrap();
            if margin.abs() < 1e-9 {
                continue;
            }
            assert_eq!(margin >= 0.0, shifted_cholesky_psd(&block), "margin {margin}");
            seen[(margin >= 0.0) as usize] += 1;
        }
        assert!(seen[0] > 5 && seen[1] > 5, "{seen:?}");
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_sym(&mut rng, n);
            let once = psd_project(&m);
            let twice = psd_project(&once);
            prop_assert!(once.max_abs_diff(&twice) < 1e-12);
            prop_assert!(min_eigenvalue(&once) >= -1e-12);
        }

        #[test]
        fn logdet_equals_eigen_sum(seed in any::<u64>(), n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_pd(&mut rng, n);
            let (vals, _) = eigh(&m);
            let oracle: f64 = vals.iter().map(|v| v.ln()).sum();
            let got = chol_logdet(&m).unwrap();
            prop_assert!((got - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));
        }

        #[test]
        fn sylvester_like_residual(seed in any::<u64>(), n in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_psd(&mut rng, n);
            let rhs = random_sym(&mut rng, n);
            let lam = sym_solve_sylvester_like(&m, &rhs).unwrap();
            let resid = SymMat::from_matrix(m.matrix() * lam.matrix() * m.matrix()) + &lam - &rhs;
            prop_assert!(resid.frob_norm() <= 1e-10);
        }
    }

    #[test]
    fn svec_round_trip_and_bilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_pd(&mut rng, 3);
        let y = random_pd(&mut rng, 3);
        assert_eq!(smat(svec(&x).as_slice(), 3), x);
        let pairs = svec_pairs(3);
        let h = svec_bilinear(x.matrix(), y.matrix());
        for (i, &(a, b)) in pairs.iter().enumerate() {
            for (j, &(c, d)) in pairs.iter().enumerate() {
                let ei = basis(3, a, b);
                let ej = basis(3, c, d);
                let direct = (x.matrix() * &ei * y.matrix() * &ej).trace();
                assert!((h[(i, j)] - direct).abs() < 1e-12);
            }
        }
        let g = svec_gradient(&x);
        for (i, &(a, b)) in pairs.iter().enumerate() {
            assert!((g[i] - (x.matrix() * basis(3, a, b)).trace()).abs() < 1e-12);
        }
    }

    fn basis(n: usize, a: usize, b: usize) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(n, n);
        e[(a, b)] = 1.0;
        e[(b, a)] = 1.0;
        e
    }
}
