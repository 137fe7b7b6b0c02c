//! Dense symmetric-matrix utilities.
//!
//! Half-vectorization uses the column-major lower-triangle ordering everywhere
//! in the crate: for `p = 3` the order is `m11, m21, m31, m22, m32, m33`.

use std::collections::HashMap;
use std::ops::Deref;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Number of distinct entries of a symmetric `p x p` matrix.
pub fn pbar(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Position of entry `(i, j)` (either triangle) inside `vech`.
pub fn vech_index(i: usize, j: usize, p: usize) -> usize {
    let (r, c) = if i >= j { (i, j) } else { (j, i) };
    // columns 0..c hold c*p - c(c-1)/2 entries
    c * p - c * c.saturating_sub(1) / 2 + (r - c)
}

/// Inverse of [`vech_index`]: the `(row, col)` with `row >= col` at position `k`.
pub fn vech_position(k: usize, p: usize) -> (usize, usize) {
    let mut offset = 0;
    for c in 0..p {
        let len = p - c;
        if k < offset + len {
            return (c + (k - offset), c);
        }
        offset += len;
    }
    panic!("vech position {k} out of range for p = {p}");
}

/// A symmetric matrix. Both triangles are stored and kept exactly equal.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn identity(p: usize) -> Self {
        SymMatrix(DMatrix::identity(p, p))
    }

    pub fn zeros(p: usize) -> Self {
        SymMatrix(DMatrix::zeros(p, p))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Builds from the lower triangle; `f(i, j)` is only called with `i >= j`.
    pub fn from_lower_fn(p: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(p, p);
        for j in 0..p {
            for i in j..p {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix(m)
    }

    /// Copies the lower triangle of `m` onto the upper one.
    pub fn from_lower(m: &DMatrix<f64>) -> Self {
        assert!(m.is_square(), "symmetric matrix must be square");
        Self::from_lower_fn(m.nrows(), |i, j| m[(i, j)])
    }

    /// Averages `m` with its transpose. Used for matrices that are symmetric up
    /// to rounding (products such as `L C L^T`).
    pub fn symmetrize(m: &DMatrix<f64>) -> Self {
        assert!(m.is_square(), "symmetric matrix must be square");
        Self::from_lower_fn(m.nrows(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
    }

    /// Accepts `m` only if it is exactly symmetric.
    pub fn try_from_dense(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::mismatch("symmetric matrix columns", m.nrows(), m.ncols()));
        }
        for j in 0..m.ncols() {
            for i in (j + 1)..m.nrows() {
                if m[(i, j)] != m[(j, i)] {
                    return Err(Error::Domain(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(SymMatrix(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// `tr(self * other)` without forming the product.
    pub fn trace_product(&self, other: &SymMatrix) -> f64 {
        self.0.component_mul(&other.0).sum()
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix(&self.0 * c)
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `vech M` together with the dimension of `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfVec {
    dim: usize,
    data: DVector<f64>,
}

impl HalfVec {
    pub fn new(dim: usize, data: DVector<f64>) -> Result<Self> {
        if data.len() != pbar(dim) {
            return Err(Error::mismatch("half-vectorization length", pbar(dim), data.len()));
        }
        Ok(HalfVec { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice()
    }

    pub fn to_sym(&self) -> SymMatrix {
        SymMatrix::from_lower_fn(self.dim, |i, j| self.data[vech_index(i, j, self.dim)])
    }
}

pub fn vech(m: &SymMatrix) -> HalfVec {
    let p = m.dim();
    let mut data = DVector::zeros(pbar(p));
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            data[k] = m[(i, j)];
            k += 1;
        }
    }
    HalfVec { dim: p, data }
}

/// Column-major vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// The duplication matrix `D` (`vec M = D vech M`) and its left inverse
/// `D+ = (D^T D)^-1 D^T` (`vech M = D+ vec M`).
#[derive(Clone, Debug)]
pub struct DuplicationPair {
    pub dim: usize,
    pub d: DMatrix<f64>,
    pub d_plus: DMatrix<f64>,
}

fn build_duplication(p: usize) -> DuplicationPair {
    let pb = pbar(p);
    let mut d = DMatrix::zeros(p * p, pb);
    for j in 0..p {
        for i in 0..p {
            d[(j * p + i, vech_index(i, j, p))] = 1.0;
        }
    }
    // D^T D is diagonal: 1 for diagonal entries of M, 2 for off-diagonal ones.
    let mut d_plus = d.transpose();
    for k in 0..pb {
        let (i, j) = vech_position(k, p);
        if i != j {
            d_plus.row_mut(k).scale_mut(0.5);
        }
    }
    DuplicationPair { dim: p, d, d_plus }
}

/// Cached duplication pair for dimension `p`.
pub fn duplication(p: usize) -> Result<Arc<DuplicationPair>> {
    if p == 0 {
        return Err(Error::Domain("duplication matrix needs p >= 1".into()));
    }
    static CACHE: OnceLock<RwLock<HashMap<usize, Arc<DuplicationPair>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(hit) = cache.read().expect("duplication cache poisoned").get(&p) {
        return Ok(Arc::clone(hit));
    }
    let mut guard = cache.write().expect("duplication cache poisoned");
    Ok(Arc::clone(
        guard.entry(p).or_insert_with(|| Arc::new(build_duplication(p))),
    ))
}

/// Lower Cholesky factor. Fails with the index of the first non-positive pivot.
pub fn cholesky(m: &SymMatrix) -> Result<DMatrix<f64>> {
    let p = m.dim();
    let mut l = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..p {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

pub fn is_positive_definite(m: &SymMatrix) -> bool {
    cholesky(m).is_ok()
}

/// `log det M` and `M^-1` through the Cholesky factor.
pub fn chol_logdet_inv(m: &SymMatrix) -> Result<(f64, SymMatrix)> {
    let l = cholesky(m)?;
    let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let p = m.dim();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::NotPositiveDefinite { pivot: 0 })?;
    let inv = l_inv.transpose() * &l_inv;
    Ok((logdet, SymMatrix::symmetrize(&inv)))
}

/// `2 D+ (S kron S) D+^T`, the asymptotic covariance of `sqrt(n) vech` of a
/// realized covariance with limit `S`.
///
/// Uses the entrywise identity
/// `[2 D+ (S kron S) D+^T]_{(ij),(kl)} = S_ik S_jl + S_il S_jk`.
pub fn sandwich_cov(s: &SymMatrix) -> SymMatrix {
    let p = s.dim();
    let pb = pbar(p);
    let positions: Vec<(usize, usize)> = (0..pb).map(|k| vech_position(k, p)).collect();
    let mut out = DMatrix::zeros(pb, pb);
    for (a, &(i, j)) in positions.iter().enumerate() {
        for (b, &(k, l)) in positions.iter().enumerate().take(a + 1) {
            let v = s[(i, k)] * s[(j, l)] + s[(i, l)] * s[(j, k)];
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    SymMatrix(out)
}

/// Inverse of [`sandwich_cov`] for positive definite `S`:
/// `(1/2) D^T (S^-1 kron S^-1) D`.
pub fn sandwich_cov_inverse(s_inv: &SymMatrix) -> SymMatrix {
    let p = s_inv.dim();
    let pb = pbar(p);
    let positions: Vec<(usize, usize)> = (0..pb).map(|k| vech_position(k, p)).collect();
    let mut out = DMatrix::zeros(pb, pb);
    for (a, &(i, j)) in positions.iter().enumerate() {
        for (b, &(k, l)) in positions.iter().enumerate().take(a + 1) {
            // D^T picks the (i,j) and (j,i) rows of vec, hence the multiplicities.
            let m_a = if i == j { 1.0 } else { 2.0 };
            let m_b = if k == l { 1.0 } else { 2.0 };
            let sym = 0.5 * (s_inv[(i, k)] * s_inv[(j, l)] + s_inv[(i, l)] * s_inv[(j, k)]);
            let v = 0.5 * m_a * m_b * sym;
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    SymMatrix(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_sym(p: usize, vals: &[f64]) -> SymMatrix {
        let mut it = vals.iter().cycle();
        SymMatrix::from_lower_fn(p, |_, _| *it.next().unwrap())
    }

    #[test]
    fn vech_small_cases() {
        let m = SymMatrix::from_lower_fn(1, |_, _| 3.5);
        assert_eq!(vech(&m).as_slice(), &[3.5]);

        let m = SymMatrix::from_lower(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 3.0]));
        assert_eq!(vech(&m).as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn vech_index_matches_positions() {
        for p in 1..8 {
            for k in 0..pbar(p) {
                let (i, j) = vech_position(k, p);
                assert_eq!(vech_index(i, j, p), k);
                assert_eq!(vech_index(j, i, p), k);
            }
        }
    }

    #[test]
    fn duplication_p1_and_p2() {
        let dp = duplication(1).unwrap();
        assert_eq!(dp.d, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(dp.d_plus, DMatrix::from_element(1, 1, 1.0));

        let dp = duplication(2).unwrap();
        let expected = DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(dp.d, expected);
    }

    #[test]
    fn duplication_rejects_zero() {
        assert!(duplication(0).is_err());
    }

    #[test]
    fn duplication_structure() {
        for p in 1..=6 {
            let dp = duplication(p).unwrap();
            for r in 0..p * p {
                let row = dp.d.row(r);
                assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
                assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            }
            let dtd = dp.d.transpose() * &dp.d;
            let explicit = dtd.try_inverse().unwrap() * dp.d.transpose();
            assert!((explicit - &dp.d_plus).abs().max() < 1e-15);
            let ident = &dp.d_plus * &dp.d;
            assert_eq!(ident, DMatrix::identity(pbar(p), pbar(p)));
        }
    }

    #[test]
    fn duplication_cache_returns_shared_instance() {
        let a = duplication(5).unwrap();
        let b = duplication(5).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }

    #[test]
    fn chol_identity_and_diagonal() {
        let (ld, inv) = chol_logdet_inv(&SymMatrix::identity(3)).unwrap();
        assert_eq!(ld, 0.0);
        assert_eq!(inv, SymMatrix::identity(3));

        let (ld, inv) = chol_logdet_inv(&SymMatrix::from_diagonal(&[2.0, 8.0])).unwrap();
        assert!((ld - 16f64.ln()).abs() < 1e-15);
        assert!((inv[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((inv[(1, 1)] - 0.125).abs() < 1e-15);
        assert_eq!(inv[(0, 1)], 0.0);
    }

    #[test]
    fn chol_two_by_two_against_adjugate() {
        let (a, b, c) = (4.0, 1.008, 1.196);
        let m = SymMatrix::from_lower(&DMatrix::from_row_slice(2, 2, &[a, b, b, c]));
        let (ld, inv) = chol_logdet_inv(&m).unwrap();
        let det = a * c - b * b;
        assert!((ld - det.ln()).abs() < 1e-12);
        assert!((inv[(0, 0)] - c / det).abs() < 1e-12);
        assert!((inv[(1, 1)] - a / det).abs() < 1e-12);
        assert!((inv[(0, 1)] + b / det).abs() < 1e-12);
    }

    #[test]
    fn chol_reports_failing_pivot() {
        let m = SymMatrix::from_lower(&DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 1.0],
        ));
        match chol_logdet_inv(&m) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 2),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
        assert!(!is_positive_definite(&SymMatrix::zeros(2)));
    }

    #[test]
    fn sandwich_scalar_cases() {
        let s = SymMatrix::from_diagonal(&[2.0]);
        assert_eq!(sandwich_cov(&s)[(0, 0)], 8.0);
        let s = SymMatrix::from_diagonal(&[4.0]);
        let w = sandwich_cov(&s);
        assert_eq!(w[(0, 0)], 32.0);
        let sd = (w[(0, 0)] / 1e5).sqrt();
        assert!((sd - 0.0179).abs() < 1e-4);
    }

    #[test]
    fn sandwich_p2_cross_entry() {
        // ((1,1),(2,2)) entry: 2 * D+ (S kron S) D+^T expands to 2 * S12^2.
        let s = SymMatrix::from_lower(&DMatrix::from_row_slice(2, 2, &[3.0, 0.7, 0.7, 2.0]));
        let w = sandwich_cov(&s);
        assert!((w[(0, 2)] - 2.0 * 0.7 * 0.7).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn vec_vech_roundtrip(p in 1usize..=6, vals in prop::collection::vec(-5.0f64..5.0, 21)) {
            let m = random_sym(p, &vals);
            let dp = duplication(p).unwrap();
            let h = vech(&m);
            let v = vec_of(&m);
            prop_assert_eq!(&dp.d * h.as_vector(), v.clone());
            let back = &dp.d_plus * &v;
            prop_assert!((back - h.as_vector()).abs().max() < 1e-15);
            prop_assert_eq!(h.to_sym(), m);
        }

        #[test]
        fn chol_recovers_llt(p in 1usize..=6, vals in prop::collection::vec(-1.0f64..1.0, 21), diag in prop::collection::vec(0.5f64..2.0, 6)) {
            let mut l = DMatrix::zeros(p, p);
            let mut it = vals.iter();
            for j in 0..p {
                l[(j, j)] = diag[j];
                for i in (j + 1)..p {
                    l[(i, j)] = *it.next().unwrap();
                }
            }
            let a = SymMatrix::symmetrize(&(&l * l.transpose()));
            let (ld, inv) = chol_logdet_inv(&a).unwrap();
            let expected: f64 = 2.0 * diag[..p].iter().map(|d| d.ln()).sum::<f64>();
            prop_assert!((ld - expected).abs() <= 1e-9 * expected.abs().max(1.0));
            let resid = a.as_matrix() * inv.as_matrix() - DMatrix::<f64>::identity(p, p);
            prop_assert!(resid.abs().max() < 1e-8);
        }

        #[test]
        fn sandwich_is_psd_and_matches_kronecker(p in 1usize..=4, vals in prop::collection::vec(-3.0f64..3.0, 10)) {
            let a = random_sym(p, &vals);
            let s = SymMatrix::symmetrize(&(a.as_matrix() * a.as_matrix()));
            let w = sandwich_cov(&s);
            let dp = duplication(p).unwrap();
            let kron = s.as_matrix().kronecker(s.as_matrix());
            let literal = (&dp.d_plus * kron * dp.d_plus.transpose()) * 2.0;
            let tol = 1e-12 * w.as_matrix().amax().max(1.0);
            prop_assert!((w.as_matrix() - literal).abs().max() < tol);
            let eig = w.as_matrix().clone().symmetric_eigen();
            prop_assert!(eig.eigenvalues.iter().all(|&e| e >= -tol));
        }
    }

    #[test]
    fn sandwich_inverse_is_inverse() {
        let s = SymMatrix::from_lower(&DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.3, -0.4, 0.3, 1.5, 0.2, -0.4, 0.2, 1.0],
        ));
        let (_, s_inv) = chol_logdet_inv(&s).unwrap();
        let w = sandwich_cov(&s);
        let w_inv = sandwich_cov_inverse(&s_inv);
        let prod = w.as_matrix() * w_inv.as_matrix();
        assert!((prod - DMatrix::<f64>::identity(6, 6)).abs().max() < 1e-12);
    }
}
