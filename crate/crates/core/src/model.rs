//! Covariance-structure specification of the factor model
//!
//! ```text
//! X1 = L1 xi + delta
//! X2 = L2 eta + eps,      eta = B0 eta + Gamma xi + zeta
//! ```
//!
//! Every entry of `L1, L2, B0, Gamma, S_xi, S_delta, S_eps, S_zeta` is either a
//! fixed constant or a free parameter `theta[k]`. The implied covariance of the
//! increments is
//!
//! ```text
//! S11 = L1 S_xi L1^T + S_delta
//! S12 = L1 S_xi Gamma^T Psi^-T L2^T
//! S22 = L2 Psi^-1 (Gamma S_xi Gamma^T + S_zeta) Psi^-T L2^T + S_eps
//! ```
//!
//! with `Psi = I - B0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pbar, vech, vech_index, vech_position, SymMatrix};

pub const DEFAULT_LOADING_BOUNDS: (f64, f64) = (-1e6, 1e6);
pub const DEFAULT_VARIANCE_BOUNDS: (f64, f64) = (1e-8, 1e6);

const PSI_SINGULARITY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EntrySpec {
    Fixed(f64),
    Free { index: usize, lower: f64, upper: f64 },
}

impl EntrySpec {
    pub fn fixed(value: f64) -> Self {
        EntrySpec::Fixed(value)
    }

    /// Free entry with infinite bounds; positional defaults are applied when the
    /// grid is assembled into a [`ModelSpec`].
    pub fn free(index: usize) -> Self {
        EntrySpec::Free {
            index,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub fn bounded(index: usize, lower: f64, upper: f64) -> Self {
        EntrySpec::Free { index, lower, upper }
    }

    fn value(&self, theta: &[f64]) -> f64 {
        match *self {
            EntrySpec::Fixed(v) => v,
            EntrySpec::Free { index, .. } => theta[index],
        }
    }

    fn explicit_bounds(&self) -> Option<(f64, f64)> {
        match *self {
            EntrySpec::Free { lower, upper, .. } if lower != f64::NEG_INFINITY || upper != f64::INFINITY => {
                Some((lower, upper))
            }
            _ => None,
        }
    }

    fn same_role(&self, other: &EntrySpec) -> bool {
        match (self, other) {
            (EntrySpec::Fixed(a), EntrySpec::Fixed(b)) => a == b,
            (EntrySpec::Free { index: a, .. }, EntrySpec::Free { index: b, .. }) => a == b,
            _ => false,
        }
    }
}

/// Rectangular grid of entries, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    entries: Vec<EntrySpec>,
}

impl Grid {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> EntrySpec) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                entries.push(f(r, c));
            }
        }
        Grid { rows, cols, entries }
    }

    pub fn fixed_zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| EntrySpec::Fixed(0.0))
    }

    pub fn from_rows(rows: Vec<Vec<EntrySpec>>) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
            return Err(Error::InvalidSpec(format!(
                "row {bad} has {} entries, expected {ncols}",
                rows[bad].len()
            )));
        }
        Ok(Grid {
            rows: nrows,
            cols: ncols,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> &EntrySpec {
        &self.entries[r * self.cols + c]
    }

    fn eval(&self, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c).value(theta))
    }

    fn iter(&self) -> impl Iterator<Item = (usize, usize, &EntrySpec)> {
        self.entries
            .iter()
            .enumerate()
            .map(move |(k, e)| (k / self.cols, k % self.cols, e))
    }
}

/// Symmetric grid; only the lower triangle is stored (vech order).
#[derive(Clone, Debug, PartialEq)]
pub struct SymGrid {
    dim: usize,
    lower: Vec<EntrySpec>,
}

impl SymGrid {
    pub fn from_lower_fn(dim: usize, mut f: impl FnMut(usize, usize) -> EntrySpec) -> Self {
        let lower = (0..pbar(dim))
            .map(|k| {
                let (i, j) = vech_position(k, dim);
                f(i, j)
            })
            .collect();
        SymGrid { dim, lower }
    }

    pub fn diagonal(entries: Vec<EntrySpec>) -> Self {
        let dim = entries.len();
        Self::from_lower_fn(dim, |i, j| if i == j { entries[i] } else { EntrySpec::Fixed(0.0) })
    }

    /// Builds from a full square grid, requiring `(i, j)` and `(j, i)` to agree.
    pub fn from_full(grid: &Grid) -> Result<Self> {
        let (r, c) = grid.shape();
        if r != c {
            return Err(Error::InvalidSpec(format!(
                "symmetric grid must be square, got {r}x{c}"
            )));
        }
        for i in 0..r {
            for j in 0..i {
                if !grid.get(i, j).same_role(grid.get(j, i)) {
                    return Err(Error::InvalidSpec(format!(
                        "symmetric grid entries ({i}, {j}) and ({j}, {i}) differ"
                    )));
                }
            }
        }
        Ok(Self::from_lower_fn(r, |i, j| *grid.get(i, j)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entry `(i, j)`; the upper triangle is a view of the lower one.
    pub fn get(&self, i: usize, j: usize) -> &EntrySpec {
        &self.lower[vech_index(i, j, self.dim)]
    }

    fn eval(&self, theta: &[f64]) -> DMatrix<f64> {
        SymMatrix::from_lower_fn(self.dim, |i, j| self.get(i, j).value(theta)).into_matrix()
    }

    fn iter(&self) -> impl Iterator<Item = (usize, usize, &EntrySpec)> {
        self.lower.iter().enumerate().map(move |(k, e)| {
            let (i, j) = vech_position(k, self.dim);
            (i, j, e)
        })
    }

    pub fn to_grid(&self) -> Grid {
        Grid::from_fn(self.dim, self.dim, |i, j| *self.get(i, j))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Lambda1,
    Lambda2,
    B0,
    Gamma,
    SigXi,
    SigDelta,
    SigEps,
    SigZeta,
}

#[derive(Clone, Copy, Debug)]
struct Occurrence {
    slot: Slot,
    row: usize,
    col: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub p1: usize,
    pub p2: usize,
    pub k1: usize,
    pub k2: usize,
}

impl Dims {
    pub fn p(&self) -> usize {
        self.p1 + self.p2
    }
}

/// Parametric SEM structure with the parameter layout `theta in R^q`.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    dims: Dims,
    lambda1: Grid,
    lambda2: Grid,
    b0: Grid,
    gamma: Grid,
    sig_xi: SymGrid,
    sig_delta: SymGrid,
    sig_eps: SymGrid,
    sig_zeta: SymGrid,
    q: usize,
    bounds: Vec<(f64, f64)>,
    occurrences: Vec<Vec<Occurrence>>,
}

/// The raw grids of a model before validation.
#[derive(Clone, Debug)]
pub struct ModelGrids {
    pub dims: Dims,
    pub lambda1: Grid,
    pub lambda2: Grid,
    pub b0: Grid,
    pub gamma: Grid,
    pub sig_xi: SymGrid,
    pub sig_delta: SymGrid,
    pub sig_eps: SymGrid,
    pub sig_zeta: SymGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaVector(pub Vec<f64>);

impl ThetaVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for ThetaVector {
    fn from(v: Vec<f64>) -> Self {
        ThetaVector(v)
    }
}

/// Numeric matrices of the model at one parameter value.
#[derive(Clone, Debug)]
pub struct Materialized {
    pub lambda1: DMatrix<f64>,
    pub lambda2: DMatrix<f64>,
    pub b0: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub sig_xi: DMatrix<f64>,
    pub sig_delta: DMatrix<f64>,
    pub sig_eps: DMatrix<f64>,
    pub sig_zeta: DMatrix<f64>,
    pub psi: DMatrix<f64>,
}

/// `(I - B0)^-1` via LU with partial pivoting.
pub(crate) fn invert_psi(psi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = psi
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let lu = psi.clone().lu();
    let u = lu.u();
    let min_pivot = u.diagonal().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > PSI_SINGULARITY_TOL * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::SingularPsi);
    }
    lu.try_inverse().ok_or(Error::SingularPsi)
}

impl ModelSpec {
    pub fn new(grids: ModelGrids) -> Result<Self> {
        let ModelGrids {
            dims,
            lambda1,
            lambda2,
            b0,
            gamma,
            sig_xi,
            sig_delta,
            sig_eps,
            sig_zeta,
        } = grids;
        let Dims { p1, p2, k1, k2 } = dims;
        if p1 == 0 || p2 == 0 || k1 == 0 || k2 == 0 {
            return Err(Error::InvalidSpec("p1, p2, k1, k2 must all be positive".into()));
        }
        if k1 > p1 {
            return Err(Error::InvalidSpec(format!("k1 <= p1 violated: k1 = {k1}, p1 = {p1}")));
        }
        if k2 > p2 {
            return Err(Error::InvalidSpec(format!("k2 <= p2 violated: k2 = {k2}, p2 = {p2}")));
        }
        let check_shape = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(Error::InvalidSpec(format!(
                    "{name} has shape {}x{}, expected {}x{}",
                    got.0, got.1, want.0, want.1
                )))
            } else {
                Ok(())
            }
        };
        check_shape("lambda1", lambda1.shape(), (p1, k1))?;
        check_shape("lambda2", lambda2.shape(), (p2, k2))?;
        check_shape("b0", b0.shape(), (k2, k2))?;
        check_shape("gamma", gamma.shape(), (k2, k1))?;
        check_shape("sigma_xi", (sig_xi.dim(), sig_xi.dim()), (k1, k1))?;
        check_shape("sigma_delta", (sig_delta.dim(), sig_delta.dim()), (p1, p1))?;
        check_shape("sigma_eps", (sig_eps.dim(), sig_eps.dim()), (p2, p2))?;
        check_shape("sigma_zeta", (sig_zeta.dim(), sig_zeta.dim()), (k2, k2))?;
        for i in 0..k2 {
            if *b0.get(i, i) != EntrySpec::Fixed(0.0) {
                return Err(Error::InvalidSpec(format!(
                    "b0 diagonal entry ({i}, {i}) must be fixed at 0"
                )));
            }
        }

        let mut occ: Vec<(usize, Occurrence, EntrySpec, (f64, f64))> = Vec::new();
        let mut visit = |slot: Slot, r: usize, c: usize, e: &EntrySpec, default: (f64, f64)| -> Result<()> {
            match *e {
                EntrySpec::Fixed(v) if !v.is_finite() => Err(Error::InvalidSpec(format!(
                    "fixed entry of {slot:?} at ({r}, {c}) is not finite"
                ))),
                EntrySpec::Fixed(_) => Ok(()),
                EntrySpec::Free { index, lower, upper } => {
                    if !(lower < upper) || lower.is_nan() || upper.is_nan() {
                        return Err(Error::InvalidSpec(format!(
                            "bounds of theta{} must satisfy lower < upper",
                            index + 1
                        )));
                    }
                    occ.push((index, Occurrence { slot, row: r, col: c }, *e, default));
                    Ok(())
                }
            }
        };
        for (r, c, e) in lambda1.iter() {
            visit(Slot::Lambda1, r, c, e, DEFAULT_LOADING_BOUNDS)?;
        }
        for (r, c, e) in lambda2.iter() {
            visit(Slot::Lambda2, r, c, e, DEFAULT_LOADING_BOUNDS)?;
        }
        for (r, c, e) in b0.iter() {
            visit(Slot::B0, r, c, e, DEFAULT_LOADING_BOUNDS)?;
        }
        for (r, c, e) in gamma.iter() {
            visit(Slot::Gamma, r, c, e, DEFAULT_LOADING_BOUNDS)?;
        }
        for (slot, grid) in [
            (Slot::SigXi, &sig_xi),
            (Slot::SigDelta, &sig_delta),
            (Slot::SigEps, &sig_eps),
            (Slot::SigZeta, &sig_zeta),
        ] {
            for (r, c, e) in grid.iter() {
                let default = if r == c {
                    DEFAULT_VARIANCE_BOUNDS
                } else {
                    DEFAULT_LOADING_BOUNDS
                };
                visit(slot, r, c, e, default)?;
            }
        }

        let q = occ.iter().map(|(k, ..)| k + 1).max().unwrap_or(0);
        let mut occurrences = vec![Vec::new(); q];
        let mut explicit: Vec<Option<(f64, f64)>> = vec![None; q];
        let mut defaults = vec![(f64::NEG_INFINITY, f64::INFINITY); q];
        for (k, o, e, default) in occ {
            occurrences[k].push(o);
            defaults[k] = (defaults[k].0.max(default.0), defaults[k].1.min(default.1));
            if let Some(b) = e.explicit_bounds() {
                match explicit[k] {
                    Some(prev) if prev != b => {
                        return Err(Error::InvalidSpec(format!(
                            "theta{} has conflicting explicit bounds",
                            k + 1
                        )))
                    }
                    _ => explicit[k] = Some(b),
                }
            }
        }
        if let Some(gap) = occurrences.iter().position(Vec::is_empty) {
            return Err(Error::InvalidSpec(format!(
                "free parameter indices must be contiguous: theta{} is never used but theta{q} is",
                gap + 1
            )));
        }
        let mut bounds = Vec::with_capacity(q);
        for k in 0..q {
            let b = explicit[k].unwrap_or(defaults[k]);
            if !(b.0 < b.1) {
                return Err(Error::InvalidSpec(format!(
                    "theta{} has empty default bounds (used both as a variance and with conflicting range)",
                    k + 1
                )));
            }
            bounds.push(b);
        }

        Ok(ModelSpec {
            dims,
            lambda1,
            lambda2,
            b0,
            gamma,
            sig_xi,
            sig_delta,
            sig_eps,
            sig_zeta,
            q,
            bounds,
            occurrences,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn p(&self) -> usize {
        self.dims.p()
    }

    pub fn pbar(&self) -> usize {
        pbar(self.p())
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn grids(&self) -> ModelGrids {
        ModelGrids {
            dims: self.dims,
            lambda1: self.lambda1.clone(),
            lambda2: self.lambda2.clone(),
            b0: self.b0.clone(),
            gamma: self.gamma.clone(),
            sig_xi: self.sig_xi.clone(),
            sig_delta: self.sig_delta.clone(),
            sig_eps: self.sig_eps.clone(),
            sig_zeta: self.sig_zeta.clone(),
        }
    }

    fn check_len(&self, theta: &ThetaVector) -> Result<()> {
        if theta.len() != self.q {
            return Err(Error::mismatch("theta length", self.q, theta.len()));
        }
        Ok(())
    }

    pub fn in_bounds(&self, theta: &ThetaVector) -> bool {
        theta.len() == self.q
            && theta
                .as_slice()
                .iter()
                .zip(&self.bounds)
                .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    /// Clamps every coordinate into its bounds.
    pub fn project(&self, theta: &mut [f64]) {
        for (v, (lo, hi)) in theta.iter_mut().zip(&self.bounds) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn materialize(&self, theta: &ThetaVector) -> Result<Materialized> {
        self.check_len(theta)?;
        let t = theta.as_slice();
        let b0 = self.b0.eval(t);
        let psi = DMatrix::identity(self.dims.k2, self.dims.k2) - &b0;
        Ok(Materialized {
            lambda1: self.lambda1.eval(t),
            lambda2: self.lambda2.eval(t),
            b0,
            gamma: self.gamma.eval(t),
            sig_xi: self.sig_xi.eval(t),
            sig_delta: self.sig_delta.eval(t),
            sig_eps: self.sig_eps.eval(t),
            sig_zeta: self.sig_zeta.eval(t),
            psi,
        })
    }

    pub fn implied_covariance(&self, theta: &ThetaVector) -> Result<SymMatrix> {
        let m = self.materialize(theta)?;
        implied_from_parts(&m)
    }

    /// `d vech Sigma(theta) / d theta^T`, a `p_bar x q` matrix.
    pub fn jacobian(&self, theta: &ThetaVector) -> Result<DMatrix<f64>> {
        let m = self.materialize(theta)?;
        let Dims { p1, p2, k1, k2 } = self.dims;
        let p = p1 + p2;
        let k = k1 + k2;
        let psi_inv = invert_psi(&m.psi)?;

        // Joint form: Sigma = L C L^T + E with
        // L = [[L1, 0], [L2 Psi^-1 Gamma, L2 Psi^-1]], C = diag(S_xi, S_zeta),
        // E = diag(S_delta, S_eps).
        let l2_psi = &m.lambda2 * &psi_inv;
        let mut l = DMatrix::zeros(p, k);
        l.view_mut((0, 0), (p1, k1)).copy_from(&m.lambda1);
        l.view_mut((p1, 0), (p2, k1)).copy_from(&(&l2_psi * &m.gamma));
        l.view_mut((p1, k1), (p2, k2)).copy_from(&l2_psi);
        let mut c = DMatrix::zeros(k, k);
        c.view_mut((0, 0), (k1, k1)).copy_from(&m.sig_xi);
        c.view_mut((k1, k1), (k2, k2)).copy_from(&m.sig_zeta);
        let lc = &l * &c;
        let psi_gamma = &psi_inv * &m.gamma;

        let mut jac = DMatrix::zeros(pbar(p), self.q);
        for (j, occs) in self.occurrences.iter().enumerate() {
            let mut dl = DMatrix::<f64>::zeros(p, k);
            let mut dc = DMatrix::<f64>::zeros(k, k);
            let mut d_sigma = DMatrix::<f64>::zeros(p, p);
            let mut touches_l = false;
            let mut touches_c = false;
            for o in occs {
                let (r, col) = (o.row, o.col);
                match o.slot {
                    Slot::Lambda1 => {
                        dl[(r, col)] += 1.0;
                        touches_l = true;
                    }
                    Slot::Lambda2 => {
                        // d(L2) = E_rc: row p1 + r of the lower blocks picks row `col`
                        // of Psi^-1 Gamma and Psi^-1.
                        for a in 0..k1 {
                            dl[(p1 + r, a)] += psi_gamma[(col, a)];
                        }
                        for a in 0..k2 {
                            dl[(p1 + r, k1 + a)] += psi_inv[(col, a)];
                        }
                        touches_l = true;
                    }
                    Slot::Gamma => {
                        // d(L2 Psi^-1 Gamma) = L2 Psi^-1 E_rc
                        for i in 0..p2 {
                            dl[(p1 + i, col)] += l2_psi[(i, r)];
                        }
                        touches_l = true;
                    }
                    Slot::B0 => {
                        // dPsi^-1 = Psi^-1 E_rc Psi^-1 since dPsi = -dB0.
                        let d_psi_inv = psi_inv.column(r) * psi_inv.row(col);
                        let d_l2_psi = &m.lambda2 * &d_psi_inv;
                        let lower_left = &d_l2_psi * &m.gamma;
                        for i in 0..p2 {
                            for a in 0..k1 {
                                dl[(p1 + i, a)] += lower_left[(i, a)];
                            }
                            for a in 0..k2 {
                                dl[(p1 + i, k1 + a)] += d_l2_psi[(i, a)];
                            }
                        }
                        touches_l = true;
                    }
                    Slot::SigXi => {
                        dc[(r, col)] = 1.0;
                        dc[(col, r)] = 1.0;
                        touches_c = true;
                    }
                    Slot::SigZeta => {
                        dc[(k1 + r, k1 + col)] = 1.0;
                        dc[(k1 + col, k1 + r)] = 1.0;
                        touches_c = true;
                    }
                    Slot::SigDelta => {
                        d_sigma[(r, col)] = 1.0;
                        d_sigma[(col, r)] = 1.0;
                    }
                    Slot::SigEps => {
                        d_sigma[(p1 + r, p1 + col)] = 1.0;
                        d_sigma[(p1 + col, p1 + r)] = 1.0;
                    }
                }
            }
            if touches_l {
                let t = &dl * lc.transpose();
                d_sigma += &t + t.transpose();
            }
            if touches_c {
                d_sigma += &l * dc * l.transpose();
            }
            let col = vech(&SymMatrix::symmetrize(&d_sigma));
            jac.set_column(j, col.as_vector());
        }
        Ok(jac)
    }

    /// Numerical column rank of the jacobian and of the loading matrices.
    pub fn rank_check(&self, theta: &ThetaVector) -> RankReport {
        let (jac_rank, singular_values, jac_error) = match self.jacobian(theta) {
            Ok(j) if self.q > 0 => {
                let (r, sv) = numerical_rank(&j);
                (r, sv, None)
            }
            Ok(_) => (0, Vec::new(), None),
            Err(e) => (0, Vec::new(), Some(e.to_string())),
        };
        let (l1_full, l2_full) = match self.materialize(theta) {
            Ok(m) => (
                numerical_rank(&m.lambda1).0 == m.lambda1.ncols(),
                numerical_rank(&m.lambda2).0 == m.lambda2.ncols(),
            ),
            Err(_) => (false, false),
        };
        RankReport {
            q: self.q,
            jacobian_rank: jac_rank,
            jacobian_full_rank: jac_error.is_none() && jac_rank == self.q,
            lambda1_full_rank: l1_full,
            lambda2_full_rank: l2_full,
            singular_values,
            error: jac_error,
        }
    }

    /// A feasible generic starting point: free loadings at 1, structural
    /// coefficients at 0, latent variances at 1, error variances at half the
    /// matching diagonal of `sigma_hat`, off-diagonal covariances at 0.
    pub fn default_start(&self, sigma_hat: &SymMatrix) -> ThetaVector {
        let p1 = self.dims.p1;
        let mut theta = vec![0.0; self.q];
        for (k, occs) in self.occurrences.iter().enumerate() {
            let o = occs[0];
            theta[k] = match o.slot {
                Slot::Lambda1 | Slot::Lambda2 => 1.0,
                Slot::Gamma | Slot::B0 => 0.0,
                Slot::SigXi | Slot::SigZeta if o.row == o.col => 1.0,
                Slot::SigDelta if o.row == o.col => 0.5 * sigma_hat[(o.row, o.row)].max(1e-6),
                Slot::SigEps if o.row == o.col => 0.5 * sigma_hat[(p1 + o.row, p1 + o.row)].max(1e-6),
                _ => 0.0,
            };
        }
        self.project(&mut theta);
        ThetaVector(theta)
    }
}

/// Block assembly of `Sigma` from numeric parts.
pub fn implied_from_parts(m: &Materialized) -> Result<SymMatrix> {
    let psi_inv = invert_psi(&m.psi)?;
    let p1 = m.lambda1.nrows();
    let p2 = m.lambda2.nrows();
    let l1 = &m.lambda1;
    let l2 = &m.lambda2;
    let s11 = l1 * &m.sig_xi * l1.transpose() + &m.sig_delta;
    let s12 = l1 * &m.sig_xi * m.gamma.transpose() * psi_inv.transpose() * l2.transpose();
    let inner = &m.gamma * &m.sig_xi * m.gamma.transpose() + &m.sig_zeta;
    let s22 = l2 * &psi_inv * inner * psi_inv.transpose() * l2.transpose() + &m.sig_eps;
    let mut full = DMatrix::zeros(p1 + p2, p1 + p2);
    full.view_mut((0, 0), (p1, p1)).copy_from(&s11);
    full.view_mut((0, p1), (p1, p2)).copy_from(&s12);
    full.view_mut((p1, 0), (p2, p1)).copy_from(&s12.transpose());
    full.view_mut((p1, p1), (p2, p2)).copy_from(&s22);
    Ok(SymMatrix::symmetrize(&full))
}

fn numerical_rank(m: &DMatrix<f64>) -> (usize, Vec<f64>) {
    if m.is_empty() {
        return (0, Vec::new());
    }
    let svd = m.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let largest = sv.first().copied().unwrap_or(0.0);
    let tol = 1e-8 * largest;
    let rank = if largest > 0.0 {
        sv.iter().filter(|&&s| s > tol).count()
    } else {
        0
    };
    (rank, sv)
}

#[derive(Clone, Debug, Serialize)]
pub struct RankReport {
    pub q: usize,
    pub jacobian_rank: usize,
    pub jacobian_full_rank: bool,
    pub lambda1_full_rank: bool,
    pub lambda2_full_rank: bool,
    pub singular_values: Vec<f64>,
    pub error: Option<String>,
}

// ---------------------------------------------------------------------------
// File format

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EntryRepr {
    Fixed(f64),
    Free(String),
    Bounded(BoundedRepr),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundedRepr {
    pub param: String,
    /// `null` stands for an infinite bound.
    pub bounds: [Option<f64>; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SymRepr {
    Full(Vec<Vec<EntryRepr>>),
    Diag { diag: Vec<EntryRepr> },
}

/// JSON document describing a [`ModelSpec`]. Free entries are written
/// `"theta<k>"` with `k` starting at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub dims: Dims,
    pub lambda1: Vec<Vec<EntryRepr>>,
    pub lambda2: Vec<Vec<EntryRepr>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b0: Option<Vec<Vec<EntryRepr>>>,
    pub gamma: Vec<Vec<EntryRepr>>,
    pub sigma_xi: SymRepr,
    pub sigma_delta: SymRepr,
    pub sigma_eps: SymRepr,
    pub sigma_zeta: SymRepr,
}

fn parse_param(name: &str) -> Result<usize> {
    let digits = name
        .strip_prefix("theta")
        .ok_or_else(|| Error::InvalidSpec(format!("free entry `{name}` must look like theta<k>")))?;
    let k: usize = digits
        .parse()
        .map_err(|_| Error::InvalidSpec(format!("free entry `{name}` must look like theta<k>")))?;
    if k == 0 {
        return Err(Error::InvalidSpec("parameter names start at theta1".into()));
    }
    Ok(k - 1)
}

impl EntryRepr {
    fn to_spec(&self) -> Result<EntrySpec> {
        Ok(match self {
            EntryRepr::Fixed(v) => EntrySpec::Fixed(*v),
            EntryRepr::Free(name) => EntrySpec::free(parse_param(name)?),
            EntryRepr::Bounded(b) => EntrySpec::bounded(
                parse_param(&b.param)?,
                b.bounds[0].unwrap_or(f64::NEG_INFINITY),
                b.bounds[1].unwrap_or(f64::INFINITY),
            ),
        })
    }

    fn from_spec(e: &EntrySpec) -> Self {
        match *e {
            EntrySpec::Fixed(v) => EntryRepr::Fixed(v),
            EntrySpec::Free { index, .. } if e.explicit_bounds().is_none() => {
                EntryRepr::Free(format!("theta{}", index + 1))
            }
            EntrySpec::Free { index, lower, upper } => EntryRepr::Bounded(BoundedRepr {
                param: format!("theta{}", index + 1),
                bounds: [lower.is_finite().then_some(lower), upper.is_finite().then_some(upper)],
            }),
        }
    }
}

fn grid_from_repr(rows: &[Vec<EntryRepr>]) -> Result<Grid> {
    let rows = rows
        .iter()
        .map(|r| r.iter().map(EntryRepr::to_spec).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Grid::from_rows(rows)
}

fn grid_to_repr(g: &Grid) -> Vec<Vec<EntryRepr>> {
    let (r, c) = g.shape();
    (0..r)
        .map(|i| (0..c).map(|j| EntryRepr::from_spec(g.get(i, j))).collect())
        .collect()
}

fn sym_from_repr(repr: &SymRepr) -> Result<SymGrid> {
    match repr {
        SymRepr::Full(rows) => SymGrid::from_full(&grid_from_repr(rows)?),
        SymRepr::Diag { diag } => Ok(SymGrid::diagonal(
            diag.iter().map(EntryRepr::to_spec).collect::<Result<_>>()?,
        )),
    }
}

fn sym_to_repr(g: &SymGrid) -> SymRepr {
    let n = g.dim();
    let off_diag_zero = (0..n).all(|i| (0..i).all(|j| *g.get(i, j) == EntrySpec::Fixed(0.0)));
    if off_diag_zero {
        SymRepr::Diag {
            diag: (0..n).map(|i| EntryRepr::from_spec(g.get(i, i))).collect(),
        }
    } else {
        SymRepr::Full(grid_to_repr(&g.to_grid()))
    }
}

impl ModelFile {
    pub fn to_spec(&self) -> Result<ModelSpec> {
        let k2 = self.dims.k2;
        let b0 = match &self.b0 {
            Some(rows) => grid_from_repr(rows)?,
            None => Grid::fixed_zeros(k2, k2),
        };
        ModelSpec::new(ModelGrids {
            dims: self.dims,
            lambda1: grid_from_repr(&self.lambda1)?,
            lambda2: grid_from_repr(&self.lambda2)?,
            b0,
            gamma: grid_from_repr(&self.gamma)?,
            sig_xi: sym_from_repr(&self.sigma_xi)?,
            sig_delta: sym_from_repr(&self.sigma_delta)?,
            sig_eps: sym_from_repr(&self.sigma_eps)?,
            sig_zeta: sym_from_repr(&self.sigma_zeta)?,
        })
    }

    pub fn from_spec(spec: &ModelSpec) -> Self {
        ModelFile {
            dims: spec.dims,
            lambda1: grid_to_repr(&spec.lambda1),
            lambda2: grid_to_repr(&spec.lambda2),
            b0: Some(grid_to_repr(&spec.b0)),
            gamma: grid_to_repr(&spec.gamma),
            sigma_xi: sym_to_repr(&spec.sig_xi),
            sigma_delta: sym_to_repr(&spec.sig_delta),
            sigma_eps: sym_to_repr(&spec.sig_eps),
            sigma_zeta: sym_to_repr(&spec.sig_zeta),
        }
    }
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        file.to_spec()
    }
}

/// `vech` of `Sigma(theta)` as a plain vector.
pub fn implied_vech(spec: &ModelSpec, theta: &ThetaVector) -> Result<DVector<f64>> {
    Ok(vech(&spec.implied_covariance(theta)?).as_vector().clone())
}
