//! The two-factor-block example used throughout the tests: four exogenous
//! indicators on one factor, eight endogenous indicators on two factors.

use crate::model::{Dims, EntrySpec, Grid, ModelGrids, ModelSpec, SymGrid, ThetaVector};
use crate::sim::{LatentSystemSpec, OUJumpSpec};

pub const P1: usize = 4;
pub const P2: usize = 8;

pub fn lambda1_true() -> [f64; P1] {
    [1.0, 0.7, 1.3, 0.9]
}

pub fn lambda2_true() -> [[f64; 2]; P2] {
    [
        [1.0, 0.0],
        [0.8, 0.0],
        [1.4, 0.0],
        [1.2, 0.0],
        [0.0, 1.0],
        [0.0, 0.6],
        [0.0, 1.3],
        [0.0, 0.9],
    ]
}

pub fn gamma_true() -> [f64; 2] {
    [0.7, -0.8]
}

/// True parameter of the correctly specified model, in its theta ordering.
pub fn theta0() -> ThetaVector {
    ThetaVector(vec![
        0.7, 1.3, 0.9, 0.8, 1.4, 1.2, 0.6, 1.3, 0.9, 0.7, -0.8, 1.44, 2.56, 0.49, 1.44, 0.81, 0.81, 1.44, 0.64, 1.21,
        2.25, 1.69, 0.49, 1.96, 0.81, 1.21,
    ])
}

/// Correct model: `q = 26`, `df = 52`.
///
/// theta1..3 loadings of X1 (first fixed at 1), theta4..9 free loadings of X2
/// (first indicator of each factor fixed at 1), theta10..11 Gamma, theta12
/// S_xi, theta13..16 S_delta, theta17..24 S_eps, theta25..26 S_zeta.
pub fn correct_model() -> ModelSpec {
    let f = EntrySpec::fixed;
    let t = EntrySpec::free;
    let l1 = [f(1.0), t(0), t(1), t(2)];
    let l2 = [
        [f(1.0), f(0.0)],
        [t(3), f(0.0)],
        [t(4), f(0.0)],
        [t(5), f(0.0)],
        [f(0.0), f(1.0)],
        [f(0.0), t(6)],
        [f(0.0), t(7)],
        [f(0.0), t(8)],
    ];
    ModelSpec::new(ModelGrids {
        dims: Dims {
            p1: P1,
            p2: P2,
            k1: 1,
            k2: 2,
        },
        lambda1: Grid::from_fn(P1, 1, |r, _| l1[r]),
        lambda2: Grid::from_fn(P2, 2, |r, c| l2[r][c]),
        b0: Grid::fixed_zeros(2, 2),
        gamma: Grid::from_fn(2, 1, |r, _| t(9 + r)),
        sig_xi: SymGrid::diagonal(vec![t(11)]),
        sig_delta: SymGrid::diagonal((12..16).map(t).collect()),
        sig_eps: SymGrid::diagonal((16..24).map(t).collect()),
        sig_zeta: SymGrid::diagonal(vec![t(24), t(25)]),
    })
    .expect("correct model preset is valid")
}

/// Misspecified model: all eight X2 indicators load on one factor.
/// `q = 25`, `df = 53`.
pub fn misspecified_model() -> ModelSpec {
    let f = EntrySpec::fixed;
    let t = EntrySpec::free;
    let l1 = [f(1.0), t(0), t(1), t(2)];
    ModelSpec::new(ModelGrids {
        dims: Dims {
            p1: P1,
            p2: P2,
            k1: 1,
            k2: 1,
        },
        lambda1: Grid::from_fn(P1, 1, |r, _| l1[r]),
        lambda2: Grid::from_fn(P2, 1, |r, _| if r == 0 { f(1.0) } else { t(2 + r) }),
        b0: Grid::fixed_zeros(1, 1),
        gamma: Grid::from_fn(1, 1, |_, _| t(10)),
        sig_xi: SymGrid::diagonal(vec![t(11)]),
        sig_delta: SymGrid::diagonal((12..16).map(t).collect()),
        sig_eps: SymGrid::diagonal((16..24).map(t).collect()),
        sig_zeta: SymGrid::diagonal(vec![t(24)]),
    })
    .expect("misspecified model preset is valid")
}

fn ou_diag(rates: &[f64], diffusions: &[f64], intensities: &[f64], jump_vars: &[f64]) -> OUJumpSpec {
    OUJumpSpec::diagonal(
        rates,
        &vec![0.0; rates.len()],
        diffusions,
        intensities,
        jump_vars,
        &vec![0.0; rates.len()],
    )
}

/// The true data-generating system; its continuous-part covariance is
/// `Sigma(theta0)` under [`correct_model`].
pub fn true_system() -> LatentSystemSpec {
    LatentSystemSpec {
        lambda1: nalgebra::DMatrix::from_column_slice(P1, 1, &lambda1_true()),
        lambda2: nalgebra::DMatrix::from_fn(P2, 2, |r, c| lambda2_true()[r][c]),
        b0: nalgebra::DMatrix::zeros(2, 2),
        gamma: nalgebra::DMatrix::from_column_slice(2, 1, &gamma_true()),
        xi: OUJumpSpec::diagonal(&[2.0], &[1.0], &[1.2], &[3.0], &[5.0], &[1.0]),
        delta: ou_diag(
            &[0.8, 0.5, 0.9, 0.7],
            &[1.6, 0.7, 1.2, 0.9],
            &[2.0, 1.0, 1.0, 2.0],
            &[3.0, 2.0, 3.0, 2.0],
        ),
        eps: ou_diag(
            &[0.8, 1.5, 0.9, 0.7, 1.2, 0.5, 1.3, 0.6],
            &[0.9, 1.2, 0.8, 1.1, 1.5, 1.3, 0.7, 1.4],
            &[2.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0],
            &[2.0, 3.0, 2.0, 3.0, 3.0, 3.0, 2.0, 3.0],
        ),
        zeta: ou_diag(&[0.8, 1.4], &[0.9, 1.1], &[2.0, 1.0], &[2.0, 3.0]),
    }
}

/// `Sigma = [[t1, t1 t2], [t1 t2, t1 t2^2 + t3]]` on one exogenous and one
/// endogenous indicator: a bijective reparametrization of all 2x2
/// covariance matrices, so its fit reproduces the estimate exactly.
pub fn saturated_bivariate() -> ModelSpec {
    let t = EntrySpec::free;
    let f = EntrySpec::fixed;
    ModelSpec::new(ModelGrids {
        dims: Dims {
            p1: 1,
            p2: 1,
            k1: 1,
            k2: 1,
        },
        lambda1: Grid::from_fn(1, 1, |_, _| f(1.0)),
        lambda2: Grid::from_fn(1, 1, |_, _| f(1.0)),
        b0: Grid::fixed_zeros(1, 1),
        gamma: Grid::from_fn(1, 1, |_, _| t(1)),
        sig_xi: SymGrid::diagonal(vec![t(0)]),
        sig_delta: SymGrid::diagonal(vec![f(0.0)]),
        sig_eps: SymGrid::diagonal(vec![f(0.0)]),
        sig_zeta: SymGrid::diagonal(vec![t(2)]),
    })
    .expect("saturated model is valid")
}

/// A small jump-diffusion system with one indicator per block.
pub fn bivariate_system() -> LatentSystemSpec {
    LatentSystemSpec {
        lambda1: nalgebra::DMatrix::from_element(1, 1, 1.0),
        lambda2: nalgebra::DMatrix::from_element(1, 1, 0.8),
        b0: nalgebra::DMatrix::zeros(1, 1),
        gamma: nalgebra::DMatrix::from_element(1, 1, 0.6),
        xi: OUJumpSpec::diagonal(&[1.0], &[0.5], &[1.0], &[2.0], &[4.0], &[0.5]),
        delta: ou_diag(&[1.0], &[0.5], &[1.0], &[2.0]),
        eps: ou_diag(&[1.0], &[0.7], &[1.0], &[2.0]),
        zeta: ou_diag(&[1.0], &[0.9], &[0.0], &[0.0]),
    }
}

/// The 78 entries of `vech Sigma(theta0)` keyed by 1-based `(row, col)` with
/// `row >= col`.
pub fn sigma0_table() -> Vec<((usize, usize), f64)> {
    let l1 = lambda1_true();
    let l2 = lambda2_true();
    let g = gamma_true();
    let phi = 1.44;
    let delta = [2.56, 0.49, 1.44, 0.81];
    let eps = [0.81, 1.44, 0.64, 1.21, 2.25, 1.69, 0.49, 1.96];
    let zeta = [0.81, 1.21];
    // Row loading on (xi, zeta1, zeta2).
    let row = |i: usize| -> [f64; 3] {
        if i < P1 {
            [l1[i], 0.0, 0.0]
        } else {
            let r = l2[i - P1];
            [r[0] * g[0] + r[1] * g[1], r[0], r[1]]
        }
    };
    let c = [phi, zeta[0], zeta[1]];
    let p = P1 + P2;
    let mut out = Vec::with_capacity(p * (p + 1) / 2);
    for col in 0..p {
        for r in col..p {
            let (a, b) = (row(r), row(col));
            let mut v: f64 = (0..3).map(|k| a[k] * c[k] * b[k]).sum();
            if r == col {
                v += if r < P1 { delta[r] } else { eps[r - P1] };
            }
            out.push(((r + 1, col + 1), v));
        }
    }
    out
}
