//! Quasi-maximum likelihood for the covariance structure.
//!
//! Works on the sufficient-statistic form
//! `H(theta) = -(N/2) log det S(theta) - (N~/2) tr(S(theta)^-1 S_hat)`,
//! so the cost of a fit does not depend on the number of increments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet_inv, sandwich_cov_inverse, vech_position, SymMatrix};
use crate::model::{ModelSpec, ThetaVector};
use crate::threshold::CovEstimate;

struct Eval {
    h: f64,
    sigma_inv: SymMatrix,
}

fn evaluate(spec: &ModelSpec, theta: &ThetaVector, est: &CovEstimate) -> Option<Eval> {
    let sigma = spec.implied_covariance(theta).ok()?;
    let (logdet, sigma_inv) = chol_logdet_inv(&sigma).ok()?;
    let tr = sigma_inv.trace_product(&est.sigma_hat);
    let h = -0.5 * est.n_retained as f64 * logdet - 0.5 * est.n_tilde as f64 * tr;
    h.is_finite().then_some(Eval { h, sigma_inv })
}

/// `-inf` when `S(theta)` is not positive definite or `Psi` is singular.
pub fn quasi_loglik(spec: &ModelSpec, theta: &ThetaVector, est: &CovEstimate) -> f64 {
    evaluate(spec, theta, est).map_or(f64::NEG_INFINITY, |e| e.h)
}

fn gradient_at(
    spec: &ModelSpec,
    theta: &ThetaVector,
    est: &CovEstimate,
    sigma_inv: &SymMatrix,
) -> Result<DVector<f64>> {
    let p = sigma_inv.dim();
    let si = sigma_inv.as_matrix();
    let g = si * est.sigma_hat.as_matrix() * si * (0.5 * est.n_tilde as f64) - si * (0.5 * est.n_retained as f64);
    // tr(G dS) over the symmetric dS counts off-diagonal entries twice.
    let weighted = DVector::from_iterator(
        p * (p + 1) / 2,
        (0..p * (p + 1) / 2).map(|k| {
            let (i, j) = vech_position(k, p);
            if i == j {
                g[(i, i)]
            } else {
                g[(i, j)] + g[(j, i)]
            }
        }),
    );
    let jac = spec.jacobian(theta)?;
    Ok(jac.transpose() * weighted)
}

pub fn gradient(spec: &ModelSpec, theta: &ThetaVector, est: &CovEstimate) -> Result<DVector<f64>> {
    let sigma = spec.implied_covariance(theta)?;
    let (_, sigma_inv) = chol_logdet_inv(&sigma)?;
    gradient_at(spec, theta, est, &sigma_inv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Tolerance on the sup-norm of the projected gradient of `-H / N~`,
    /// relative to `max(1, |H / N~|)`.
    pub gtol: f64,
    /// Stop when a step moves no coordinate by more than this (relative).
    pub xtol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 2000,
            gtol: 1e-10,
            xtol: 1e-10,
        }
    }
}

/// The tolerance on `||grad H||_inf` that a converged fit must meet.
pub fn reporting_tolerance(h: f64) -> f64 {
    1e-6 * h.abs().max(1.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct QmleResult {
    pub theta_hat: Vec<f64>,
    #[serde(rename = "H_value")]
    pub h_value: f64,
    /// Sup-norm of the projected gradient of `H`.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `(D^T W^-1 D)^-1` at `theta_hat`; absent when it cannot be formed.
    pub acov: Option<Vec<Vec<f64>>>,
    pub se: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl QmleResult {
    pub fn theta(&self) -> ThetaVector {
        ThetaVector(self.theta_hat.clone())
    }
}

/// Components of `grad` that point out of the box at `theta` are zeroed.
fn project_gradient(spec: &ModelSpec, theta: &[f64], grad: &DVector<f64>) -> DVector<f64> {
    let mut out = grad.clone();
    for (k, (lo, hi)) in spec.bounds().iter().enumerate() {
        // Minimizing: a step along -grad leaves the box when at a bound.
        if (theta[k] <= *lo && grad[k] > 0.0) || (theta[k] >= *hi && grad[k] < 0.0) {
            out[k] = 0.0;
        }
    }
    out
}

/// Box-constrained BFGS on `f = -H / N~`.
pub fn fit(spec: &ModelSpec, theta_init: &ThetaVector, est: &CovEstimate, opts: &FitOptions) -> Result<QmleResult> {
    if theta_init.len() != spec.q() {
        return Err(Error::mismatch("theta_init length", spec.q(), theta_init.len()));
    }
    let q = spec.q();
    let scale = est.n_tilde as f64;
    let mut x = theta_init.as_slice().to_vec();
    spec.project(&mut x);
    let first = evaluate(spec, &ThetaVector(x.clone()), est).ok_or(Error::NoFeasibleStart)?;
    let mut f = -first.h / scale;
    let mut g = -gradient_at(spec, &ThetaVector(x.clone()), est, &first.sigma_inv)? / scale;

    let mut warnings = Vec::new();
    if est.n_retained == 0 {
        warnings.push("no increment was retained by the threshold; the fit is not statistically meaningful".into());
    }

    let mut hinv = DMatrix::<f64>::identity(q, q);
    // `fresh`: hinv is the unscaled identity, so steps are capped.
    let mut fresh = true;
    let mut iterations = 0;
    let mut converged = false;
    let armijo = 1e-4;

    while iterations < opts.max_iter {
        let pg = project_gradient(spec, &x, &g);
        if pg.amax() <= opts.gtol * f.abs().max(1.0) {
            converged = true;
            break;
        }
        iterations += 1;

        let mut d = -(&hinv * &g);
        for (k, (lo, hi)) in spec.bounds().iter().enumerate() {
            if (x[k] <= *lo && d[k] < 0.0) || (x[k] >= *hi && d[k] > 0.0) {
                d[k] = 0.0;
            }
        }
        if g.dot(&d) >= 0.0 {
            d = -pg.clone();
            hinv = DMatrix::identity(q, q);
            fresh = true;
        }
        if fresh {
            let m = d.amax();
            if m > 1.0 {
                d /= m;
            }
        }

        let mut t = 1.0;
        let accepted = loop {
            let mut trial: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            spec.project(&mut trial);
            let moved: f64 = trial.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if moved == 0.0 {
                break None;
            }
            if let Some(e) = evaluate(spec, &ThetaVector(trial.clone()), est) {
                let ft = -e.h / scale;
                let decrease: f64 = g
                    .iter()
                    .zip(trial.iter().zip(&x))
                    .map(|(gk, (a, b))| gk * (a - b))
                    .sum();
                if ft <= f + armijo * decrease {
                    break Some((trial, ft, e));
                }
            }
            t *= 0.5;
            if t < 1e-20 {
                break None;
            }
        };
        let Some((xn, fn_, e)) = accepted else {
            if fresh {
                break;
            }
            hinv = DMatrix::identity(q, q);
            fresh = true;
            continue;
        };
        let gn = -gradient_at(spec, &ThetaVector(xn.clone()), est, &e.sigma_inv)? / scale;
        let s = DVector::from_iterator(q, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = &gn - &g;
        let small_step = s
            .iter()
            .zip(&xn)
            .all(|(sk, xk)| sk.abs() <= opts.xtol * xk.abs().max(1.0));
        x = xn;
        f = fn_;
        g = gn;
        if small_step {
            let pg_h = project_gradient(spec, &x, &g).amax() * scale;
            if fresh || pg_h <= reporting_tolerance(-f * scale) {
                break;
            }
            hinv = DMatrix::identity(q, q);
            fresh = true;
            continue;
        }

        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                hinv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (H y s^T + s y^T H) + (rho^2 y^T H y + rho) s s^T
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        } else {
            hinv = DMatrix::identity(q, q);
            fresh = true;
        }
    }

    let theta_hat = ThetaVector(x);
    let h_value = -f * scale;
    let gradient_norm = project_gradient(spec, theta_hat.as_slice(), &g).amax() * scale;
    if !converged {
        // Stalled by step size: accept when the reporting tolerance holds.
        converged = gradient_norm <= reporting_tolerance(h_value);
    }
    if !converged {
        warnings.push(format!(
            "optimizer stopped after {iterations} iterations with gradient norm {gradient_norm:.3e}"
        ));
    }
    let (acov, se) = match asymptotic_covariance(spec, &theta_hat) {
        Ok(acov) => {
            let se = (0..q).map(|j| (acov[(j, j)].max(0.0) / est.n as f64).sqrt()).collect();
            (
                Some(acov.row_iter().map(|r| r.iter().copied().collect()).collect()),
                Some(se),
            )
        }
        Err(err) => {
            warnings.push(format!("asymptotic covariance unavailable: {err}"));
            (None, None)
        }
    };
    Ok(QmleResult {
        theta_hat: theta_hat.0,
        h_value,
        gradient_norm,
        iterations,
        converged,
        acov,
        se,
        warnings,
    })
}

/// `(D^T W^-1 D)^-1` with `D` the jacobian and `W` the sandwich of `S(theta)`.
pub fn asymptotic_covariance(spec: &ModelSpec, theta: &ThetaVector) -> Result<DMatrix<f64>> {
    let q = spec.q();
    let rank = spec.rank_check(theta);
    if let Some(err) = rank.error {
        return Err(Error::Domain(err));
    }
    if !rank.jacobian_full_rank {
        return Err(Error::RankDeficient {
            rank: rank.jacobian_rank,
            q,
        });
    }
    let sigma = spec.implied_covariance(theta)?;
    let (_, sigma_inv) = chol_logdet_inv(&sigma)?;
    let w_inv = sandwich_cov_inverse(&sigma_inv);
    let jac = spec.jacobian(theta)?;
    let info = SymMatrix::symmetrize(&(jac.transpose() * w_inv.as_matrix() * &jac));
    let (_, acov) = chol_logdet_inv(&info).map_err(|_| Error::RankDeficient {
        rank: rank.jacobian_rank,
        q,
    })?;
    Ok(acov.into_matrix())
}

pub fn theta_se(spec: &ModelSpec, theta_hat: &ThetaVector, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let acov = asymptotic_covariance(spec, theta_hat)?;
    Ok((0..spec.q())
        .map(|j| (acov[(j, j)].max(0.0) / n as f64).sqrt())
        .collect())
}
