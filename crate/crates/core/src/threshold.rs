//! Jump-filtered realized covariance.
//!
//! An increment is retained when its Euclidean norm is at most
//! `tau = D * h^rho`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_positive_definite, sandwich_cov, HalfVec, SymMatrix};
use crate::sim::ObservationSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    #[serde(rename = "D")]
    pub d: f64,
    pub rho: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig { d: 10.0, rho: 0.4 }
    }
}

impl ThresholdConfig {
    pub fn new(d: f64, rho: f64) -> Result<Self> {
        let cfg = ThresholdConfig { d, rho };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d.is_finite() && self.d > 0.0) {
            return Err(Error::InvalidConfig(format!("threshold D must be > 0, got {}", self.d)));
        }
        if !(self.rho >= 1.0 / 3.0 && self.rho < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "threshold rho must lie in [1/3, 1/2), got {}",
                self.rho
            )));
        }
        Ok(())
    }

    pub fn tau(&self, h: f64) -> f64 {
        self.d * h.powf(self.rho)
    }
}

#[derive(Clone, Debug)]
pub struct CovEstimate {
    pub sigma_hat: SymMatrix,
    pub n: usize,
    /// Number of retained increments.
    pub n_retained: usize,
    /// `n_retained`, or `n` when nothing was retained.
    pub n_tilde: usize,
    /// Per-entry standard errors in vech order.
    pub se: HalfVec,
    pub pd_flag: bool,
    pub tau: f64,
}

pub fn retained_mask(obs: &ObservationSet, cfg: &ThresholdConfig) -> Result<Vec<bool>> {
    cfg.validate()?;
    let tau = cfg.tau(obs.h());
    let tau2 = tau * tau;
    let mut dx = vec![0.0; obs.p()];
    Ok((0..obs.n())
        .map(|i| {
            obs.increment_into(i, &mut dx);
            dx.iter().map(|v| v * v).sum::<f64>() <= tau2
        })
        .collect())
}

pub fn estimate(obs: &ObservationSet, cfg: &ThresholdConfig) -> Result<CovEstimate> {
    let mask = retained_mask(obs, cfg)?;
    let p = obs.p();
    let n = obs.n();
    let mut acc = DMatrix::<f64>::zeros(p, p);
    let mut dx = vec![0.0; p];
    let mut retained = 0usize;
    for (i, keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        retained += 1;
        obs.increment_into(i, &mut dx);
        // Lower triangle only; mirrored below.
        for c in 0..p {
            let xc = dx[c];
            for r in c..p {
                acc[(r, c)] += dx[r] * xc;
            }
        }
    }
    let n_tilde = if retained > 0 { retained } else { n };
    acc /= n_tilde as f64 * obs.h();
    let sigma_hat = SymMatrix::from_lower(&acc);
    let w = sandwich_cov(&sigma_hat);
    let se = HalfVec::new(
        p,
        DVector::from_iterator(
            w.nrows(),
            (0..w.nrows()).map(|k| (w[(k, k)].max(0.0) / n as f64).sqrt()),
        ),
    )?;
    Ok(CovEstimate {
        pd_flag: is_positive_definite(&sigma_hat),
        sigma_hat,
        n,
        n_retained: retained,
        n_tilde,
        se,
        tau: cfg.tau(obs.h()),
    })
}
