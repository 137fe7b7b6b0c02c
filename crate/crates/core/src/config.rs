//! JSON run configuration shared by every front-end command.
//!
//! ```json
//! {
//!   "system":    { "lambda1": [[1.0], ...], "lambda2": ..., "gamma": ..., "b0": ...,
//!                  "xi": { "drift_rate": {"diag": [2.0]}, "drift_level": [1.0],
//!                          "diffusion": {"diag": [1.2]},
//!                          "jumps": [{"intensity": 3.0, "variance": 5.0}], "x0": [1.0] },
//!                  "delta": ..., "eps": ..., "zeta": ... },
//!   "model":     { see `ModelFile` },
//!   "threshold": { "D": 10, "rho": 0.4 },
//!   "sampling":  { "n": 10000, "h": 1e-4 },
//!   "mc":        { "R": 500, "alpha": 0.05, "master_seed": 1, "workers": 4 },
//!   "theta_init": [ ... ],
//!   "fit":       { "max_iter": 2000, "gtol": 1e-10, "xtol": 1e-10 }
//! }
//! ```
//!
//! Every section is optional; commands ask for the ones they need.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelFile, ModelSpec, ThetaVector};
use crate::qmle::FitOptions;
use crate::sim::{JumpSize, LatentSystemSpec, OUJumpSpec};
use crate::threshold::ThresholdConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixRepr {
    Full(Vec<Vec<f64>>),
    Diag { diag: Vec<f64> },
}

impl MatrixRepr {
    fn to_matrix(&self, ctx: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixRepr::Diag { diag } => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(diag))),
            MatrixRepr::Full(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                if let Some(bad) = rows.iter().position(|row| row.len() != c) {
                    return Err(Error::InvalidConfig(format!(
                        "{ctx}: row {bad} has {} entries, expected {c}",
                        rows[bad].len()
                    )));
                }
                Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
            }
        }
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let diagonal = r == c && (0..r).all(|i| (0..c).all(|j| i == j || m[(i, j)] == 0.0));
        if diagonal && r > 0 {
            MatrixRepr::Diag {
                diag: m.diagonal().iter().copied().collect(),
            }
        } else {
            MatrixRepr::Full((0..r).map(|i| (0..c).map(|j| m[(i, j)]).collect()).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpRepr {
    pub intensity: f64,
    #[serde(default)]
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessFile {
    pub drift_rate: MatrixRepr,
    pub drift_level: Vec<f64>,
    pub diffusion: MatrixRepr,
    pub jumps: Vec<JumpRepr>,
    pub x0: Vec<f64>,
}

impl ProcessFile {
    fn to_spec(&self, ctx: &str) -> Result<OUJumpSpec> {
        let spec = OUJumpSpec {
            drift_rate: self.drift_rate.to_matrix(ctx)?,
            drift_level: DVector::from_column_slice(&self.drift_level),
            diffusion: self.diffusion.to_matrix(ctx)?,
            jumps: self
                .jumps
                .iter()
                .map(|j| JumpSize::Gaussian {
                    intensity: j.intensity,
                    mean: j.mean,
                    variance: j.variance,
                })
                .collect(),
            x0: DVector::from_column_slice(&self.x0),
        };
        spec.validate(ctx).map_err(as_config_error)?;
        Ok(spec)
    }

    /// `None` when a channel uses a custom sampler, which has no file form.
    fn from_spec(spec: &OUJumpSpec) -> Option<Self> {
        let jumps = spec
            .jumps
            .iter()
            .map(|j| match j {
                JumpSize::Gaussian {
                    intensity,
                    mean,
                    variance,
                } => Some(JumpRepr {
                    intensity: *intensity,
                    mean: *mean,
                    variance: *variance,
                }),
                JumpSize::Custom { .. } => None,
            })
            .collect::<Option<Vec<_>>>()?;
        Some(ProcessFile {
            drift_rate: MatrixRepr::from_matrix(&spec.drift_rate),
            drift_level: spec.drift_level.iter().copied().collect(),
            diffusion: MatrixRepr::from_matrix(&spec.diffusion),
            jumps,
            x0: spec.x0.iter().copied().collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub lambda1: MatrixRepr,
    pub lambda2: MatrixRepr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b0: Option<MatrixRepr>,
    pub gamma: MatrixRepr,
    pub xi: ProcessFile,
    pub delta: ProcessFile,
    pub eps: ProcessFile,
    pub zeta: ProcessFile,
}

fn as_config_error(e: Error) -> Error {
    match e {
        Error::InvalidSpec(m) => Error::InvalidConfig(m),
        other => other,
    }
}

impl SystemFile {
    pub fn to_spec(&self) -> Result<LatentSystemSpec> {
        let lambda2 = self.lambda2.to_matrix("system.lambda2")?;
        let k2 = lambda2.ncols();
        let sys = LatentSystemSpec {
            lambda1: self.lambda1.to_matrix("system.lambda1")?,
            lambda2,
            b0: match &self.b0 {
                Some(m) => m.to_matrix("system.b0")?,
                None => DMatrix::zeros(k2, k2),
            },
            gamma: self.gamma.to_matrix("system.gamma")?,
            xi: self.xi.to_spec("system.xi")?,
            delta: self.delta.to_spec("system.delta")?,
            eps: self.eps.to_spec("system.eps")?,
            zeta: self.zeta.to_spec("system.zeta")?,
        };
        sys.validate().map_err(as_config_error)?;
        Ok(sys)
    }

    pub fn from_spec(sys: &LatentSystemSpec) -> Option<Self> {
        Some(SystemFile {
            lambda1: MatrixRepr::Full(rows_of(&sys.lambda1)),
            lambda2: MatrixRepr::Full(rows_of(&sys.lambda2)),
            b0: Some(MatrixRepr::Full(rows_of(&sys.b0))),
            gamma: MatrixRepr::Full(rows_of(&sys.gamma)),
            xi: ProcessFile::from_spec(&sys.xi)?,
            delta: ProcessFile::from_spec(&sys.delta)?,
            eps: ProcessFile::from_spec(&sys.eps)?,
            zeta: ProcessFile::from_spec(&sys.zeta)?,
        })
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub n: usize,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(rename = "R")]
    pub reps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<ThresholdConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_init: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitOptions>,
}

fn missing(section: &str) -> Error {
    Error::InvalidConfig(format!("config has no `{section}` section"))
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks every present section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        let sys = self.system.as_ref().map(SystemFile::to_spec).transpose()?;
        let model = self
            .model
            .as_ref()
            .map(|m| m.to_spec().map_err(as_config_error))
            .transpose()?;
        if let Some(t) = &self.threshold {
            t.validate()?;
        }
        if let Some(s) = &self.sampling {
            if s.n < 1 || !(s.h.is_finite() && s.h > 0.0) || !(s.n as f64 * s.h).is_finite() {
                return Err(Error::InvalidConfig("sampling needs n >= 1 and finite h > 0".into()));
            }
        }
        if let Some(mc) = &self.mc {
            if mc.reps < 1 {
                return Err(Error::InvalidConfig("mc.R must be >= 1".into()));
            }
            if !(mc.alpha > 0.0 && mc.alpha < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "mc.alpha must lie in (0, 1), got {}",
                    mc.alpha
                )));
            }
            if mc.workers == Some(0) {
                return Err(Error::InvalidConfig("mc.workers must be >= 1".into()));
            }
        }
        if let (Some(sys), Some(model)) = (&sys, &model) {
            let d = model.dims();
            if sys.p1() != d.p1 || sys.p2() != d.p2 {
                return Err(Error::InvalidConfig(format!(
                    "system has (p1, p2) = ({}, {}) but model has ({}, {})",
                    sys.p1(),
                    sys.p2(),
                    d.p1,
                    d.p2
                )));
            }
        }
        if let (Some(theta), Some(model)) = (&self.theta_init, &model) {
            if theta.len() != model.q() {
                return Err(Error::InvalidConfig(format!(
                    "theta_init has {} entries but the model has q = {}",
                    theta.len(),
                    model.q()
                )));
            }
        }
        Ok(())
    }

    pub fn system(&self) -> Result<LatentSystemSpec> {
        self.system.as_ref().ok_or_else(|| missing("system"))?.to_spec()
    }

    pub fn model(&self) -> Result<ModelSpec> {
        self.model
            .as_ref()
            .ok_or_else(|| missing("model"))?
            .to_spec()
            .map_err(as_config_error)
    }

    pub fn threshold(&self) -> ThresholdConfig {
        self.threshold.unwrap_or_default()
    }

    pub fn sampling(&self) -> Result<SamplingConfig> {
        self.sampling.ok_or_else(|| missing("sampling"))
    }

    pub fn mc(&self) -> Result<McSection> {
        self.mc.clone().ok_or_else(|| missing("mc"))
    }

    pub fn theta_init(&self) -> Option<ThetaVector> {
        self.theta_init.clone().map(ThetaVector)
    }

    pub fn fit_options(&self) -> FitOptions {
        self.fit.clone().unwrap_or_default()
    }
}
