//! Replication engine: simulate, estimate, fit and test `R` independent
//! panels, then aggregate.
//!
//! Replication `r` draws its randomness from substreams keyed by
//! `(master_seed, r)`, so the per-rep table does not depend on how the work
//! is scheduled.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Serialize;

use crate::config::{McSection, RunConfigFile, SamplingConfig, SystemFile};
use crate::error::{Error, Result};
use crate::gof::{chi2_cdf, decide, normal_cdf};
use crate::linalg::vech;
use crate::model::{ModelFile, ModelSpec, ThetaVector};
use crate::qmle::{fit, FitOptions};
use crate::sim::{assemble_replication, LatentSystemSpec};
use crate::threshold::{estimate, ThresholdConfig};

#[derive(Clone, Debug)]
pub struct McConfig {
    pub system: LatentSystemSpec,
    pub model: ModelSpec,
    pub threshold: ThresholdConfig,
    pub n: usize,
    pub h: f64,
    pub reps: usize,
    pub alpha: f64,
    pub master_seed: u64,
    /// Thread count for the parallel executor; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Start for every fit; `None` uses [`ModelSpec::default_start`].
    pub theta_init: Option<ThetaVector>,
    pub fit: FitOptions,
}

impl McConfig {
    /// Requires the `system`, `model`, `sampling` and `mc` sections.
    pub fn from_file(file: &RunConfigFile) -> Result<Self> {
        let SamplingConfig { n, h } = file.sampling()?;
        let mc = file.mc()?;
        let cfg = McConfig {
            system: file.system()?,
            model: file.model()?,
            threshold: file.threshold(),
            n,
            h,
            reps: mc.reps,
            alpha: mc.alpha,
            master_seed: mc.master_seed,
            workers: mc.workers,
            theta_init: file.theta_init(),
            fit: file.fit_options(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(Error::InvalidConfig("R must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.n < 1 || !(self.h > 0.0) || !(self.n as f64 * self.h).is_finite() {
            return Err(Error::InvalidConfig("need n >= 1, h > 0 and finite n*h".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidConfig("workers must be >= 1".into()));
        }
        self.threshold.validate()?;
        self.system.validate()?;
        let d = self.model.dims();
        if self.system.p1() != d.p1 || self.system.p2() != d.p2 {
            return Err(Error::InvalidConfig(format!(
                "system has (p1, p2) = ({}, {}) but model has ({}, {})",
                self.system.p1(),
                self.system.p2(),
                d.p1,
                d.p2
            )));
        }
        if let Some(t) = &self.theta_init {
            if t.len() != self.model.q() {
                return Err(Error::mismatch("theta_init length", self.model.q(), t.len()));
            }
        }
        if self.model.q() >= self.model.pbar() {
            return Err(Error::DfNonPositive {
                pbar: self.model.pbar(),
                q: self.model.q(),
            });
        }
        Ok(())
    }

    pub fn df(&self) -> u32 {
        (self.model.pbar() - self.model.q()) as u32
    }

    /// The configuration as a [`RunConfigFile`] document.
    pub fn echo(&self) -> serde_json::Value {
        let file = RunConfigFile {
            system: SystemFile::from_spec(&self.system),
            model: Some(ModelFile::from_spec(&self.model)),
            threshold: Some(self.threshold),
            sampling: Some(SamplingConfig { n: self.n, h: self.h }),
            mc: Some(McSection {
                reps: self.reps,
                alpha: self.alpha,
                master_seed: self.master_seed,
                workers: self.workers,
            }),
            theta_init: self.theta_init.as_ref().map(|t| t.0.clone()),
            fit: Some(self.fit.clone()),
        };
        serde_json::to_value(file).expect("config serializes")
    }
}

/// The columns of the per-rep CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct PerRepRow {
    pub rep: usize,
    /// Retained increments `N_n`.
    pub n_retained: usize,
    /// vech of the threshold estimate.
    pub sigma: Vec<f64>,
    pub theta: Vec<f64>,
    pub converged: bool,
    pub t_n: f64,
    pub reject: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McRep {
    pub row: PerRepRow,
    /// The test used the identity in place of a singular estimate.
    pub fallback: bool,
    pub true_jumps: u64,
    /// Increments containing at least one jump.
    pub jump_steps: usize,
    /// Jump steps whose displacement exceeds the threshold.
    pub detectable: usize,
    pub error: Option<String>,
}

impl McRep {
    pub fn excluded(&self, n: usize) -> usize {
        n - self.row.n_retained
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregates {
    pub sigma_mean: Vec<f64>,
    pub sigma_sd: Vec<f64>,
    pub theta_mean: Vec<f64>,
    pub theta_sd: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KsSummary {
    pub sigma11: f64,
    #[serde(rename = "T")]
    pub t: f64,
}

#[derive(Clone, Debug)]
pub struct McSummary {
    pub reps: Vec<McRep>,
    pub agg: Aggregates,
    pub reject_count: usize,
    pub ks: KsSummary,
    pub df: u32,
    pub alpha: f64,
    pub n: usize,
    pub config_echo: serde_json::Value,
}

impl McSummary {
    pub fn rows(&self) -> Vec<PerRepRow> {
        self.reps.iter().map(|r| r.row.clone()).collect()
    }

    pub fn r(&self) -> usize {
        self.reps.len()
    }

    pub fn fallback_count(&self) -> usize {
        self.reps.iter().filter(|r| r.fallback).count()
    }

    pub fn nonconverged_count(&self) -> usize {
        self.reps.iter().filter(|r| !r.row.converged).count()
    }

    pub fn failed_count(&self) -> usize {
        self.reps.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn reject_rate(&self) -> f64 {
        self.reject_count as f64 / self.r() as f64
    }
}

fn run_rep(cfg: &McConfig, rep: usize) -> McRep {
    let pbar = cfg.model.pbar();
    let q = cfg.model.q();
    let mut out = McRep {
        row: PerRepRow {
            rep,
            n_retained: 0,
            sigma: vec![f64::NAN; pbar],
            theta: vec![f64::NAN; q],
            converged: false,
            t_n: f64::NAN,
            reject: false,
        },
        fallback: false,
        true_jumps: 0,
        jump_steps: 0,
        detectable: 0,
        error: None,
    };
    if let Err(e) = fill_rep(cfg, rep, &mut out) {
        out.error = Some(e.to_string());
    }
    out
}

fn fill_rep(cfg: &McConfig, rep: usize, out: &mut McRep) -> Result<()> {
    let obs = assemble_replication(&cfg.system, cfg.n, cfg.h, cfg.master_seed, rep as u64)?;
    let est = estimate(&obs, &cfg.threshold)?;
    if let Some(log) = obs.jump_log() {
        out.true_jumps = log.total_jumps;
        out.jump_steps = log.jump_steps.len();
        out.detectable = log.detectable(est.tau);
    }
    out.row.n_retained = est.n_retained;
    out.row.sigma = vech(&est.sigma_hat).as_slice().to_vec();
    out.fallback = !est.pd_flag;

    let start = match &cfg.theta_init {
        Some(t) => t.clone(),
        None => cfg.model.default_start(&est.sigma_hat),
    };
    let res = fit(&cfg.model, &start, &est, &cfg.fit)?;
    out.row.theta = res.theta_hat.clone();
    out.row.converged = res.converged;
    let test = decide(&cfg.model, &res.theta(), &est, cfg.alpha)?;
    out.row.t_n = test.t_n;
    out.row.reject = test.reject;
    Ok(())
}

/// How replications are scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        return Execution::Parallel;
        #[cfg(not(feature = "parallel"))]
        Execution::Sequential
    }
}

pub fn run(cfg: &McConfig) -> Result<McSummary> {
    run_with(cfg, Execution::default())
}

pub fn run_with(cfg: &McConfig, exec: Execution) -> Result<McSummary> {
    cfg.validate()?;
    let reps = match exec {
        Execution::Sequential => (0..cfg.reps).map(|r| run_rep(cfg, r)).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => run_parallel(cfg)?,
    };
    summarize(cfg, reps)
}

#[cfg(feature = "parallel")]
fn run_parallel(cfg: &McConfig) -> Result<Vec<McRep>> {
    use rayon::prelude::*;
    let job = || (0..cfg.reps).into_par_iter().map(|r| run_rep(cfg, r)).collect();
    match cfg.workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("cannot start {w} workers: {e}")))?;
            Ok(pool.install(job))
        }
        None => Ok(job()),
    }
}

fn summarize(cfg: &McConfig, reps: Vec<McRep>) -> Result<McSummary> {
    let rows: Vec<PerRepRow> = reps.iter().map(|r| r.row.clone()).collect();
    let agg = aggregate(&rows, cfg.model.pbar(), cfg.model.q());
    let df = cfg.df();
    let ks = ks_summary(&rows, df)?;
    Ok(McSummary {
        reject_count: rows.iter().filter(|r| r.reject).count(),
        reps,
        agg,
        ks,
        df,
        alpha: cfg.alpha,
        n: cfg.n,
        config_echo: cfg.echo(),
    })
}

/// Mean and SD (denominator `m - 1`, or 0 when `m = 1`) over the finite values.
fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let finite = values.filter(|v| v.is_finite());
    let m = finite.clone().count();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = finite.clone().sum::<f64>() / m as f64;
    if m == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = finite.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (m - 1) as f64).sqrt())
}

/// Column-wise means and SDs. Non-finite entries (failed replications) are
/// skipped.
pub fn aggregate(rows: &[PerRepRow], pbar: usize, q: usize) -> Aggregates {
    let cols = |width: usize, pick: fn(&PerRepRow) -> &[f64]| -> (Vec<f64>, Vec<f64>) {
        (0..width)
            .map(|k| mean_sd(rows.iter().map(move |r| pick(r)[k])))
            .unzip()
    };
    let (sigma_mean, sigma_sd) = cols(pbar, |r| &r.sigma);
    let (theta_mean, theta_sd) = cols(q, |r| &r.theta);
    Aggregates {
        sigma_mean,
        sigma_sd,
        theta_mean,
        theta_sd,
    }
}

fn ks_summary(rows: &[PerRepRow], df: u32) -> Result<KsSummary> {
    let s11: Vec<f64> = rows.iter().map(|r| r.sigma[0]).filter(|v| v.is_finite()).collect();
    let t: Vec<f64> = rows.iter().map(|r| r.t_n).filter(|v| v.is_finite()).collect();
    let sigma11 = if s11.is_empty() {
        f64::NAN
    } else {
        ks_distance(&studentize(&s11), Reference::StandardNormal)?
    };
    let t = if t.is_empty() {
        f64::NAN
    } else {
        ks_distance(&t, Reference::ChiSquared(df))?
    };
    Ok(KsSummary { sigma11, t })
}

/// `(x - mean) / sd` with the sample SD; all zeros when the SD vanishes.
pub fn studentize(sample: &[f64]) -> Vec<f64> {
    let (mean, sd) = mean_sd(sample.iter().copied());
    sample
        .iter()
        .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reference {
    StandardNormal,
    ChiSquared(u32),
}

impl Reference {
    fn cdf(&self, x: f64) -> Result<f64> {
        match *self {
            Reference::StandardNormal => Ok(normal_cdf(x)),
            Reference::ChiSquared(df) => chi2_cdf(x, df),
        }
    }
}

/// Kolmogorov distance between the empirical CDF of `sample` and `reference`.
pub fn ks_distance(sample: &[f64], reference: Reference) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    if sample.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("KS sample contains NaN".into()));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = reference.cdf(x)?;
        d = d.max((i + 1) as f64 / m - f).max(f - i as f64 / m);
    }
    Ok(d)
}

// ---------------------------------------------------------------------------
// Files

pub fn csv_header(pbar: usize, q: usize) -> String {
    let mut h = String::from("rep,N_n");
    for k in 1..=pbar {
        write!(h, ",sigma_{k}").unwrap();
    }
    for k in 1..=q {
        write!(h, ",theta_{k}").unwrap();
    }
    h.push_str(",converged,T_n,reject");
    h
}

pub fn write_per_rep_csv_to(rows: &[PerRepRow], pbar: usize, q: usize, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{}", csv_header(pbar, q))?;
    let mut line = String::new();
    for r in rows {
        line.clear();
        write!(line, "{},{}", r.rep, r.n_retained).unwrap();
        for v in r.sigma.iter().chain(&r.theta) {
            write!(line, ",{v}").unwrap();
        }
        write!(line, ",{},{},{}", r.converged as u8, r.t_n, r.reject as u8).unwrap();
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_per_rep_csv(summary: &McSummary, path: &Path) -> Result<()> {
    let (pbar, q) = widths(summary);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_per_rep_csv_to(&summary.rows(), pbar, q, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn widths(summary: &McSummary) -> (usize, usize) {
    (summary.agg.sigma_mean.len(), summary.agg.theta_mean.len())
}

/// Parses a per-rep CSV. Returns the rows with `(pbar, q)` read off the header.
pub fn read_per_rep_csv_from(reader: impl BufRead) -> Result<(Vec<PerRepRow>, usize, usize)> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let names: Vec<&str> = header.trim_end().split(',').collect();
    let pbar = names.iter().filter(|c| c.starts_with("sigma_")).count();
    let q = names.iter().filter(|c| c.starts_with("theta_")).count();
    if header.trim_end() != csv_header(pbar, q) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header `{}`", header.trim_end()),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let err = |message: String| Error::Parse { line: lineno, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != names.len() {
            return Err(err(format!("expected {} fields, found {}", names.len(), fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("`{s}`: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("`{s}`: {e}")));
        let flag = |s: &str| match s {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(err(format!("`{other}` is not a flag"))),
        };
        let floats = |range: std::ops::Range<usize>| fields[range].iter().map(|s| num(s)).collect::<Result<Vec<_>>>();
        rows.push(PerRepRow {
            rep: int(fields[0])?,
            n_retained: int(fields[1])?,
            sigma: floats(2..2 + pbar)?,
            theta: floats(2 + pbar..2 + pbar + q)?,
            converged: flag(fields[2 + pbar + q])?,
            t_n: num(fields[3 + pbar + q])?,
            reject: flag(fields[4 + pbar + q])?,
        });
    }
    Ok((rows, pbar, q))
}

pub fn read_per_rep_csv(path: &Path) -> Result<(Vec<PerRepRow>, usize, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_per_rep_csv_from(BufReader::new(file))
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    config_echo: &'a serde_json::Value,
    agg: &'a Aggregates,
    reject_count: usize,
    #[serde(rename = "R")]
    r: usize,
    ks: &'a KsSummary,
    df: u32,
    alpha: f64,
    n: usize,
    fallback_count: usize,
    nonconverged_count: usize,
    failed_count: usize,
}

pub fn summary_json(summary: &McSummary) -> serde_json::Value {
    serde_json::to_value(SummaryDoc {
        config_echo: &summary.config_echo,
        agg: &summary.agg,
        reject_count: summary.reject_count,
        r: summary.r(),
        ks: &summary.ks,
        df: summary.df,
        alpha: summary.alpha,
        n: summary.n,
        fallback_count: summary.fallback_count(),
        nonconverged_count: summary.nonconverged_count(),
        failed_count: summary.failed_count(),
    })
    .expect("summary serializes")
}

/// Writes `per_rep.csv` and `summary.json` into `out_dir`, creating it if
/// needed.
pub fn write_summary(summary: &McSummary, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_per_rep_csv(summary, &out_dir.join("per_rep.csv"))?;
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary_json(summary)).expect("summary serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
