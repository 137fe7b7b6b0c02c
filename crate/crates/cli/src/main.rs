//! `jumpsem` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 I/O error,
//! 4 numerical failure (including a fit that did not converge).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jumpsem::config::RunConfigFile;
use jumpsem::linalg::vech;
use jumpsem::model::{ModelSpec, ThetaVector};
use jumpsem::montecarlo::{self, McConfig, McSummary};
use jumpsem::qmle::{self, QmleResult};
use jumpsem::sim::{self, ObservationSet};
use jumpsem::threshold::{self, CovEstimate};
use jumpsem::{gof, Error};
use serde_json::{json, Value};

mod report;

#[derive(Parser)]
#[command(
    name = "jumpsem",
    version,
    about = "SEM estimation and testing for jump-diffusion panels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one panel from the `system` section and write it as CSV.
    Simulate(SimulateArgs),
    /// Threshold covariance estimate and QMLE fit on a data file.
    Estimate(FitArgs),
    /// Fit, then test the model against the saturated one.
    Test(TestArgs),
    /// Run the replication study described by the config.
    Montecarlo(McArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Print a JSON document on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `sampling.n`.
    #[arg(long)]
    n: Option<usize>,
    /// Overrides `sampling.h`.
    #[arg(long)]
    h: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated starting values; overrides `theta_init`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta_init: Option<Vec<f64>>,
    /// Report a non-converged fit instead of exiting with status 4.
    #[arg(long)]
    allow_nonconverged: bool,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Test level; defaults to `mc.alpha`, then 0.05.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `mc.workers`.
    #[arg(long, env = "JUMPSEM_WORKERS")]
    workers: Option<usize>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Io(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. } => Failure::Io(msg),
            Error::InvalidSpec(_)
            | Error::InvalidConfig(_)
            | Error::DimensionMismatch { .. }
            | Error::Parse { .. }
            | Error::DfNonPositive { .. } => Failure::Config(msg),
            Error::NotPositiveDefinite { .. }
            | Error::SingularPsi
            | Error::RankDeficient { .. }
            | Error::NoFeasibleStart
            | Error::Domain(_)
            | Error::EmptySample => Failure::Numerical(msg),
        }
    }
}

type CmdResult = Result<Option<Value>, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (json_out, result) = match cli.command {
        Command::Simulate(a) => (a.common.json, cmd_simulate(&a)),
        Command::Estimate(a) => (a.common.json, cmd_estimate(&a)),
        Command::Test(a) => (a.fit.common.json, cmd_test(&a)),
        Command::Montecarlo(a) => (a.common.json, cmd_montecarlo(&a)),
    };
    match result {
        Ok(doc) => {
            if let (true, Some(doc)) = (json_out, doc) {
                println!("{}", serde_json::to_string_pretty(&doc).expect("json output"));
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfigFile, Failure> {
    Ok(RunConfigFile::load(path)?)
}

fn cmd_simulate(a: &SimulateArgs) -> CmdResult {
    let cfg = load_config(&a.common.config)?;
    let sys = cfg.system()?;
    let (n, h) = match (a.n, a.h, cfg.sampling) {
        (Some(n), Some(h), _) => (n, h),
        (n, h, Some(s)) => (n.unwrap_or(s.n), h.unwrap_or(s.h)),
        _ => return Err(Failure::Config("need a `sampling` section or both --n and --h".into())),
    };
    let obs = sim::assemble_observations(&sys, n, h, a.seed)?;
    sim::write_observations(&obs, &a.out)?;
    let log = obs.jump_log().cloned().unwrap_or_default();
    let mut counts = log.channel_counts.iter().copied();
    let per_block: serde_json::Map<String, Value> = [
        ("xi", &sys.xi),
        ("delta", &sys.delta),
        ("eps", &sys.eps),
        ("zeta", &sys.zeta),
    ]
    .into_iter()
    .map(|(name, spec)| {
        (
            name.to_string(),
            json!(counts.by_ref().take(spec.dim()).collect::<Vec<u64>>()),
        )
    })
    .collect();
    eprintln!("wrote {}", a.out.display());
    eprintln!("n = {n}, h = {h}, T = {}, p = {}", obs.horizon(), obs.p());
    for (name, c) in &per_block {
        eprintln!("jumps in {name}: {c}");
    }
    eprintln!(
        "total jumps {}, increments with a jump {}",
        log.total_jumps,
        log.jump_steps.len()
    );
    Ok(Some(json!({
        "out": a.out,
        "n": n,
        "h": h,
        "p": obs.p(),
        "seed": a.seed,
        "channel_jumps": per_block,
        "total_jumps": log.total_jumps,
        "jump_steps": log.jump_steps.len(),
    })))
}

struct Fitted {
    spec: ModelSpec,
    obs: ObservationSet,
    est: CovEstimate,
    res: QmleResult,
}

fn fit_from_args(a: &FitArgs, cfg: &RunConfigFile) -> Result<Fitted, Failure> {
    let spec = cfg.model()?;
    let obs = sim::read_observations(&a.data)?;
    let d = spec.dims();
    if (obs.p1(), obs.p2()) != (d.p1, d.p2) {
        return Err(Failure::Config(format!(
            "data has (p1, p2) = ({}, {}) but the model expects ({}, {})",
            obs.p1(),
            obs.p2(),
            d.p1,
            d.p2
        )));
    }
    let est = threshold::estimate(&obs, &cfg.threshold())?;
    if est.n_retained == 0 {
        eprintln!("warning: no increment passed the threshold; using all n increments for scaling");
    }
    let start = match (&a.theta_init, cfg.theta_init()) {
        (Some(t), _) => ThetaVector(t.clone()),
        (None, Some(t)) => t,
        (None, None) => spec.default_start(&est.sigma_hat),
    };
    if start.len() != spec.q() {
        return Err(Failure::Config(format!(
            "theta_init has {} entries but the model has q = {}",
            start.len(),
            spec.q()
        )));
    }
    let res = qmle::fit(&spec, &start, &est, &cfg.fit_options())?;
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    if !res.converged && !a.allow_nonconverged {
        return Err(Failure::Numerical(format!(
            "fit did not converge (gradient norm {:.3e} after {} iterations); pass --allow-nonconverged to report it anyway",
            res.gradient_norm, res.iterations
        )));
    }
    Ok(Fitted { spec, obs, est, res })
}

fn fit_json(f: &Fitted) -> Value {
    json!({
        "n": f.obs.n(),
        "h": f.obs.h(),
        "N_n": f.est.n_retained,
        "tau": f.est.tau,
        "pd_flag": f.est.pd_flag,
        "sigma_hat": vech(&f.est.sigma_hat).as_slice(),
        "sigma_se": f.est.se.as_slice(),
        "fit": f.res,
    })
}

fn cmd_estimate(a: &FitArgs) -> CmdResult {
    let cfg = load_config(&a.common.config)?;
    let f = fit_from_args(a, &cfg)?;
    report::estimate(&f.obs, &f.est, &f.res);
    Ok(Some(fit_json(&f)))
}

fn cmd_test(a: &TestArgs) -> CmdResult {
    let cfg = load_config(&a.fit.common.config)?;
    let alpha = a.alpha.or_else(|| cfg.mc.as_ref().map(|m| m.alpha)).unwrap_or(0.05);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Failure::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let f = fit_from_args(&a.fit, &cfg)?;
    let test = gof::decide(&f.spec, &f.res.theta(), &f.est, alpha)?;
    report::test(&f.est, &test);
    let mut doc = fit_json(&f);
    doc["test"] = serde_json::to_value(&test).expect("test result serializes");
    Ok(Some(doc))
}

fn cmd_montecarlo(a: &McArgs) -> CmdResult {
    let file = load_config(&a.common.config)?;
    let mut cfg = McConfig::from_file(&file)?;
    if a.workers.is_some() {
        cfg.workers = a.workers;
        cfg.validate()?;
    }
    eprintln!(
        "running R = {} replications, n = {}, h = {}, workers = {}",
        cfg.reps,
        cfg.n,
        cfg.h,
        cfg.workers.map_or("auto".to_string(), |w| w.to_string())
    );
    let summary: McSummary = montecarlo::run(&cfg)?;
    montecarlo::write_summary(&summary, &a.out)?;
    report::montecarlo(&summary, &cfg);
    eprintln!(
        "wrote {} and {}",
        a.out.join("per_rep.csv").display(),
        a.out.join("summary.json").display()
    );
    Ok(Some(montecarlo::summary_json(&summary)))
}
