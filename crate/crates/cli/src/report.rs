//! Human-readable tables, written to stderr.

use jumpsem::gof::TestResult;
use jumpsem::linalg::vech_position;
use jumpsem::montecarlo::{McConfig, McSummary};
use jumpsem::qmle::QmleResult;
use jumpsem::sim::ObservationSet;
use jumpsem::threshold::CovEstimate;

/// Four significant digits.
pub fn sig4(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{x:.3e}");
    }
    let decimals = (3 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn position_label(k: usize, p: usize) -> String {
    let (r, c) = vech_position(k, p);
    format!("({},{})", r + 1, c + 1)
}

pub fn estimate(obs: &ObservationSet, est: &CovEstimate, res: &QmleResult) {
    let p = obs.p();
    eprintln!(
        "n = {}, N_n = {} retained ({} excluded), tau = {}",
        obs.n(),
        est.n_retained,
        obs.n() - est.n_retained,
        sig4(est.tau)
    );
    if !est.pd_flag {
        eprintln!("warning: the covariance estimate is not positive definite");
    }
    eprintln!("{:>8} {:>12} {:>12}", "entry", "sigma_hat", "se");
    for (k, se) in est.se.as_slice().iter().enumerate() {
        let (r, c) = vech_position(k, p);
        eprintln!(
            "{:>8} {:>12} {:>12}",
            position_label(k, p),
            sig4(est.sigma_hat[(r, c)]),
            sig4(*se)
        );
    }
    eprintln!();
    eprintln!(
        "H = {}, |grad| = {}, iterations = {}, converged = {}",
        sig4(res.h_value),
        sig4(res.gradient_norm),
        res.iterations,
        res.converged
    );
    eprintln!("{:>8} {:>12} {:>12}", "param", "theta_hat", "se");
    for (j, v) in res.theta_hat.iter().enumerate() {
        let se = res.se.as_ref().map_or("-".to_string(), |s| sig4(s[j]));
        eprintln!("{:>8} {:>12} {:>12}", format!("theta{}", j + 1), sig4(*v), se);
    }
}

pub fn test(est: &CovEstimate, t: &TestResult) {
    if t.used_identity_fallback {
        eprintln!("warning: singular estimate, identity used in the statistic");
    }
    eprintln!("N_n = {}", est.n_retained);
    eprintln!("T_n = {}", sig4(t.t_n));
    eprintln!("df = {}", t.df);
    eprintln!("critical value (alpha = {}) = {}", t.alpha, sig4(t.critical));
    eprintln!("p-value = {}", sig4(t.p_value));
    eprintln!("decision: {}", if t.reject { "reject" } else { "do not reject" });
}

pub fn montecarlo(s: &McSummary, cfg: &McConfig) {
    let p = cfg.model.p();
    eprintln!("{:>8} {:>12} {:>12}", "entry", "mean", "sd");
    for k in 0..s.agg.sigma_mean.len() {
        eprintln!(
            "{:>8} {:>12} {:>12}",
            position_label(k, p),
            sig4(s.agg.sigma_mean[k]),
            sig4(s.agg.sigma_sd[k])
        );
    }
    eprintln!();
    eprintln!("{:>8} {:>12} {:>12}", "param", "mean", "sd");
    for j in 0..s.agg.theta_mean.len() {
        eprintln!(
            "{:>8} {:>12} {:>12}",
            format!("theta{}", j + 1),
            sig4(s.agg.theta_mean[j]),
            sig4(s.agg.theta_sd[j])
        );
    }
    eprintln!();
    eprintln!(
        "rejected {}/{} at alpha = {} (rate {}), df = {}",
        s.reject_count,
        s.r(),
        s.alpha,
        sig4(s.reject_rate()),
        s.df
    );
    eprintln!("KS sigma11 = {}, KS T_n = {}", sig4(s.ks.sigma11), sig4(s.ks.t));
    eprintln!(
        "identity fallback {}, not converged {}, failed {}",
        s.fallback_count(),
        s.nonconverged_count(),
        s.failed_count()
    );
}
