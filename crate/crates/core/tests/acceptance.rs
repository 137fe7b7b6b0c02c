//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Desk scale: n = 1e4, h = 1e-4 (T = 1), D = 10, rho = 0.4.

use std::time::Instant;

use jumpsem::gof::{chi2_cdf, chi2_quantile, chi2_sf, lr_statistic};
use jumpsem::linalg::vech;
use jumpsem::model::ThetaVector;
use jumpsem::montecarlo::{self, ks_distance, studentize, McConfig, McSummary, Reference};
use jumpsem::presets;
use jumpsem::qmle::{self, asymptotic_covariance, gradient, quasi_loglik, FitOptions};
use jumpsem::sim::assemble_observations;
use jumpsem::threshold::{estimate, ThresholdConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 10_000;
const H: f64 = 1e-4;
const R_CORRECT: usize = 500;
const R_MISSPEC: usize = 200;

/// Published true covariance, to three decimals.
#[rustfmt::skip]
const TABLE: [((usize, usize), f64); 78] = [
    ((1, 1), 4.000), ((1, 2), 1.008), ((1, 3), 1.872), ((1, 4), 1.296),
    ((1, 5), 1.008), ((1, 6), 0.806), ((1, 7), 1.411), ((1, 8), 1.210),
    ((1, 9), -1.152), ((1, 10), -0.691), ((1, 11), -1.498), ((1, 12), -1.037),
    ((2, 2), 1.196), ((2, 3), 1.310), ((2, 4), 0.907), ((2, 5), 0.706),
    ((2, 6), 0.564), ((2, 7), 0.988), ((2, 8), 0.847), ((2, 9), -0.806),
    ((2, 10), -0.484), ((2, 11), -1.048), ((2, 12), -0.726), ((3, 3), 3.874),
    ((3, 4), 1.685), ((3, 5), 1.310), ((3, 6), 1.048), ((3, 7), 1.835),
    ((3, 8), 1.572), ((3, 9), -1.498), ((3, 10), -0.899), ((3, 11), -1.947),
    ((3, 12), -1.348), ((4, 4), 1.976), ((4, 5), 0.907), ((4, 6), 0.726),
    ((4, 7), 1.270), ((4, 8), 1.089), ((4, 9), -1.037), ((4, 10), -0.622),
    ((4, 11), -1.348), ((4, 12), -0.933), ((5, 5), 2.326), ((5, 6), 1.212),
    ((5, 7), 2.122), ((5, 8), 1.819), ((5, 9), -0.806), ((5, 10), -0.484),
    ((5, 11), -1.048), ((5, 12), -0.726), ((6, 6), 2.410), ((6, 7), 1.697),
    ((6, 8), 1.455), ((6, 9), -0.645), ((6, 10), -0.387), ((6, 11), -0.839),
    ((6, 12), -0.581), ((7, 7), 3.611), ((7, 8), 2.546), ((7, 9), -1.129),
    ((7, 10), -0.677), ((7, 11), -1.468), ((7, 12), -1.016), ((8, 8), 3.392),
    ((8, 9), -0.968), ((8, 10), -0.581), ((8, 11), -1.258), ((8, 12), -0.871),
    ((9, 9), 4.382), ((9, 10), 1.279), ((9, 11), 2.771), ((9, 12), 1.918),
    ((10, 10), 2.457), ((10, 11), 1.663), ((10, 12), 1.151), ((11, 11), 4.092),
    ((11, 12), 2.494), ((12, 12), 3.687),
];

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, ok: bool, detail: String) {
        if !ok {
            self.failures += 1;
        }
        println!("{} {id}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

fn mc_config(model: jumpsem::model::ModelSpec, reps: usize, seed: u64, theta_init: Option<ThetaVector>) -> McConfig {
    McConfig {
        system: presets::true_system(),
        model,
        threshold: ThresholdConfig::default(),
        n: N,
        h: H,
        reps,
        alpha: 0.05,
        master_seed: seed,
        workers: None,
        theta_init,
        fit: FitOptions::default(),
    }
}

fn c1_implied(rep: &mut Report) {
    let s = presets::correct_model().implied_covariance(&presets::theta0()).unwrap();
    let worst = TABLE
        .iter()
        .map(|&((i, j), v)| (s[(i - 1, j - 1)] - v).abs())
        .fold(0.0, f64::max);
    rep.line(
        "1 implied covariance",
        worst <= 5e-4 + 1e-12,
        format!("max |Sigma(theta0) - table| = {worst:.2e} over 78 entries (tol 5e-4)"),
    );
}

fn c2_sigma(rep: &mut Report, s: &McSummary) {
    let x: Vec<f64> = s.reps.iter().map(|r| r.row.sigma[0]).collect();
    let (mean, sd) = mean_sd(&x);
    let sd0 = (32.0 / N as f64).sqrt();
    let band = 3.0 * sd0 / (R_CORRECT as f64).sqrt();
    rep.line(
        "2a mean Sigma11",
        (mean - 4.0).abs() <= band,
        format!("mean {mean:.5}, target 4.000 +- {band:.5}"),
    );
    rep.line(
        "2b sd Sigma11",
        (sd / sd0 - 1.0).abs() <= 0.30,
        format!("sd {sd:.5} vs theoretical {sd0:.5} (ratio {:.3}, tol 30%)", sd / sd0),
    );
    let ks = ks_distance(&studentize(&x), Reference::StandardNormal).unwrap();
    rep.line("2c KS Sigma11", ks < 0.08, format!("KS {ks:.4} (< 0.08)"));
}

fn c3_theta(rep: &mut Report, s: &McSummary) {
    let x: Vec<f64> = s.reps.iter().map(|r| r.row.theta[0]).collect();
    let (mean, sd) = mean_sd(&x);
    let band = 3.0 * sd / (R_CORRECT as f64).sqrt();
    rep.line(
        "3a mean theta1",
        (mean - 0.7).abs() <= band,
        format!("mean {mean:.5}, target 0.700 +- {band:.5}"),
    );
    let acov = asymptotic_covariance(&presets::correct_model(), &presets::theta0()).unwrap();
    let sd_desk = (acov[(0, 0)] / N as f64).sqrt();
    let sd_full = (acov[(0, 0)] / 1e5).sqrt();
    rep.line(
        "3b sd theta1",
        (sd / sd_desk - 1.0).abs() <= 0.30,
        format!(
            "sd {sd:.5} vs asymptotic {sd_desk:.5} (ratio {:.3}, tol 30%)",
            sd / sd_desk
        ),
    );
    rep.line(
        "3c asymptotic sd at n=1e5",
        (sd_full / 0.004 - 1.0).abs() <= 0.25,
        format!("{sd_full:.5} vs 0.004 (tol 25%)"),
    );
}

fn c4_size(rep: &mut Report, s: &McSummary) {
    let rate = s.reject_rate();
    rep.line(
        "4a test size",
        (0.03..=0.08).contains(&rate),
        format!(
            "rejected {}/{} = {rate:.3} at alpha 0.05 (in [0.03, 0.08])",
            s.reject_count,
            s.r()
        ),
    );
    let t: Vec<f64> = s.reps.iter().map(|r| r.row.t_n).collect();
    let ks = ks_distance(&t, Reference::ChiSquared(52)).unwrap();
    rep.line(
        "4b KS T_n vs chi2_52",
        s.df == 52 && ks < 0.08,
        format!("df {}, KS {ks:.4} (< 0.08)", s.df),
    );
}

fn c5_power(rep: &mut Report) {
    let s = montecarlo::run(&mc_config(presets::misspecified_model(), R_MISSPEC, 20_240_602, None)).unwrap();
    let rate = s.reject_rate();
    rep.line(
        "5 test consistency",
        rate >= 0.99,
        format!(
            "rejected {}/{} = {rate:.3} (>= 0.99), df {}, not converged {}",
            s.reject_count,
            s.r(),
            s.df,
            s.nonconverged_count()
        ),
    );
}

fn c6_gradient(rep: &mut Report) {
    let spec = presets::correct_model();
    let obs = assemble_observations(&presets::true_system(), N, H, 6).unwrap();
    let est = estimate(&obs, &ThresholdConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let theta: Vec<f64> = presets::theta0()
            .0
            .iter()
            .enumerate()
            .map(|(k, &t0)| {
                if k >= 11 {
                    t0 * rng.random_range(0.5..2.0)
                } else {
                    t0 + rng.random_range(-0.5..0.5)
                }
            })
            .collect();
        let theta = ThetaVector(theta);
        let g = gradient(&spec, &theta, &est).unwrap();
        for k in 0..spec.q() {
            let step = 1e-5 * theta.0[k].abs().max(1.0);
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up.0[k] += step;
            dn.0[k] -= step;
            let fd = (quasi_loglik(&spec, &up, &est) - quasi_loglik(&spec, &dn, &est)) / (2.0 * step);
            worst = worst.max((g[k] - fd).abs() / g[k].abs().max(1.0));
        }
    }
    rep.line(
        "6 gradient oracle",
        worst <= 1e-5,
        format!("max relative error {worst:.2e} over 50 points (<= 1e-5)"),
    );
}

fn c7_saturated(rep: &mut Report) {
    let spec = presets::saturated_bivariate();
    let mut worst_sigma: f64 = 0.0;
    let mut worst_theta: f64 = 0.0;
    let mut worst_t: f64 = 0.0;
    for seed in 0..5 {
        let obs = assemble_observations(&presets::bivariate_system(), N, H, 70 + seed).unwrap();
        let est = estimate(&obs, &ThresholdConfig::default()).unwrap();
        let start = spec.default_start(&est.sigma_hat);
        let res = qmle::fit(&spec, &start, &est, &FitOptions::default()).unwrap();
        let implied = spec.implied_covariance(&res.theta()).unwrap();
        let (a, b) = (vech(&implied), vech(&est.sigma_hat));
        worst_sigma = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(worst_sigma, f64::max);
        let s = &est.sigma_hat;
        let exact = [
            s[(0, 0)],
            s[(1, 0)] / s[(0, 0)],
            s[(1, 1)] - s[(1, 0)].powi(2) / s[(0, 0)],
        ];
        worst_theta = res
            .theta_hat
            .iter()
            .zip(exact)
            .map(|(x, y)| (x - y).abs())
            .fold(worst_theta, f64::max);
        worst_t = worst_t.max(lr_statistic(&spec, &res.theta(), &est).unwrap().abs());
    }
    rep.line(
        "7a saturated theta_hat",
        worst_sigma <= 1e-6 && worst_theta <= 1e-6,
        format!("max |vech Sigma(theta_hat) - vech Sigma_hat| = {worst_sigma:.2e}, max |theta_hat - theta*| = {worst_theta:.2e} (<= 1e-6)"),
    );
    rep.line(
        "7b saturated T_n",
        worst_t <= 1e-8,
        format!("max |T_n| = {worst_t:.2e} (<= 1e-8)"),
    );
}

fn c8_filter(rep: &mut Report, s: &McSummary) {
    let min_ratio = s
        .reps
        .iter()
        .map(|r| r.row.n_retained as f64 / N as f64)
        .fold(f64::INFINITY, f64::min);
    rep.line(
        "8a retained fraction",
        min_ratio > 0.95,
        format!("min N_n/n = {min_ratio:.4} (> 0.95)"),
    );
    let diff: Vec<f64> = s
        .reps
        .iter()
        .map(|r| r.excluded(N) as f64 - r.true_jumps as f64)
        .collect();
    let (mean_diff, sd_diff) = mean_sd(&diff);
    let se = sd_diff / (diff.len() as f64).sqrt();
    let excluded = s.reps.iter().map(|r| r.excluded(N) as f64).sum::<f64>() / s.r() as f64;
    let jumps = s.reps.iter().map(|r| r.true_jumps as f64).sum::<f64>() / s.r() as f64;
    rep.line(
        "8b excluded vs logged jumps",
        mean_diff.abs() <= 3.0 * se,
        format!(
            "mean excluded {excluded:.3}, mean logged jumps {jumps:.3}, diff {mean_diff:.3} (3 SE = {:.3})",
            3.0 * se
        ),
    );
    let detectable = s.reps.iter().map(|r| r.detectable as f64).sum::<f64>() / s.r() as f64;
    let steps = s.reps.iter().map(|r| r.jump_steps as f64).sum::<f64>() / s.r() as f64;
    println!(
        "INFO 8b: mean jump steps {steps:.3}, of which above the threshold {detectable:.3}; excluded {excluded:.3}"
    );
}

fn c9_chi2(rep: &mut Report) {
    let mut worst_rt: f64 = 0.0;
    for df in [1, 2, 52, 53] {
        for alpha in [0.01, 0.05, 0.5] {
            let x = chi2_quantile(alpha, df).unwrap();
            worst_rt = worst_rt
                .max((chi2_sf(x, df).unwrap() - alpha).abs())
                .max((1.0 - chi2_cdf(x, df).unwrap() - alpha).abs());
        }
    }
    rep.line(
        "9a chi2 round trip",
        worst_rt <= 1e-8,
        format!("max error {worst_rt:.2e} (<= 1e-8)"),
    );
    let mut worst_cf: f64 = 0.0;
    for alpha in [0.01, 0.05, 0.5] {
        worst_cf = worst_cf.max((chi2_quantile(alpha, 2).unwrap() - (-2.0 * f64::ln(alpha))).abs());
    }
    for i in 0..200 {
        let x = i as f64 * 0.1;
        worst_cf = worst_cf.max((chi2_cdf(x, 2).unwrap() - (1.0 - (-x / 2.0).exp())).abs());
    }
    rep.line(
        "9b chi2 df=2 closed form",
        worst_cf <= 1e-10,
        format!("max error {worst_cf:.2e} (<= 1e-10)"),
    );
}

fn c10_determinism(rep: &mut Report) {
    let pbar = 78;
    let q = 26;
    let mut bytes = Vec::new();
    for workers in [1, 8] {
        let cfg = McConfig {
            workers: Some(workers),
            ..mc_config(presets::correct_model(), 40, 1010, Some(presets::theta0()))
        };
        let s = montecarlo::run(&cfg).unwrap();
        let mut buf = Vec::new();
        montecarlo::write_per_rep_csv_to(&s.rows(), pbar, q, &mut buf).unwrap();
        bytes.push(buf);
    }
    rep.line(
        "10 determinism",
        bytes[0] == bytes[1],
        format!(
            "per-rep CSV for workers 1 and 8: {} vs {} bytes, identical = {}",
            bytes[0].len(),
            bytes[1].len(),
            bytes[0] == bytes[1]
        ),
    );
}

fn main() {
    let mut rep = Report { failures: 0 };
    let start = Instant::now();
    c1_implied(&mut rep);
    c9_chi2(&mut rep);
    c6_gradient(&mut rep);
    c7_saturated(&mut rep);

    let correct = montecarlo::run(&mc_config(
        presets::correct_model(),
        R_CORRECT,
        20_240_601,
        Some(presets::theta0()),
    ))
    .expect("correct-model study runs");
    println!(
        "INFO correct model: R = {}, not converged {}, fallback {}, failed {}",
        correct.r(),
        correct.nonconverged_count(),
        correct.fallback_count(),
        correct.failed_count()
    );
    c2_sigma(&mut rep, &correct);
    c3_theta(&mut rep, &correct);
    c4_size(&mut rep, &correct);
    c8_filter(&mut rep, &correct);
    c5_power(&mut rep);
    c10_determinism(&mut rep);

    println!(
        "acceptance: {} failed, {:.1}s",
        rep.failures,
        start.elapsed().as_secs_f64()
    );
    if rep.failures > 0 {
        std::process::exit(1);
    }
}
