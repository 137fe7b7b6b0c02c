//! Quasi-likelihood-ratio goodness-of-fit test and the chi-square functions
//! it needs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet_inv, SymMatrix};
use crate::model::{ModelSpec, ThetaVector};
use crate::threshold::CovEstimate;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;

fn lower_series(a: f64, x: f64) -> f64 {
    let mut sum = 1.0 / a;
    let mut term = sum;
    let mut ap = a;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    (sum.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

/// Modified Lentz evaluation of the continued fraction for `Q(a, x)`.
fn upper_fraction(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    (h.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < a + 1.0 {
        lower_series(a, x)
    } else {
        1.0 - upper_fraction(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x < a + 1.0 {
        1.0 - lower_series(a, x)
    } else {
        upper_fraction(a, x)
    }
}

fn check_chi2_args(x: f64, df: u32) -> Result<()> {
    if df == 0 {
        return Err(Error::Domain("chi-square degrees of freedom must be positive".into()));
    }
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!("chi-square argument must be >= 0, got {x}")));
    }
    Ok(())
}

pub fn chi2_cdf(x: f64, df: u32) -> Result<f64> {
    check_chi2_args(x, df)?;
    Ok(gamma_p(df as f64 / 2.0, x / 2.0))
}

/// Upper tail `1 - F(x)`, computed without cancellation.
pub fn chi2_sf(x: f64, df: u32) -> Result<f64> {
    check_chi2_args(x, df)?;
    Ok(gamma_q(df as f64 / 2.0, x / 2.0))
}

fn chi2_pdf(x: f64, df: u32) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = df as f64 / 2.0;
    ((k - 1.0) * x.ln() - x / 2.0 - k * 2f64.ln() - ln_gamma(k)).exp()
}

/// Upper-`alpha` point: the `x` with `1 - F(x) = alpha`.
pub fn chi2_quantile(alpha_upper: f64, df: u32) -> Result<f64> {
    if !(alpha_upper > 0.0 && alpha_upper < 1.0) {
        return Err(Error::Domain(format!(
            "upper tail probability must be in (0, 1), got {alpha_upper}"
        )));
    }
    if df == 0 {
        return Err(Error::Domain("chi-square degrees of freedom must be positive".into()));
    }
    let sf = |x: f64| gamma_q(df as f64 / 2.0, x / 2.0);
    let mut lo = 0.0;
    let mut hi = (df as f64).max(1.0);
    while sf(hi) > alpha_upper {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let r = sf(x) - alpha_upper;
        if r > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        // sf is decreasing: d sf / dx = -pdf.
        let pdf = chi2_pdf(x, df);
        let newton = if pdf > 0.0 { x + r / pdf } else { f64::NAN };
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 1e-14 * x.max(1e-300) || hi - lo <= 1e-15 * hi {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

pub fn erf(x: f64) -> f64 {
    let v = gamma_p(0.5, x * x);
    if x < 0.0 {
        -v
    } else {
        v
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    if x < 0.0 {
        // Upper tail of |x| avoids cancellation deep in the left tail.
        0.5 * gamma_q(0.5, x * x / 2.0)
    } else {
        0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
    }
}

/// `N_n [log det S(theta) - log det S~ + tr(S(theta)^-1 S~) - p]` where `S~`
/// is the estimate when it is positive definite and the identity otherwise.
pub fn lr_statistic(spec: &ModelSpec, theta_hat: &ThetaVector, est: &CovEstimate) -> Result<f64> {
    let sigma = spec.implied_covariance(theta_hat)?;
    let (logdet_model, inv_model) = chol_logdet_inv(&sigma)?;
    let p = sigma.dim();
    let (tilde, logdet_tilde) = if est.pd_flag {
        let (ld, _) = chol_logdet_inv(&est.sigma_hat)?;
        (est.sigma_hat.clone(), ld)
    } else {
        (SymMatrix::identity(p), 0.0)
    };
    let tr = inv_model.trace_product(&tilde);
    Ok(est.n_retained as f64 * (logdet_model - logdet_tilde + tr - p as f64))
}

#[derive(Clone, Debug, Serialize)]
pub struct TestResult {
    #[serde(rename = "T_n")]
    pub t_n: f64,
    pub df: u32,
    pub alpha: f64,
    pub critical: f64,
    pub p_value: f64,
    pub reject: bool,
    pub used_identity_fallback: bool,
}

pub fn decide(spec: &ModelSpec, theta_hat: &ThetaVector, est: &CovEstimate, alpha: f64) -> Result<TestResult> {
    let pbar = spec.pbar();
    let q = spec.q();
    if q >= pbar {
        return Err(Error::DfNonPositive { pbar, q });
    }
    let df = (pbar - q) as u32;
    let t_n = lr_statistic(spec, theta_hat, est)?;
    let critical = chi2_quantile(alpha, df)?;
    let p_value = chi2_sf(t_n.max(0.0), df)?;
    Ok(TestResult {
        t_n,
        df,
        alpha,
        critical,
        p_value,
        reject: t_n > critical,
        used_identity_fallback: !est.pd_flag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{vech, HalfVec};
    use crate::model::{Dims, EntrySpec, Grid, ModelGrids, SymGrid};
    use crate::presets;

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(26.0) - (1..26).map(|k| (k as f64).ln()).sum::<f64>()).abs() < 1e-11);
    }

    #[test]
    fn cdf_trivial_cases() {
        for k in [1, 2, 5, 52, 53] {
            assert_eq!(chi2_cdf(0.0, k).unwrap(), 0.0);
        }
        assert!((chi2_cdf(2.0, 2).unwrap() - (1.0 - (-1.0f64).exp())).abs() < 1e-14);
        for x in [0.1, 1.0, 3.0, 10.0, 40.0] {
            assert!((chi2_cdf(x, 2).unwrap() - (1.0 - (-x / 2.0).exp())).abs() < 1e-13);
            assert!((chi2_sf(x, 2).unwrap() - (-x / 2.0).exp()).abs() < 1e-15);
        }
        assert!(chi2_cdf(-1.0, 3).is_err());
        assert!(chi2_cdf(1.0, 0).is_err());
    }

    #[test]
    fn cdf_monotone_and_roundtrips() {
        let mut prev = 0.0;
        for i in 1..400 {
            let c = chi2_cdf(i as f64 * 0.5, 52).unwrap();
            assert!(c >= prev);
            prev = c;
        }
        for x in [30.0, 52.0, 80.0] {
            let c = chi2_cdf(x, 52).unwrap();
            let back = chi2_quantile(1.0 - c, 52).unwrap();
            assert!((back - x).abs() < 1e-8, "{x}: {back}");
        }
        // Median of chi2_52 is about 51.33.
        let median = chi2_quantile(0.5, 52).unwrap();
        assert!((median - 51.33).abs() < 0.01, "{median}");
    }

    #[test]
    fn cdf_matches_independent_erf() {
        // chi2_1 CDF = erf(sqrt(x / 2)).
        for x in [0.01, 0.5, 1.0, 2.5, 3.8415, 9.0, 20.0] {
            let oracle = statrs::function::erf::erf((x / 2.0f64).sqrt());
            assert!((chi2_cdf(x, 1).unwrap() - oracle).abs() < 1e-10, "{x}");
        }
        for x in [-3.0, -1.0, -0.2, 0.0, 0.7, 2.0] {
            let d = (erf(x) - statrs::function::erf::erf(x)).abs();
            assert!(d < 1e-10, "{x}: {d}");
        }
    }

    #[test]
    fn erf_reference_values() {
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erf(0.7) - 0.677_801_193_837_418_4).abs() < 1e-15);
    }

    #[test]
    fn quantile_cases() {
        assert!((chi2_quantile(0.05, 2).unwrap() + 2.0 * 0.05f64.ln()).abs() < 1e-9);
        // df = 1 via the normal square: root of Phi(z) = 0.975 on the erf-based CDF.
        let (mut lo, mut hi) = (0.0, 5.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf(mid) < 0.975 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let z = 0.5 * (lo + hi);
        let q1 = chi2_quantile(0.05, 1).unwrap();
        assert!((q1 - z * z).abs() < 1e-8);
        assert!((q1 - 3.8415).abs() < 1e-4);
        for alpha in [0.01, 0.05, 0.5, 0.95] {
            let q = chi2_quantile(alpha, 52).unwrap();
            assert!((chi2_cdf(q, 52).unwrap() - (1.0 - alpha)).abs() < 1e-8);
        }
        assert!(chi2_quantile(0.0, 3).is_err());
        assert!(chi2_quantile(1.0, 3).is_err());
        assert!(chi2_quantile(0.5, 0).is_err());
    }

    #[test]
    fn normal_cdf_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
        assert!((normal_cdf(-1.959963984540054) - 0.025).abs() < 1e-12);
        assert!(normal_cdf(-10.0) > 0.0);
    }

    fn scalar_model() -> ModelSpec {
        // p = 2 with X2 carrying no signal: a single free variance for X1.
        let f = EntrySpec::fixed;
        ModelSpec::new(ModelGrids {
            dims: Dims {
                p1: 1,
                p2: 1,
                k1: 1,
                k2: 1,
            },
            lambda1: Grid::from_fn(1, 1, |_, _| f(1.0)),
            lambda2: Grid::from_fn(1, 1, |_, _| f(0.0)),
            b0: Grid::fixed_zeros(1, 1),
            gamma: Grid::fixed_zeros(1, 1),
            sig_xi: SymGrid::diagonal(vec![EntrySpec::free(0)]),
            sig_delta: SymGrid::diagonal(vec![f(0.0)]),
            sig_eps: SymGrid::diagonal(vec![f(1.0)]),
            sig_zeta: SymGrid::diagonal(vec![f(0.0)]),
        })
        .unwrap()
    }

    fn estimate_of(sigma: SymMatrix, n: usize, retained: usize) -> CovEstimate {
        let p = sigma.dim();
        CovEstimate {
            pd_flag: crate::linalg::is_positive_definite(&sigma),
            se: HalfVec::new(p, vech(&sigma).as_vector().map(|_| 0.0)).unwrap(),
            sigma_hat: sigma,
            n,
            n_retained: retained,
            n_tilde: if retained > 0 { retained } else { n },
            tau: 1.0,
        }
    }

    #[test]
    fn lr_hand_arithmetic() {
        let spec = scalar_model();
        // Sigma(theta) = diag(2, 1), Sigma~ = diag(1, 1).
        let est = estimate_of(SymMatrix::identity(2), 100, 100);
        let t = lr_statistic(&spec, &ThetaVector(vec![2.0]), &est).unwrap();
        assert!((t - 100.0 * (2f64.ln() - 0.5)).abs() < 1e-10);
        assert!((t - 19.31).abs() < 0.01);
    }

    #[test]
    fn lr_zero_at_exact_fit() {
        let spec = presets::correct_model();
        let sigma = spec.implied_covariance(&presets::theta0()).unwrap();
        let est = estimate_of(sigma, 1000, 990);
        let t = lr_statistic(&spec, &presets::theta0(), &est).unwrap();
        assert!(t.abs() < 1e-9);
        let res = decide(&spec, &presets::theta0(), &est, 0.05).unwrap();
        assert_eq!(res.df, 52);
        assert!(!res.reject);
        assert!((res.p_value - 1.0).abs() < 1e-9);
        assert!(!res.used_identity_fallback);
    }

    #[test]
    fn identity_fallback_on_non_pd_estimate() {
        let spec = scalar_model();
        let est = estimate_of(SymMatrix::zeros(2), 10, 10);
        let res = decide(&spec, &ThetaVector(vec![1.0]), &est, 0.05).unwrap();
        assert!(res.used_identity_fallback);
        assert!(res.t_n.abs() < 1e-12);
    }

    #[test]
    fn misspecified_df() {
        let spec = presets::misspecified_model();
        let sigma = presets::correct_model().implied_covariance(&presets::theta0()).unwrap();
        let est = estimate_of(sigma, 1000, 1000);
        let mut theta = vec![1.0; 25];
        spec.project(&mut theta);
        let res = decide(&spec, &ThetaVector(theta), &est, 0.05).unwrap();
        assert_eq!(res.df, 53);
        assert_eq!(res.reject, res.t_n > res.critical);
        assert!((res.critical - chi2_quantile(0.05, 53).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn saturated_model_is_untestable() {
        let spec = presets::saturated_bivariate();
        assert_eq!(spec.q(), 3);
        let est = estimate_of(SymMatrix::identity(2), 10, 10);
        match decide(&spec, &ThetaVector(vec![1.0, 0.0, 1.0]), &est, 0.05) {
            Err(Error::DfNonPositive { pbar: 3, q: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_pd_model_covariance_is_an_error() {
        let spec = presets::saturated_bivariate();
        let est = estimate_of(SymMatrix::identity(2), 10, 10);
        let res = lr_statistic(&spec, &ThetaVector(vec![1.0, 2.0, -4.0]), &est);
        assert!(matches!(res, Err(Error::NotPositiveDefinite { .. })));
    }
}
