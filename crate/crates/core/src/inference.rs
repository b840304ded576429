//! Confidence intervals and regions, with the quantile functions they need.
//!
//! Normal and chi-square quantiles are found by bisection on CDFs built from
//! `erfc` (series + continued fraction) and the regularized lower incomplete
//! gamma function (series + continued fraction).

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::check_dim;
use crate::linalg::quad_form;
use crate::{Error, Result};

const SQRT_PI: f64 = 1.772_453_850_905_516;
const CF_EPS: f64 = 1e-16;
const CF_TINY: f64 = 1e-300;

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 3.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

pub fn erf(x: f64) -> f64 {
    if x.abs() < 3.0 {
        erf_series(x)
    } else {
        1.0 - erfc(x)
    }
}

/// `erf(x) = (2/√π) e^{−x²} Σ 2ⁿ x^{2n+1} / (1·3·…·(2n+1))`; all terms share
/// the sign of `x`, so there is no cancellation.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
        if term.abs() <= sum.abs() * 1e-17 {
            break;
        }
    }
    2.0 / SQRT_PI * (-x2).exp() * sum
}

/// Continued fraction `erfc(x) = e^{−x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + …))))`
/// evaluated with the modified Lentz method; used for `x ≥ 3`.
fn erfc_cf(x: f64) -> f64 {
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for n in 1..500 {
        let a = n as f64 * 0.5;
        d = x + a * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = x + a / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < CF_EPS {
            break;
        }
    }
    (-x * x).exp() / SQRT_PI / f
}

/// Standard normal CDF `Φ(z)`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "probability must lie in (0, 1), got {p}"
        )))
    }
}

/// `z` with `Φ(z) = p`.
pub fn normal_quantile(p: f64) -> Result<f64> {
    check_probability(p)?;
    if p == 0.5 {
        return Ok(0.0);
    }
    if p > 0.5 {
        return Ok(-lower_normal_quantile(1.0 - p));
    }
    Ok(lower_normal_quantile(p))
}

/// Bisection on `(−40, 0)` for `p < 1/2`, where `Φ` is accurate in
/// relative terms.
fn lower_normal_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0_f64, 0.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `ln Γ(a)` for `a > 0` (Lanczos, g = 7).
pub fn ln_gamma(a: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
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
    if a < 0.5 {
        return (PI / (PI * a).sin()).ln() - ln_gamma(1.0 - a);
    }
    let a = a - 1.0;
    let mut x = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        x += c / (a + i as f64);
    }
    let t = a + G + 0.5;
    0.5 * (2.0 * PI).ln() + (a + 0.5) * t.ln() - t + x.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_p_series(a, x)
    } else {
        1.0 - gamma_q_cf(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..10_000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Upper tail `Q(a, x)` by Lentz's continued fraction, valid for `x ≥ a + 1`.
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / CF_TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = b + an / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < CF_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// CDF of the chi-square distribution with `d` degrees of freedom.
pub fn chi2_cdf(d: usize, x: f64) -> f64 {
    gamma_p(d as f64 / 2.0, x / 2.0)
}

/// `x` with `P(d/2, x/2) = p`.
pub fn chi2_quantile(d: usize, p: f64) -> Result<f64> {
    check_probability(p)?;
    if d == 0 {
        return Err(Error::Domain(
            "chi-square degrees of freedom must be at least 1".into(),
        ));
    }
    let mut hi = (d as f64).max(1.0);
    while chi2_cdf(d, hi) < p {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Domain(format!(
                "chi-square quantile overflow at p = {p}"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-15 * hi {
            break;
        }
        if chi2_cdf(d, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

static CLAMPED_VARIANCES: AtomicU64 = AtomicU64::new(0);

/// How many negative `wᵀΞ̂w` values have been clamped to zero so far.
pub fn clamped_variance_count() -> u64 {
    CLAMPED_VARIANCES.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub center: f64,
    pub half_width: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn lower(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width
    }

    pub fn contains(&self, v: f64) -> bool {
        (v - self.center).abs() <= self.half_width
    }
}

/// Interval `center ± z_{1−q/2} √(α · variance)`; a slightly negative
/// variance is clamped to zero.
pub fn ci_from_variance(
    center: f64,
    alpha: f64,
    variance: f64,
    q: f64,
) -> Result<ConfidenceInterval> {
    check_probability(q)?;
    if !(alpha >= 0.0) {
        return Err(Error::Parameter(format!(
            "stepsize must be nonnegative, got {alpha}"
        )));
    }
    let variance = if variance < 0.0 {
        CLAMPED_VARIANCES.fetch_add(1, Ordering::Relaxed);
        log::warn!("negative variance {variance:e} clamped to zero");
        0.0
    } else {
        variance
    };
    let z = normal_quantile(1.0 - q / 2.0)?;
    Ok(ConfidenceInterval {
        center,
        half_width: z * (alpha * variance).sqrt(),
        level: 1.0 - q,
    })
}

/// Interval for `wᵀx⋆`: `wᵀx_t ± z_{1−q/2} √(ᾱ_t · wᵀΞ̂w)`.
pub fn directional_ci(
    x_t: &DVector<f64>,
    alpha_t: f64,
    xi_hat: &DMatrix<f64>,
    w: &DVector<f64>,
    q: f64,
) -> Result<ConfidenceInterval> {
    check_dim("directional_ci: w", x_t.len(), w.len())?;
    check_dim("directional_ci: covariance", x_t.len(), xi_hat.nrows())?;
    ci_from_variance(w.dot(x_t), alpha_t, quad_form(xi_hat, w), q)
}

/// `{x : (x − x_t)ᵀ Ξ̂⁻¹ (x − x_t)/ᾱ_t ≤ χ²_{d,1−q}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRegion {
    pub center: DVector<f64>,
    pub shape_inv: DMatrix<f64>,
    pub scale: f64,
    pub threshold: f64,
}

impl ConfidenceRegion {
    pub fn new(
        center: DVector<f64>,
        shape_inv: DMatrix<f64>,
        alpha_t: f64,
        q: f64,
    ) -> Result<Self> {
        check_dim("confidence region", center.len(), shape_inv.nrows())?;
        if !(alpha_t > 0.0) {
            return Err(Error::Parameter(format!(
                "stepsize must be positive, got {alpha_t}"
            )));
        }
        let threshold = chi2_quantile(center.len(), 1.0 - q)?;
        Ok(Self {
            center,
            shape_inv,
            scale: alpha_t,
            threshold,
        })
    }

    pub fn statistic(&self, x: &DVector<f64>) -> f64 {
        quad_form(&self.shape_inv, &(x - &self.center)) / self.scale
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.statistic(x) <= self.threshold
    }
}

pub fn region_contains(region: &ConfidenceRegion, x: &DVector<f64>) -> bool {
    region.contains(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        // Abramowitz & Stegun table values.
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erfc(3.5) - 7.430_983_723_414_128e-7).abs() < 1e-20);
        assert!((erfc(-1.0) - 1.842_700_792_949_715).abs() < 1e-15);
    }

    #[test]
    fn erf_branches_agree_at_switch() {
        let below = 1.0 - erf_series(3.0);
        let above = erfc_cf(3.0);
        assert!((below - above).abs() < 1e-15);
    }

    #[test]
    fn normal_quantile_examples() {
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        assert!((normal_quantile(0.975).unwrap() - 1.959_963_984_540_054).abs() < 1e-9);
        for p in [0.01, 0.1, 0.3, 0.45] {
            let a = normal_quantile(p).unwrap();
            let b = normal_quantile(1.0 - p).unwrap();
            assert!((a + b).abs() < 1e-12);
        }
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
        assert!(normal_quantile(f64::NAN).is_err());
    }

    #[test]
    fn quantile_round_trip() {
        for k in 1..100 {
            let p = k as f64 / 100.0;
            let z = normal_quantile(p).unwrap();
            assert!((normal_cdf(z) - p).abs() < 1e-8);
            for d in [1, 2, 5, 20] {
                let x = chi2_quantile(d, p).unwrap();
                assert!((chi2_cdf(d, x) - p).abs() < 1e-8, "d={d} p={p}");
            }
        }
    }

    #[test]
    fn chi2_closed_forms() {
        let x2 = chi2_quantile(2, 0.95).unwrap();
        let closed = -2.0 * (0.05f64).ln();
        assert!((x2 - closed).abs() < 1e-8 * closed);
        assert!((x2 - 5.991_465).abs() < 1e-6);
        let z = normal_quantile(0.975).unwrap();
        let x1 = chi2_quantile(1, 0.95).unwrap();
        assert!((x1 - z * z).abs() < 1e-8);
        assert!((x1 - 3.841_459).abs() < 1e-6);
        assert!(chi2_quantile(0, 0.5).is_err());
    }

    #[test]
    fn ln_gamma_half_integers() {
        assert!((ln_gamma(0.5) - SQRT_PI.ln()).abs() < 1e-14);
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(2.5) - (0.75 * SQRT_PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn directional_ci_examples() {
        let x = DVector::from_vec(vec![0.4, -0.2]);
        let w = DVector::from_vec(vec![1.0, 0.0]);
        let zero = directional_ci(&x, 0.01, &DMatrix::zeros(2, 2), &w, 0.05).unwrap();
        assert_eq!(zero.half_width, 0.0);
        assert_eq!(zero.center, 0.4);

        let ci = directional_ci(&x, 0.01, &DMatrix::identity(2, 2), &w, 0.05).unwrap();
        assert!((ci.half_width - 0.195_996_398_454_005_4).abs() < 1e-9);
        let doubled = directional_ci(&x, 0.02, &DMatrix::identity(2, 2), &w, 0.05).unwrap();
        assert!((doubled.half_width / ci.half_width - 2f64.sqrt()).abs() < 1e-14);

        let wide = directional_ci(&x, 0.01, &DMatrix::identity(2, 2), &w, 0.01).unwrap();
        assert!(wide.lower() <= ci.lower() && wide.upper() >= ci.upper());
    }

    #[test]
    fn negative_variance_is_clamped() {
        let before = clamped_variance_count();
        let ci = ci_from_variance(1.0, 0.5, -1e-18, 0.05).unwrap();
        assert_eq!(ci.half_width, 0.0);
        assert!(clamped_variance_count() > before);
    }

    #[test]
    fn region_examples() {
        let c = DVector::from_vec(vec![1.0, 2.0]);
        let region = ConfidenceRegion::new(c.clone(), DMatrix::identity(2, 2), 1.0, 0.05).unwrap();
        assert!(region_contains(&region, &c));
        let r = 5.991_464_547_107_979f64.sqrt();
        let inside = &c + DVector::from_vec(vec![r - 1e-6, 0.0]);
        let outside = &c + DVector::from_vec(vec![r + 1e-6, 0.0]);
        assert!(region.contains(&inside));
        assert!(!region.contains(&outside));
    }

    #[test]
    fn one_dimensional_region_matches_interval() {
        let xt = DVector::from_vec(vec![0.3]);
        let xi = DMatrix::from_element(1, 1, 0.8);
        let alpha = 0.05;
        let region = ConfidenceRegion::new(
            xt.clone(),
            DMatrix::from_element(1, 1, 1.0 / 0.8),
            alpha,
            0.05,
        )
        .unwrap();
        let ci = directional_ci(&xt, alpha, &xi, &DVector::from_element(1, 1.0), 0.05).unwrap();
        for k in -50..=50 {
            let v = 0.3 + k as f64 * 0.004;
            // Skip points within rounding distance of the boundary.
            if ((v - 0.3).abs() - ci.half_width).abs() < 1e-9 {
                continue;
            }
            assert_eq!(
                region.contains(&DVector::from_element(1, v)),
                ci.contains(v),
                "v={v}"
            );
        }
    }
}
