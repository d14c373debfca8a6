//! Gaussian marginal statistics and the half-line truncated normal over logits.
//!
//! For a label `𝟙` write `s = +1` if `𝟙 = 1` and `s = −1` otherwise, and
//! `t = sμ/σ`. The variational logit density is `N(y; μ, σ²)` restricted to
//! `y > 0` (label 1) or `y ≤ 0` (label 0). With `λ = φ(t)/Φ(t)`:
//!
//! ```text
//! Ψ  = Φ(t)
//! m  = μ + sσλ
//! v² = σ²(1 − tλ − λ²)
//! H  = ½log(2πeσ²) + log Φ(t) − ½tλ
//! Ω  = −tλ
//! ```

use log::warn;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::special::{inv_mills, log_norm_cdf, log_norm_pdf, norm_cdf, norm_pdf, norm_ppf};
use crate::error::{Error, Result};

/// Smallest normalizer reported by [`trunc_normalizer`].
pub const PSI_FLOOR: f64 = 1e-300;

/// Clamp applied to uniform draws passed to [`sample_logit`].
pub const U_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mu: f64,
    pub var: f64,
}

impl GaussianStats {
    pub fn sigma(&self) -> f64 {
        self.var.sqrt()
    }
}

/// `μ = φ0 + Σ f_d`, `σ² = σ0² + Σ σ_d²`.
pub fn marginal_stats(f: &[f64], sigma: &[f64], phi0: f64, sigma0: f64) -> GaussianStats {
    GaussianStats {
        mu: phi0 + f.iter().sum::<f64>(),
        var: sigma0 * sigma0 + sigma.iter().map(|s| s * s).sum::<f64>(),
    }
}

/// `−log N(y; μ, σ²)`.
pub fn nll_gaussian(stats: &GaussianStats, y: f64) -> f64 {
    0.5 * (2.0 * PI * stats.var).ln() + (y - stats.mu).powi(2) / (2.0 * stats.var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncStats {
    pub psi: f64,
    pub omega: f64,
    pub mean: f64,
    pub var: f64,
    pub entropy: f64,
}

fn sign(label: bool) -> f64 {
    if label {
        1.0
    } else {
        -1.0
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("scale must be positive and finite, got {sigma}")))
    }
}

/// Standardized truncation argument `t = sμ/σ`.
pub fn trunc_arg(label: bool, mu: f64, sigma: f64) -> f64 {
    sign(label) * mu / sigma
}

/// Mass of `N(μ, σ²)` on the half-line selected by the label.
pub fn trunc_normalizer(label: bool, mu: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let psi = norm_cdf(trunc_arg(label, mu, sigma));
    if psi < PSI_FLOOR {
        warn!("truncated-normal normalizer {psi:e} clamped to {PSI_FLOOR:e} (μ = {mu}, σ = {sigma})");
        return Ok(PSI_FLOOR);
    }
    Ok(psi)
}

pub fn trunc_stats(label: bool, mu: f64, sigma: f64) -> Result<TruncStats> {
    let psi = trunc_normalizer(label, mu, sigma)?;
    let s = sign(label);
    let t = s * mu / sigma;
    let lam = inv_mills(t);
    let var_ratio = (1.0 - t * lam - lam * lam).max(f64::MIN_POSITIVE);
    Ok(TruncStats {
        psi,
        omega: -t * lam,
        mean: mu + s * sigma * lam,
        var: sigma * sigma * var_ratio,
        entropy: trunc_entropy_t(t, sigma),
    })
}

pub(crate) fn trunc_entropy_t(t: f64, sigma: f64) -> f64 {
    0.5 * (2.0 * PI * std::f64::consts::E * sigma * sigma).ln() + log_norm_cdf(t)
        - 0.5 * t * inv_mills(t)
}

/// `E_Q[log N(y; μ, σ²)] = −½log(2πσ²) − (v² + (m − μ)²)/(2σ²)`,
/// expressed through `t` as `−½log(2πσ²) − ½(1 − tλ)`.
pub(crate) fn cross_entropy_t(t: f64, sigma: f64) -> f64 {
    -0.5 * (2.0 * PI * sigma * sigma).ln() - 0.5 * (1.0 - t * inv_mills(t))
}

/// Expected Gaussian log-density of the logit under its truncated variational law.
pub fn cross_entropy_logit(label: bool, stats: &GaussianStats) -> Result<f64> {
    let sigma = stats.sigma();
    check_sigma(sigma)?;
    Ok(cross_entropy_t(trunc_arg(label, stats.mu, sigma), sigma))
}

/// Standardized quantile `q` (with `y = μ + sσq`) and `dq/dt`.
pub(crate) fn trunc_quantile(t: f64, u: f64) -> (f64, f64) {
    let u = u.clamp(U_EPS, 1.0 - U_EPS);
    if t < -30.0 {
        // Exponential tail approximation of the truncated law beyond −t.
        let e = -(-u).ln_1p();
        let a = -t;
        // Newton on log Φ(−q) = log Φ(t) + log(1 − u), started from the tail approximation.
        let target = log_norm_cdf(t) - e;
        let mut q = a + e / a;
        for _ in 0..4 {
            q += (log_norm_cdf(-q) - target) / inv_mills(-q);
        }
        let dq = -(-e + log_norm_pdf(t) - log_norm_pdf(q)).exp();
        return (q, dq);
    }
    // Upper mass `(1 − u)Φ(t)` is exact for every `t`; the lower mass is used only below ½.
    let upper = (1.0 - u) * norm_cdf(t);
    let lower = norm_cdf(-t) + u * norm_cdf(t);
    let q = if t >= 0.0 && lower < 0.5 {
        norm_ppf(lower)
    } else {
        -norm_ppf(upper)
    };
    let dq = -(1.0 - u) * norm_pdf(t) / norm_pdf(q);
    (q, dq)
}

/// Inverse-CDF sample of the truncated logit for uniform `u`, with
/// `∂y/∂μ` and `∂y/∂σ`.
pub fn sample_logit_with_grad(label: bool, mu: f64, sigma: f64, u: f64) -> (f64, f64, f64) {
    let s = sign(label);
    let t = s * mu / sigma;
    let (q, dq) = trunc_quantile(t, u);
    let y = mu + s * sigma * q;
    (y, 1.0 + dq, s * (q - t * dq))
}

/// Inverse-CDF sample of the truncated logit; the sign of `y` follows the label.
pub fn sample_logit(label: bool, mu: f64, sigma: f64, u: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(sample_logit_with_grad(label, mu, sigma, u).0)
}

/// CDF of the truncated logit law at `y`.
pub fn trunc_cdf(label: bool, mu: f64, sigma: f64, y: f64) -> f64 {
    let z = (y - mu) / sigma;
    if label {
        if y <= 0.0 {
            return 0.0;
        }
        (-(log_norm_cdf(-z) - log_norm_cdf(mu / sigma)).exp_m1()).clamp(0.0, 1.0)
    } else {
        if y > 0.0 {
            return 1.0;
        }
        (log_norm_cdf(z) - log_norm_cdf(-mu / sigma)).exp().clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_examples() {
        assert!((trunc_normalizer(true, 0.0, 2.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((trunc_normalizer(true, 1.5, 1.5).unwrap() - 0.841_344_746_068_543).abs() < 1e-12);
        let a = trunc_normalizer(true, 0.3, 0.7).unwrap();
        let b = trunc_normalizer(false, 0.3, 0.7).unwrap();
        assert!((a + b - 1.0).abs() < 1e-15);
        assert!(trunc_normalizer(true, 0.0, 0.0).is_err());
    }

    #[test]
    fn normalizer_clamps_extreme_logits() {
        assert_eq!(trunc_normalizer(true, -60.0, 1.0).unwrap(), PSI_FLOOR);
    }

    #[test]
    fn half_normal_moments() {
        let st = trunc_stats(true, 0.0, 1.0).unwrap();
        assert!((st.mean - (2.0 / PI).sqrt()).abs() < 1e-14);
        assert!((st.var - (1.0 - 2.0 / PI)).abs() < 1e-14);
        let h = 0.5 * (PI * std::f64::consts::E / 2.0).ln();
        assert!((st.entropy - h).abs() < 1e-14);
    }

    #[test]
    fn reflection() {
        let a = trunc_stats(true, 0.8, 1.3).unwrap();
        let b = trunc_stats(false, -0.8, 1.3).unwrap();
        assert!((a.mean + b.mean).abs() < 1e-14);
        assert!((a.var - b.var).abs() < 1e-14);
        assert!((a.entropy - b.entropy).abs() < 1e-14);
        assert!((a.omega - b.omega).abs() < 1e-14);
    }

    #[test]
    fn median_of_half_normal() {
        let y = sample_logit(true, 0.0, 1.0, 0.5).unwrap();
        assert!((y - 0.674_489_750_196_081_7).abs() < 1e-12);
    }

    #[test]
    fn samples_respect_label_sign() {
        for &mu in &[-50.0, -8.0, -1.0, 0.0, 1.0, 8.0, 50.0] {
            for k in 1..100 {
                let u = f64::from(k) / 100.0;
                assert!(sample_logit(true, mu, 1.0, u).unwrap() > 0.0, "mu={mu} u={u}");
                assert!(sample_logit(false, mu, 1.0, u).unwrap() <= 0.0, "mu={mu} u={u}");
            }
        }
    }

    #[test]
    fn sample_inverts_cdf() {
        for &(label, mu, sigma) in &[(true, 0.4, 0.9), (false, 1.2, 2.0), (true, -2.5, 0.7)] {
            for k in 1..20 {
                let u = f64::from(k) / 20.0;
                let y = sample_logit(label, mu, sigma, u).unwrap();
                let want = if label { u } else { 1.0 - u };
                assert!((trunc_cdf(label, mu, sigma, y) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sample_gradient_matches_differences() {
        let h = 1e-6;
        for &(label, mu, sigma, u) in &[(true, 0.3, 1.1, 0.2), (false, -0.7, 0.6, 0.9), (true, -3.0, 0.8, 0.5)] {
            let (_, dmu, dsig) = sample_logit_with_grad(label, mu, sigma, u);
            let fd_mu = (sample_logit(label, mu + h, sigma, u).unwrap()
                - sample_logit(label, mu - h, sigma, u).unwrap())
                / (2.0 * h);
            let fd_sig = (sample_logit(label, mu, sigma + h, u).unwrap()
                - sample_logit(label, mu, sigma - h, u).unwrap())
                / (2.0 * h);
            assert!((dmu - fd_mu).abs() < 1e-6, "{dmu} vs {fd_mu}");
            assert!((dsig - fd_sig).abs() < 1e-6, "{dsig} vs {fd_sig}");
        }
    }

    #[test]
    fn marginal_stats_sum() {
        let g = marginal_stats(&[1.0, -2.0, 0.5], &[0.1, 0.2, 0.3], 0.25, 2.0);
        assert_eq!(g.mu, 0.25 + 1.0 - 2.0 + 0.5);
        assert!((g.var - (4.0 + 0.01 + 0.04 + 0.09)).abs() < 1e-15);
    }

    #[test]
    fn nll_at_mean() {
        let g = GaussianStats { mu: 3.0, var: 1.0 };
        assert!((nll_gaussian(&g, 3.0) - 0.918_938_533_204_672_7).abs() < 1e-15);
    }
}
