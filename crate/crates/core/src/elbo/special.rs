//! Standard normal helpers that stay accurate deep in the lower tail.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

/// Below this argument the lower tail is evaluated through the Mills ratio.
const TAIL: f64 = -5.0;

pub fn norm_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

pub fn log_norm_pdf(t: f64) -> f64 {
    -0.5 * t * t - 0.5 * (2.0 * PI).ln()
}

pub fn norm_cdf(t: f64) -> f64 {
    0.5 * erfc(-t * FRAC_1_SQRT_2)
}

/// `Φ⁻¹(p)` for `p ∈ (0, 1)`, polished by one Newton step.
pub fn norm_ppf(p: f64) -> f64 {
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    let pdf = norm_pdf(x);
    if x.is_finite() && pdf > 0.0 {
        x - (norm_cdf(x) - p) / pdf
    } else {
        x
    }
}

/// Mills ratio `(1 − Φ(x)) / φ(x)` for `x ≥ 5` by its continued fraction.
fn mills_ratio(x: f64) -> f64 {
    let mut t = x;
    for k in (1..=120).rev() {
        t = x + f64::from(k) / t;
    }
    1.0 / t
}

pub fn log_norm_cdf(t: f64) -> f64 {
    if t < TAIL {
        log_norm_pdf(t) + mills_ratio(-t).ln()
    } else {
        norm_cdf(t).ln()
    }
}

/// Inverse Mills ratio `λ(t) = φ(t) / Φ(t)`.
pub fn inv_mills(t: f64) -> f64 {
    if t < TAIL {
        1.0 / mills_ratio(-t)
    } else {
        norm_pdf(t) / norm_cdf(t)
    }
}

/// Natural log of `1 + eˣ`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
