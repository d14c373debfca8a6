#![allow(dead_code)]

pub mod lossref;

use proptest::test_runner::{Config, RngSeed};
use psi_core::menn::{ModelConfig, PsiModel};
use psi_core::nncore::{Activation, Matrix};
use psi_core::shapley::FeatureSubset;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixed(cases: u32, seed: u64) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(seed),
        failure_persistence: None,
        ..Config::default()
    }
}

/// A small random masked model with `d` features.
pub fn small_config(d: usize, seed: u64, rng: &mut ChaCha8Rng) -> ModelConfig {
    let mut c = ModelConfig::new(d);
    let layers = rng.random_range(1..3);
    c.menn_hidden = (0..layers).map(|_| d * rng.random_range(1..4) + rng.random_range(0..d)).collect();
    c.embed_width = rng.random_range(1..4);
    c.head_hidden = vec![rng.random_range(3..10)];
    c.menn2_hidden = vec![d + rng.random_range(0..4)];
    c.menn2_embed = rng.random_range(1..3);
    c.sigma_hidden = vec![d + rng.random_range(0..6)];
    c.activation = [Activation::Elu, Activation::Snake][rng.random_range(0..2)];
    c.init_seed = seed;
    c
}

pub fn random_model(d: usize, seed: u64, rng: &mut ChaCha8Rng) -> PsiModel {
    let mut model = PsiModel::new(small_config(d, seed, rng)).unwrap();
    let id = model.store().find("baseline").unwrap();
    let shape = model.store().value(id).shape();
    let b = Matrix::from_fn(shape.0, shape.1, |_, _| rng.random_range(-1.0..1.0));
    model.store_mut().load_value("baseline", b).unwrap();
    model
}

pub fn random_x(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn set_param(model: &mut PsiModel, name: &str, edit: impl FnOnce(&mut Matrix)) {
    let id = model.store().find(name).unwrap();
    let mut v = model.store().value(id).clone();
    edit(&mut v);
    model.store_mut().load_value(name, v).unwrap();
}

/// Makes feature `d` a structural dummy: its embedding no longer reads `x_d`,
/// its baseline equals that constant embedding, and its own output `f_d` is zero.
pub fn make_dummy(model: &mut PsiModel, d: usize) {
    let cfg = model.config().clone();
    set_param(model, "menn1.0.weight", |w| {
        for j in 0..w.cols() {
            w.set(d, j, 0.0);
        }
    });
    let dz = cfg.embed_width;
    let z = model.embed_features(&vec![0.0; cfg.n_features]).unwrap();
    set_param(model, "baseline", |b| {
        for j in 0..dz {
            b.set(0, d * dz + j, z.get(d, j));
        }
    });
    let last = cfg.head_hidden.len();
    set_param(model, &format!("f_head.{last}.weight"), |w| {
        for i in 0..w.rows() {
            w.set(i, d, 0.0);
        }
    });
    set_param(model, &format!("f_head.{last}.bias"), |b| b.set(0, d, 0.0));
}

/// Shapley values by averaging marginal contributions over all orderings.
pub fn permutation_shapley(n: usize, v: &dyn Fn(FeatureSubset) -> f64) -> Vec<f64> {
    fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == items.len() {
            out.push(items.clone());
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permutations(items, k + 1, out);
            items.swap(k, i);
        }
    }
    let mut perms = Vec::new();
    permutations(&mut (0..n).collect(), 0, &mut perms);
    let mut phi = vec![0.0; n];
    for p in &perms {
        let mut s = FeatureSubset::empty();
        for &j in p {
            let before = v(s);
            s = s.with(j);
            phi[j] += v(s) - before;
        }
    }
    phi.iter().map(|t| t / perms.len() as f64).collect()
}

/// Critical value of the chi-square law at upper-tail probability `alpha`.
pub fn chi2_critical(df: usize, alpha: f64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    ChiSquared::new(df as f64).unwrap().inverse_cdf(1.0 - alpha)
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    // Split into panels so narrow peaks are not missed by the first estimate.
    let panels = 64;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|k| {
            let (lo, hi) = (a + k as f64 * h, a + (k + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            step(f, lo, hi, fa, fm, fb, whole, tol / panels as f64, 40)
        })
        .sum()
}

/// Truncated-normal moments by quadrature: `(Ψ, m, v², H, E log N(y; μ, σ²))`.
pub fn trunc_by_quadrature(label: bool, mu: f64, sigma: f64) -> [f64; 5] {
    let dens = |y: f64| (-(y - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let log_dens = |y: f64| -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - (y - mu).powi(2) / (2.0 * sigma * sigma);
    let reach = 14.0 * sigma;
    let (a, b) = if label { (0.0, mu.max(0.0) + reach) } else { (mu.min(0.0) - reach, 0.0) };
    let tol = 1e-13;
    let psi = integrate(&dens, a, b, tol);
    let q = |y: f64| dens(y) / psi;
    let m = integrate(&|y| y * q(y), a, b, tol);
    let v = integrate(&|y| (y - m).powi(2) * q(y), a, b, tol);
    let h = integrate(&|y| { let p = q(y); if p > 0.0 { -p * p.ln() } else { 0.0 } }, a, b, tol);
    let ce = integrate(&|y| q(y) * log_dens(y), a, b, tol);
    [psi, m, v, h, ce]
}
