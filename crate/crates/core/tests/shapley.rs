mod common;

use common::*;
use proptest::prelude::*;
use psi_core::menn::RemovalMask;
use psi_core::nncore::Matrix;
use psi_core::shapley::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

fn table(model: &psi_core::menn::PsiModel, x: &[f64]) -> Vec<f64> {
    let n = model.n_features();
    let subsets: Vec<FeatureSubset> = (0..1u64 << n).map(FeatureSubset::from_bits).collect();
    model.coalition_values(x, &subsets).unwrap()
}

proptest! {
    #![proptest_config(fixed(100, 0x5a))]

    #[test]
    fn efficiency_on_random_models(seed in any::<u64>(), d in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(d, seed, &mut rng);
        let x = random_x(d, &mut rng);
        let res = model_shapley(&model, &x).unwrap();
        prop_assert!(res.efficiency_residual().abs() < 1e-9, "{}", res.efficiency_residual());
        prop_assert_eq!(res.f_empty, 0.0);
    }

    #[test]
    fn dummy_feature_gets_zero(seed in any::<u64>(), d in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = random_model(d, seed, &mut rng);
        let dummy = rng.random_range(0..d);
        make_dummy(&mut model, dummy);
        let x = random_x(d, &mut rng);
        let t = table(&model, &x);
        for s in 0..1usize << d {
            prop_assert_eq!(t[s], t[s | (1 << dummy)]);
        }
        let phi = exact_shapley(&ModelGame::new(&model, &x).unwrap(), dummy).unwrap();
        prop_assert!(phi.abs() < 1e-10, "{phi}");
    }

    #[test]
    fn symmetric_players_share_value(seed in any::<u64>(), d in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(d, seed, &mut rng);
        let x = random_x(d, &mut rng);
        let (a, b) = (0, 1 + rng.random_range(0..d - 1));
        let t = table(&model, &x);
        let swap = |s: FeatureSubset| {
            let (ha, hb) = (s.contains(a), s.contains(b));
            let mut out = s.without(a).without(b);
            if ha { out = out.with(b); }
            if hb { out = out.with(a); }
            out
        };
        let game = FnGame::new(d, |s: FeatureSubset| t[s.bits() as usize] + t[swap(s).bits() as usize]);
        let res = exact_shapley_all(&game).unwrap();
        prop_assert!((res.phi[a] - res.phi[b]).abs() < 1e-9);
    }

    #[test]
    fn additivity_over_two_models(seed in any::<u64>(), d in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m1 = random_model(d, seed, &mut rng);
        let m2 = random_model(d, seed ^ 1, &mut rng);
        let x = random_x(d, &mut rng);
        let (t1, t2) = (table(&m1, &x), table(&m2, &x));
        let sum = exact_shapley_all(&FnGame::new(d, |s: FeatureSubset| t1[s.bits() as usize] + t2[s.bits() as usize])).unwrap();
        let a = model_shapley(&m1, &x).unwrap();
        let b = model_shapley(&m2, &x).unwrap();
        for j in 0..d {
            prop_assert!((sum.phi[j] - a.phi[j] - b.phi[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_permutation_oracle(seed in any::<u64>(), d in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(d, seed, &mut rng);
        let x = random_x(d, &mut rng);
        let t = table(&model, &x);
        let oracle = permutation_shapley(d, &|s| t[s.bits() as usize]);
        let res = model_shapley(&model, &x).unwrap();
        for j in 0..d {
            prop_assert!((res.phi[j] - oracle[j]).abs() < 1e-9);
            let single = exact_shapley(&ModelGame::new(&model, &x).unwrap(), j).unwrap();
            prop_assert!((single - oracle[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn d_shap_hat_is_nonnegative(seed in any::<u64>(), d in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..1usize << d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let game = FnGame::new(d, |s: FeatureSubset| weights[s.bits() as usize]);
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..2.0)).collect();
        for _ in 0..200 {
            let retained = FeatureSubset::from_bits(rng.random_range(0..1u64 << d));
            let v = d_shap_hat_game(&game, &f, &sigma, retained, &mut rng, 1, 1).unwrap();
            prop_assert!(v >= 0.0);
        }
    }
}

#[test]
fn additive_predictor_recovers_its_terms() {
    let w = [0.5, -1.5, 2.0, 0.25];
    let x = [1.0, 2.0, -0.5, 3.0];
    let game = FnGame::new(4, |s: FeatureSubset| s.iter().map(|j| w[j] * x[j]).sum());
    let res = exact_shapley_all(&game).unwrap();
    for j in 0..4 {
        assert!((res.phi[j] - w[j] * x[j]).abs() < 1e-12);
    }
}

#[test]
fn kernel_weights_match_closed_form() {
    assert!((shapley_kernel_weight(0, 3).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!((shapley_kernel_weight(2, 3).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!((shapley_kernel_weight(1, 4).unwrap() - 1.0 / 12.0).abs() < 1e-15);
    assert!(shapley_kernel_weight(3, 3).is_err());
    for n in 1..15usize {
        let total: f64 = (0..n)
            .map(|k| {
                let c = (0..k).fold(1.0, |acc, i| acc * (n - 1 - i) as f64 / (i + 1) as f64);
                c * shapley_kernel_weight(k, n).unwrap()
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn enumeration_guard() {
    let game = FnGame::new(21, |_s: FeatureSubset| 0.0);
    assert!(matches!(exact_shapley(&game, 0), Err(psi_core::Error::Capacity(_))));
    assert!(matches!(exact_shapley_all(&game), Err(psi_core::Error::Capacity(_))));
}

fn kernel_law(pivot: usize, n: usize) -> Vec<(FeatureSubset, f64)> {
    (0..1u64 << n)
        .map(FeatureSubset::from_bits)
        .filter(|s| !s.contains(pivot))
        .map(|s| (s, shapley_kernel_weight(s.len(), n).unwrap()))
        .collect()
}

#[test]
fn coalition_sampler_passes_chi_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 100_000;
    for pivot in 0..4 {
        let mut counts: HashMap<u64, f64> = HashMap::new();
        for _ in 0..draws {
            let s = sample_coalition(pivot, 4, &mut rng);
            assert!(!s.contains(pivot));
            *counts.entry(s.bits()).or_default() += 1.0;
        }
        let law = kernel_law(pivot, 4);
        let stat: f64 = law
            .iter()
            .map(|(s, p)| {
                let e = p * draws as f64;
                let o = counts.get(&s.bits()).copied().unwrap_or(0.0);
                (o - e).powi(2) / e
            })
            .sum();
        assert!(stat < chi2_critical(law.len() - 1, 0.01), "pivot {pivot}: χ² = {stat}");
    }
}

#[test]
fn coalition_sampler_matches_permutation_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, pivot, draws) = (5usize, 2usize, 100_000usize);
    let mut a: HashMap<u64, f64> = HashMap::new();
    let mut b: HashMap<u64, f64> = HashMap::new();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..draws {
        *a.entry(sample_coalition(pivot, n, &mut rng).bits()).or_default() += 1.0;
        order.shuffle(&mut rng);
        let pos = order.iter().position(|&j| j == pivot).unwrap();
        let s = FeatureSubset::from_indices(order[..pos].iter().copied());
        *b.entry(s.bits()).or_default() += 1.0;
    }
    // Two-sample chi-square homogeneity test over the 2^(n-1) cells.
    let cells = kernel_law(pivot, n);
    let stat: f64 = cells
        .iter()
        .map(|(s, _)| {
            let (oa, ob) = (a.get(&s.bits()).copied().unwrap_or(0.0), b.get(&s.bits()).copied().unwrap_or(0.0));
            let e = (oa + ob) / 2.0;
            (oa - e).powi(2) / e + (ob - e).powi(2) / e
        })
        .sum();
    assert!(stat < chi2_critical(cells.len() - 1, 0.01), "χ² = {stat}");
}

#[test]
fn coalition_members_present_half_the_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, pivot, draws) = (6usize, 4usize, 40_000usize);
    let mut present = vec![0usize; n];
    for _ in 0..draws {
        for j in sample_coalition(pivot, n, &mut rng).iter() {
            present[j] += 1;
        }
    }
    let sd = (draws as f64 * 0.25).sqrt();
    for j in (0..n).filter(|&j| j != pivot) {
        assert!((present[j] as f64 - draws as f64 / 2.0).abs() < 3.0 * sd, "feature {j}: {}", present[j]);
    }
    assert_eq!(present[pivot], 0);
}

#[test]
fn d_shap_exact_matches_independent_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for seed in 0..5 {
        let model = random_model(3, seed, &mut rng);
        let x = random_x(3, &mut rng);
        let t = table(&model, &x);
        let phi = permutation_shapley(3, &|s| t[s.bits() as usize]);
        let p = model.predict_full(&Matrix::row_vector(&x)).unwrap();
        let want: f64 = (0..3)
            .map(|j| (phi[j] - p.f.get(0, j)).powi(2) / (2.0 * p.sigma.get(0, j).powi(2)))
            .sum();
        let got = d_shap_exact(&model, &x).unwrap();
        assert!((got - want).abs() < 1e-9 * (1.0 + want), "{got} vs {want}");
    }
}

#[test]
fn d_shap_from_values_properties() {
    let phi = [0.3, -1.2, 0.8];
    let sigma = [0.5, 1.0, 2.0];
    assert_eq!(d_shap_from_values(&phi, &phi, &sigma), 0.0);
    let f = [0.1, 0.0, 1.0];
    let base = d_shap_from_values(&phi, &f, &sigma);
    let doubled: Vec<f64> = sigma.iter().map(|s| 2.0 * s).collect();
    assert!((d_shap_from_values(&phi, &f, &doubled) - base / 4.0).abs() < 1e-15);
}

#[test]
fn dummy_pivot_draws_are_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = [0.0, 1.0, -2.0, 0.5];
    let game = FnGame::new(4, |s: FeatureSubset| s.iter().map(|j| w[j] * (j as f64 + 1.0)).sum());
    let f = [0.0, 0.3, 0.2, 0.1];
    let sigma = [0.7; 4];
    for retained in [FeatureSubset::from_indices([0]), FeatureSubset::from_indices([0, 2, 3])] {
        for _ in 0..1000 {
            let draw = sample_shap_draw(retained, 1, 1, &mut rng).unwrap();
            if draw.pivot != 0 {
                continue;
            }
            let m1 = mean_marginal(&game, 0, &draw.first).unwrap();
            let m2 = mean_marginal(&game, 0, &draw.second).unwrap();
            assert_eq!(d_shap_hat_from_values(retained.len(), m1, m2, f[0], sigma[0]), 0.0);
        }
    }
    let only = FeatureSubset::from_indices([0]);
    for _ in 0..100 {
        assert_eq!(d_shap_hat_game(&game, &f, &sigma, only, &mut rng, 1, 1).unwrap(), 0.0);
    }
}

#[test]
fn singleton_and_empty_retained_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let draw = sample_shap_draw(FeatureSubset::from_indices([3]), 1, 1, &mut rng).unwrap();
    assert_eq!(draw.pivot, 3);
    assert_eq!(draw.first, vec![FeatureSubset::empty()]);
    assert!(sample_shap_draw(FeatureSubset::empty(), 1, 1, &mut rng).is_none());
    let game = FnGame::new(4, |s: FeatureSubset| s.len() as f64);
    assert_eq!(d_shap_hat_game(&game, &[1.0; 4], &[1.0; 4], FeatureSubset::empty(), &mut rng, 1, 1).unwrap(), 0.0);
}

#[test]
fn sigma_scaling_scales_draws() {
    let weights: Vec<f64> = (0..16).map(|i| ((i * 7919) % 13) as f64 / 3.0 - 2.0).collect();
    let game = FnGame::new(4, |s: FeatureSubset| weights[s.bits() as usize]);
    let f = [0.4, -0.2, 0.9, 0.0];
    let sigma = [0.3, 0.6, 1.1, 0.8];
    let c = 2.5;
    let scaled: Vec<f64> = sigma.iter().map(|s| s * c).collect();
    for seed in 0..200 {
        let retained = FeatureSubset::from_bits(seed % 16);
        let a = d_shap_hat_game(&game, &f, &sigma, retained, &mut ChaCha8Rng::seed_from_u64(seed), 1, 1).unwrap();
        let b = d_shap_hat_game(&game, &f, &scaled, retained, &mut ChaCha8Rng::seed_from_u64(seed), 1, 1).unwrap();
        assert!((b - a / (c * c)).abs() <= 1e-12 * (1.0 + a));
    }
}

#[test]
fn additive_model_draws_are_deterministic() {
    let w = [1.2, -0.7, 0.4, 2.0, -1.1];
    let x = [0.5, 1.5, -2.0, 0.3, 1.0];
    let delta = [0.1, -0.3, 0.05, 0.2, -0.15];
    let f: Vec<f64> = (0..5).map(|j| w[j] * x[j] + delta[j]).collect();
    let sigma = [0.4, 0.9, 0.6, 1.3, 0.7];
    let game = FnGame::new(5, |s: FeatureSubset| s.iter().map(|j| w[j] * x[j]).sum());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..2000 {
        let retained = FeatureSubset::from_bits(rng.random_range(1..32));
        let mut peek = rng.clone();
        let pivot = sample_shap_draw(retained, 1, 1, &mut peek).unwrap().pivot;
        let v = d_shap_hat_game(&game, &f, &sigma, retained, &mut rng, 1, 1).unwrap();
        let want = retained.len() as f64 * delta[pivot].powi(2) / (2.0 * sigma[pivot].powi(2));
        assert!((v - want).abs() < 1e-12 * (1.0 + want), "{v} vs {want}");
    }
}

#[test]
fn retained_set_outside_model_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let model = random_model(3, 0, &mut rng);
    let x = random_x(3, &mut rng);
    assert!(d_shap_hat(&model, &x, FeatureSubset::from_indices([5]), &mut rng, 1, 1).is_err());
    let v = d_shap_hat(&model, &x, FeatureSubset::full(3), &mut rng, 1, 1).unwrap();
    assert!(v >= 0.0 && v.is_finite());
    assert_eq!(FeatureSubset::full(3).to_mask(3), RemovalMask::full(3));
}
