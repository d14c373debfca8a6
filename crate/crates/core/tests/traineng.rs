mod common;

use common::chi2_critical;
use psi_core::datagen::{gen_synth, standardize_fit_apply};
use psi_core::elbo::{marginal_stats, nll_gaussian, v_reg_loss, Batch, ElboConfig, Task};
use psi_core::menn::{ModelConfig, PsiModel};
use psi_core::nncore::Matrix;
use psi_core::traineng::{fit, sample_removal_mask, RemovalMode, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_model(d: usize, seed: u64) -> PsiModel {
    let mut c = ModelConfig::new(d);
    c.menn_hidden = vec![8 * d];
    c.embed_width = 4;
    c.head_hidden = vec![16];
    c.menn2_hidden = vec![4 * d];
    c.menn2_embed = 2;
    c.sigma_hidden = vec![16];
    c.init_seed = seed;
    PsiModel::new(c).unwrap()
}

/// `y = 1.5 x₁ − 0.8 x₂ + 0.3 + ε`, `ε ~ N(0, 1)`.
fn linear_data(n: usize, seed: u64) -> (Matrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
    let y = (0..n)
        .map(|i| {
            let e: f64 = StandardNormal.sample(&mut rng);
            1.5 * x.get(i, 0) - 0.8 * x.get(i, 1) + 0.3 + e
        })
        .collect();
    (x, y)
}

/// Residual variance of the least-squares fit on `[1, x₁, x₂]`, by Cramer's rule.
fn ols_residual_variance(x: &Matrix, y: &[f64]) -> f64 {
    let n = y.len();
    let row = |i: usize| [1.0, x.get(i, 0), x.get(i, 1)];
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for i in 0..n {
        let r = row(i);
        for p in 0..3 {
            b[p] += r[p] * y[i];
            for q in 0..3 {
                a[p][q] += r[p] * r[q];
            }
        }
    }
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let da = det(&a);
    let coef: Vec<f64> = (0..3)
        .map(|k| {
            let mut m = a;
            for p in 0..3 {
                m[p][k] = b[p];
            }
            det(&m) / da
        })
        .collect();
    (0..n)
        .map(|i| {
            let r = row(i);
            let fit: f64 = (0..3).map(|k| coef[k] * r[k]).sum();
            (y[i] - fit).powi(2)
        })
        .sum::<f64>()
        / n as f64
}

fn full_mask_nll(model: &PsiModel, x: &Matrix, y: &[f64]) -> f64 {
    let pred = model.predict_full(x).unwrap();
    (0..y.len())
        .map(|i| nll_gaussian(&marginal_stats(pred.f.row(i), pred.sigma.row(i), model.phi0(), model.sigma0()), y[i]))
        .sum::<f64>()
        / y.len() as f64
}

fn quick_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        epochs,
        seed,
        beta: 0.5,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (x, y) = linear_data(300, 1);
    let cfg = quick_config(4, 9);
    let mut a = small_model(2, 3);
    let mut b = small_model(2, 3);
    let ta = fit(&mut a, &x, &y, &cfg).unwrap();
    let tb = fit(&mut b, &x, &y, &cfg).unwrap();
    let bits = |v: Vec<f64>| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(ta.losses()), bits(tb.losses()));
    for (ea, eb) in ta.epochs.iter().zip(&tb.epochs) {
        assert_eq!(bits(ea.mean_fd.clone()), bits(eb.mean_fd.clone()));
    }
    for ((_, pa), (_, pb)) in a.store().iter().zip(b.store().iter()) {
        assert_eq!(bits(pa.value.data().to_vec()), bits(pb.value.data().to_vec()), "{}", pa.name);
    }

    let mut c = small_model(2, 3);
    let tc = fit(&mut c, &x, &y, &quick_config(4, 10)).unwrap();
    assert_ne!(bits(ta.losses()), bits(tc.losses()));
}

#[test]
fn linear_gaussian_reaches_the_analytic_optimum() {
    let (x, y) = linear_data(1000, 2);
    let optimum = 0.5 * (2.0 * std::f64::consts::PI * ols_residual_variance(&x, &y)).ln() + 0.5;
    let mut model = small_model(2, 4);
    let cfg = TrainConfig {
        batch_size: 100,
        epochs: 150,
        beta: 0.0,
        lr: 3e-3,
        removal: RemovalMode::Bernoulli { p: 1.0 },
        seed: 5,
        ..TrainConfig::default()
    };
    fit(&mut model, &x, &y, &cfg).unwrap();
    let nll = full_mask_nll(&model, &x, &y);
    assert!((nll - optimum).abs() / optimum < 0.05, "nll {nll} vs optimum {optimum}");
}

#[test]
fn p_one_with_beta_zero_is_plain_heteroscedastic_nll() {
    let (x, y) = linear_data(50, 3);
    let mut model = small_model(2, 5);
    let before = full_mask_nll(&model, &x, &y);
    let cfg = TrainConfig {
        batch_size: 50,
        epochs: 1,
        beta: 0.0,
        removal: RemovalMode::Bernoulli { p: 1.0 },
        ..TrainConfig::default()
    };
    // A single full batch reports the loss of the model before its step.
    let loss = Trainer::new(cfg).unwrap().train_epoch(&mut model, &x, &y).unwrap();
    assert!((loss - before).abs() < 1e-12, "{loss} vs {before}");

    let masks = Matrix::filled(50, 2, 1.0);
    let batch = Batch { x: &x, y: &y, masks: &masks };
    let cfg = ElboConfig::new(0.0, Task::Regression).unwrap();
    let again = v_reg_loss(&batch, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((again - full_mask_nll(&model, &x, &y)).abs() < 1e-12);
}

#[test]
fn masks_are_redrawn_for_every_batch() {
    let (x, y) = linear_data(130, 4);
    let mut model = small_model(2, 6);
    let trace = fit(&mut model, &x, &y, &quick_config(3, 1)).unwrap();
    assert_eq!(trace.masks_drawn, 3 * 130);
    let mut trainer = Trainer::new(quick_config(1, 1)).unwrap();
    trainer.train_epoch(&mut model, &x, &y).unwrap();
    trainer.train_epoch(&mut model, &x, &y).unwrap();
    assert_eq!(trainer.masks_drawn(), 260);
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let (x, y) = linear_data(40, 5);
    let mut model = small_model(2, 7);
    let before = model.store().clone();
    let trace = fit(&mut model, &x, &y, &quick_config(0, 0)).unwrap();
    assert!(trace.epochs.is_empty());
    assert_eq!(trace.masks_drawn, 0);
    for ((_, a), (_, b)) in before.iter().zip(model.store().iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn bernoulli_retained_count_is_binomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[sample_removal_mask(4, RemovalMode::Bernoulli { p: 0.5 }, &mut rng).count()] += 1;
    }
    let probs = [1.0, 4.0, 6.0, 4.0, 1.0].map(|c| c / 16.0);
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&o, p)| (o as f64 - n as f64 * p).powi(2) / (n as f64 * p))
        .sum();
    assert!(stat < chi2_critical(4, 0.001), "chi-square {stat}");
}

#[test]
fn bernoulli_p_one_retains_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for d in 1..10 {
        for _ in 0..200 {
            assert_eq!(sample_removal_mask(d, RemovalMode::Bernoulli { p: 1.0 }, &mut rng).count(), d);
        }
    }
}

#[test]
fn shapley_mode_sizes_are_uniform_and_subsets_exchangeable() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 100_000;
    let mut sizes = [0usize; 4];
    let mut presence = [0usize; 3];
    for _ in 0..n {
        let m = sample_removal_mask(3, RemovalMode::Shapley {}, &mut rng);
        sizes[m.count()] += 1;
        for d in 0..3 {
            presence[d] += m.is_present(d) as usize;
        }
    }
    let p = 0.25;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for &s in &sizes {
        assert!((s as f64 - n as f64 * p).abs() < 3.0 * sd, "{sizes:?}");
    }
    // Each feature is present with probability E[k]/3 = ½.
    let sd = (n as f64 * 0.25).sqrt();
    for &c in &presence {
        assert!((c as f64 - n as f64 * 0.5).abs() < 3.0 * sd, "{presence:?}");
    }
}

#[test]
fn default_config_stays_finite_on_every_synthetic_dataset() {
    for k in 1..=5 {
        let data = gen_synth(k, 512, k as u64).unwrap();
        let (std_data, _) = standardize_fit_apply(&data).unwrap();
        let mut model = PsiModel::new(ModelConfig::new(3)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let trace = fit(&mut model, &std_data.x, &std_data.y, &cfg).unwrap();
        assert!(trace.losses().iter().all(|l| l.is_finite()), "synth{k}");
        assert!(trace.epochs.iter().all(|e| e.mean_fd.iter().all(|v| v.is_finite())));
    }
}

#[test]
fn bad_training_data_is_rejected() {
    let (mut x, y) = linear_data(20, 6);
    let mut model = small_model(2, 8);
    assert!(fit(&mut model, &x, &y[..10], &quick_config(1, 0)).is_err());
    x.set(3, 1, f64::NAN);
    assert!(fit(&mut model, &x, &y, &quick_config(1, 0)).is_err());
    let (x, _) = linear_data(20, 6);
    let labels = vec![0.5; 20];
    let cfg = TrainConfig {
        task: Task::Classification,
        ..quick_config(1, 0)
    };
    assert!(fit(&mut model, &x, &labels, &cfg).is_err());
}
