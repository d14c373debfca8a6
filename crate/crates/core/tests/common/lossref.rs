//! Loss fixtures and a forward-only reference loss for gradient checks.

use psi_core::elbo::special::softplus;
use psi_core::elbo::*;
use psi_core::menn::{ModelConfig, PsiModel};
use psi_core::nncore::{Activation, Graph, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_model(d: usize, seed: u64) -> PsiModel {
    let mut c = ModelConfig::new(d);
    c.menn_hidden = vec![2 * d];
    c.embed_width = 2;
    c.head_hidden = vec![4];
    c.menn2_hidden = vec![d];
    c.menn2_embed = 1;
    c.sigma_hidden = vec![d + 1];
    c.activation = Activation::Elu;
    c.init_seed = seed;
    let mut m = PsiModel::new(c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb);
    let id = m.store().find("baseline").unwrap();
    let (r, k) = m.store().value(id).shape();
    m.store_mut().load_value("baseline", Matrix::from_fn(r, k, |_, _| rng.random_range(-1.0..1.0))).unwrap();
    m.store_mut().load_value("phi0", Matrix::filled(1, 1, 0.2)).unwrap();
    m
}

pub struct Fixture {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub masks: Matrix,
}

pub fn fixture(d: usize, task: Task, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let y = (0..n)
        .map(|_| match task {
            Task::Regression => rng.random_range(-1.5..1.5),
            Task::Classification => f64::from(u8::from(rng.random_bool(0.5))),
        })
        .collect();
    let mut masks = Matrix::from_fn(n, d, |_, _| f64::from(u8::from(rng.random_bool(0.6))));
    masks.row_mut(0).fill(1.0);
    masks.row_mut(n - 1).fill(0.0);
    Fixture { x, y, masks }
}

/// Per-instance loss from public forward passes, coded without the loss graph.
pub fn reference_loss(model: &PsiModel, fx: &Fixture, draws: &LossDraws, config: &ElboConfig) -> f64 {
    split_reference_loss(model, model, fx, draws, config)
}

/// As [`reference_loss`], with the f-path (and coalition values) from `model_f`
/// and the σ-path from `model_sigma`. The σ-head reads its inputs through a
/// gradient barrier, so the tape gradient of an f-path parameter is the
/// derivative with `model_sigma` held fixed.
pub fn split_reference_loss(model_f: &PsiModel, model_sigma: &PsiModel, fx: &Fixture, draws: &LossDraws, config: &ElboConfig) -> f64 {
    let model = model_f;
    let d = model.n_features();
    let pred = model.predict(&fx.x, &fx.masks).unwrap();
    let sigma = model_sigma.predict(&fx.x, &fx.masks).unwrap().sigma;
    let mut total = 0.0;
    for i in 0..fx.y.len() {
        let f = pred.f.row(i);
        let s = sigma.row(i);
        let stats = marginal_stats(f, s, model_sigma.phi0(), model_sigma.sigma0());
        let mut value = match config.task {
            Task::Regression => nll_gaussian(&stats, fx.y[i]),
            Task::Classification => {
                let label = fx.y[i] == 1.0;
                let sd = stats.var.sqrt();
                let z = sample_logit(label, stats.mu, sd, draws.u[i]).unwrap();
                let bern = fx.y[i] * z - softplus(z);
                let ce = cross_entropy_logit(label, &stats).unwrap();
                let h = trunc_stats(label, stats.mu, sd).unwrap().entropy;
                -(bern + ce + h)
            }
        };
        if let Some(draw) = &draws.shap[i] {
            let xi = fx.x.row(i);
            let v = model
                .coalition_values(
                    xi,
                    &[draw.first[0], draw.first[0].with(draw.pivot), draw.second[0], draw.second[0].with(draw.pivot)],
                )
                .unwrap();
            let retained = (0..d).filter(|&j| fx.masks.get(i, j) != 0.0).count() as f64;
            let p = draw.pivot;
            let term = retained * ((v[1] - v[0] - f[p]) * (v[3] - v[2] - f[p])).abs() / (2.0 * s[p] * s[p]);
            value += config.beta * term;
        }
        total += value;
    }
    total / fx.y.len() as f64
}

pub fn loss_value(model: &PsiModel, fx: &Fixture, draws: &LossDraws, config: &ElboConfig) -> f64 {
    let batch = Batch { x: &fx.x, y: &fx.y, masks: &fx.masks };
    let mut g = Graph::new();
    let out = loss_graph(&mut g, model, &batch, draws, config).unwrap();
    g.scalar(out.loss)
}

/// Largest relative error between tape gradients and central differences of
/// the reference loss, over every parameter of a 3-feature model on a 4-instance batch.
pub fn worst_gradient_error(task: Task, seed: u64, beta: f64) -> f64 {
    let model = tiny_model(3, 20 + seed);
    let fx = fixture(3, task, 20 + seed);
    let batch = Batch { x: &fx.x, y: &fx.y, masks: &fx.masks };
    let draws = sample_loss_draws(&batch, task, &mut ChaCha8Rng::seed_from_u64(seed));
    let cfg = ElboConfig::new(beta, task).unwrap();
    let mut g = Graph::new();
    let out = loss_graph(&mut g, &model, &batch, &draws, &cfg).unwrap();
    let grads = g.backward(out.loss).unwrap();
    let f_path = model.f_path_params();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (id, p) in model.store().iter() {
        let analytic = grads.param(id).unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols()));
        let on_f_path = f_path.contains(&id);
        for k in 0..p.value.len() {
            let mut plus = model.clone();
            plus.store_mut().value_mut(id).data_mut()[k] += h;
            let mut minus = model.clone();
            minus.store_mut().value_mut(id).data_mut()[k] -= h;
            let eval = |m: &PsiModel| {
                if on_f_path {
                    split_reference_loss(m, &model, &fx, &draws, &cfg)
                } else {
                    split_reference_loss(m, m, &fx, &draws, &cfg)
                }
            };
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
        }
    }
    worst
}
