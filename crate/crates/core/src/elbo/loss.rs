use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::special::{inv_mills, sigmoid, softplus};
use super::trunc::{cross_entropy_t, sample_logit_with_grad, trunc_entropy_t};
use crate::error::{Error, Result};
use crate::menn::PsiModel;
use crate::nncore::{Graph, Matrix, Var};
use crate::shapley::{sample_shap_draw, FeatureSubset, ShapDraw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Regression,
    Classification,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Weight of the Shapley-KL term and the likelihood family.
///
/// The bound interpretation holds for `beta ≤ 1`; larger values are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboConfig {
    pub beta: f64,
    pub task: Task,
}

impl ElboConfig {
    pub fn new(beta: f64, task: Task) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be nonnegative, got {beta}")));
        }
        Ok(ElboConfig { beta, task })
    }

    /// From the grouped weight `β′ = Dβ/2`.
    pub fn from_beta_prime(beta_prime: f64, n_features: usize, task: Task) -> Result<Self> {
        Self::new(2.0 * beta_prime / n_features as f64, task)
    }

    pub fn beta_prime(&self, n_features: usize) -> f64 {
        n_features as f64 * self.beta / 2.0
    }
}

/// Inputs, targets and per-instance removal masks (1 = retained).
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a Matrix,
    pub y: &'a [f64],
    pub masks: &'a Matrix,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn retained(&self, i: usize) -> FeatureSubset {
        FeatureSubset::from_indices(
            self.masks
                .row(i)
                .iter()
                .enumerate()
                .filter(|(_, &r)| r != 0.0)
                .map(|(d, _)| d),
        )
    }
}

/// All randomness of one loss evaluation, drawn up front.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraws {
    /// Pivot and one coalition pair per instance (`None` for an empty retained set).
    pub shap: Vec<Option<ShapDraw>>,
    /// Uniform draws for the reparameterized logit sample (classification only).
    pub u: Vec<f64>,
}

pub fn sample_loss_draws<R: Rng + ?Sized>(batch: &Batch<'_>, task: Task, rng: &mut R) -> LossDraws {
    let shap = (0..batch.len())
        .map(|i| sample_shap_draw(batch.retained(i), 1, 1, rng))
        .collect();
    let u = match task {
        Task::Regression => Vec::new(),
        Task::Classification => (0..batch.len()).map(|_| rng.random::<f64>()).collect(),
    };
    LossDraws { shap, u }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Scalar batch mean of the per-instance loss.
    pub loss: Var,
    pub per_instance: Vec<f64>,
    /// Per-instance `D̂_SHAP` draws (zeros when `β = 0`).
    pub d_shap: Vec<f64>,
    pub f: Var,
}

fn check_batch(model: &PsiModel, batch: &Batch<'_>, draws: &LossDraws, config: &ElboConfig) -> Result<()> {
    let n = batch.len();
    if batch.y.len() != n {
        return Err(Error::shape("loss targets", n, batch.y.len()));
    }
    if batch.masks.shape() != (n, model.n_features()) {
        return Err(Error::shape(
            "loss masks",
            format!("{:?}", (n, model.n_features())),
            format!("{:?}", batch.masks.shape()),
        ));
    }
    if draws.shap.len() != n {
        return Err(Error::shape("loss draws", n, draws.shap.len()));
    }
    if n == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    if config.task == Task::Classification {
        if draws.u.len() != n {
            return Err(Error::shape("logit draws", n, draws.u.len()));
        }
        if batch.y.iter().any(|&l| l != 0.0 && l != 1.0) {
            return Err(Error::Domain("classification labels must be 0 or 1".into()));
        }
    }
    if batch.y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("loss targets".into()));
    }
    Ok(())
}

/// Records `−V/N + β·mean D̂_SHAP` on `g`.
pub fn loss_graph(
    g: &mut Graph,
    model: &PsiModel,
    batch: &Batch<'_>,
    draws: &LossDraws,
    config: &ElboConfig,
) -> Result<LossOutput> {
    check_batch(model, batch, draws, config)?;
    let n = batch.len();
    let d = model.n_features();
    let use_shap = config.beta > 0.0 && draws.shap.iter().any(Option::is_some);

    let mut extra = Vec::new();
    let mut onehot = Matrix::zeros(n, d);
    let mut d_prime = Matrix::zeros(n, 1);
    if use_shap {
        let mut sets = vec![Matrix::zeros(n, d); 4];
        for (i, draw) in draws.shap.iter().enumerate() {
            let Some(draw) = draw else {
                onehot.set(i, 0, 1.0);
                continue;
            };
            onehot.set(i, draw.pivot, 1.0);
            d_prime.set(i, 0, batch.retained(i).len() as f64);
            let coalitions = [
                draw.first[0],
                draw.first[0].with(draw.pivot),
                draw.second[0],
                draw.second[0].with(draw.pivot),
            ];
            for (m, s) in sets.iter_mut().zip(coalitions) {
                for j in s.iter() {
                    m.set(i, j, 1.0);
                }
            }
        }
        extra = sets;
    }

    let fw = model.forward_graph(g, batch.x, batch.masks, &extra)?;
    let sum_f = g.sum_cols(fw.f);
    let phi0 = g.broadcast(fw.phi0, n, 1);
    let mu = g.add(phi0, sum_f);
    let s0sq = g.square(fw.sigma0);
    let s0sq = g.broadcast(s0sq, n, 1);
    let ssq = g.square(fw.sigma);
    let ssq = g.sum_cols(ssq);
    let var = g.add(s0sq, ssq);

    let y = batch.y;
    let mut per = match config.task {
        Task::Regression => g.map2_indexed(mu, var, |i, m, v| {
            let r = y[i] - m;
            let val = 0.5 * (2.0 * PI * v).ln() + r * r / (2.0 * v);
            (val, -r / v, 0.5 / v - r * r / (2.0 * v * v))
        }),
        Task::Classification => {
            let sd = g.map(var, |v| {
                let s = v.sqrt();
                (s, 0.5 / s)
            });
            let u = &draws.u;
            let logit = g.map2_indexed(mu, sd, |i, m, s| {
                sample_logit_with_grad(y[i] == 1.0, m, s, u[i])
            });
            let bern = g.map_indexed(logit, |i, z| (y[i] * z - softplus(z), y[i] - sigmoid(z)));
            let ce = g.map2_indexed(mu, sd, |i, m, s| {
                trunc_term(y[i] == 1.0, m, s, cross_entropy_t, |t, lam| {
                    (0.5 * lam - 0.5 * t * lam * (t + lam), -1.0)
                })
            });
            let h = g.map2_indexed(mu, sd, |i, m, s| {
                trunc_term(y[i] == 1.0, m, s, trunc_entropy_t, |t, lam| {
                    (0.5 * lam + 0.5 * t * lam * (t + lam), 1.0)
                })
            });
            let a = g.add(bern, ce);
            let a = g.add(a, h);
            g.scale(a, -1.0)
        }
    };

    let mut d_shap = vec![0.0; n];
    if use_shap {
        let fe = &fw.f_extra;
        let sums: Vec<Var> = fe.iter().map(|&v| g.sum_cols(v)).collect();
        let m1 = g.sub(sums[1], sums[0]);
        let m2 = g.sub(sums[3], sums[2]);
        let oh = g.constant(onehot);
        let fp = g.mul(fw.f, oh);
        let fp = g.sum_cols(fp);
        let sp = g.mul(fw.sigma, oh);
        let sp = g.sum_cols(sp);
        let a = g.sub(m1, fp);
        let b = g.sub(m2, fp);
        let ab = g.mul(a, b);
        let ab = g.abs(ab);
        let inv = g.map(sp, |s| (1.0 / (2.0 * s * s), -1.0 / (s * s * s)));
        let term = g.mul(ab, inv);
        let dp = g.constant(d_prime);
        let term = g.mul(term, dp);
        d_shap = g.value(term).data().to_vec();
        let weighted = g.scale(term, config.beta);
        per = g.add(per, weighted);
    }

    let per_instance = g.value(per).data().to_vec();
    if let Some(i) = per_instance.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "loss of instance {i}: value {}, μ = {}, σ² = {}, y = {}, D̂ = {}",
            per_instance[i],
            g.value(mu).get(i, 0),
            g.value(var).get(i, 0),
            y[i],
            d_shap[i]
        )));
    }
    let loss = g.mean(per);
    Ok(LossOutput {
        loss,
        per_instance,
        d_shap,
        f: fw.f,
    })
}

/// Value and `(∂/∂μ, ∂/∂σ)` of `term(t, σ)` with `t = sμ/σ`, given
/// `dterm` returning `(∂term/∂t, σ·∂term/∂σ at fixed t)`.
fn trunc_term(
    label: bool,
    mu: f64,
    sigma: f64,
    term: fn(f64, f64) -> f64,
    dterm: impl Fn(f64, f64) -> (f64, f64),
) -> (f64, f64, f64) {
    let s = if label { 1.0 } else { -1.0 };
    let t = s * mu / sigma;
    let lam = inv_mills(t);
    let (dt, ds) = dterm(t, lam);
    (term(t, sigma), dt * s / sigma, (ds - dt * t) / sigma)
}

fn evaluate(model: &PsiModel, batch: &Batch<'_>, draws: &LossDraws, config: &ElboConfig) -> Result<f64> {
    let mut g = Graph::new();
    let out = loss_graph(&mut g, model, batch, draws, config)?;
    Ok(g.scalar(out.loss))
}

/// Regression loss: batch mean of `−log N(y; μ, σ²) + β·D̂_SHAP`.
pub fn v_reg_loss<R: Rng + ?Sized>(
    batch: &Batch<'_>,
    model: &PsiModel,
    config: &ElboConfig,
    rng: &mut R,
) -> Result<f64> {
    if config.task != Task::Regression {
        return Err(Error::Config("v_reg_loss needs a regression config".into()));
    }
    let draws = sample_loss_draws(batch, config.task, rng);
    evaluate(model, batch, &draws, config)
}

/// Classification loss: batch mean of
/// `−[log Bern(𝟙; y) + E_Q log N(y; μ, σ²) + H] + β·D̂_SHAP` with one logit sample.
pub fn v_class_loss<R: Rng + ?Sized>(
    batch: &Batch<'_>,
    model: &PsiModel,
    config: &ElboConfig,
    rng: &mut R,
) -> Result<f64> {
    if config.task != Task::Classification {
        return Err(Error::Config("v_class_loss needs a classification config".into()));
    }
    let draws = sample_loss_draws(batch, config.task, rng);
    evaluate(model, batch, &draws, config)
}
