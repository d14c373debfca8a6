//! Mini-batch training with random feature removal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::elbo::{loss_graph, sample_loss_draws, Batch, ElboConfig, Task};
use crate::error::{Error, Result};
use crate::menn::{PsiModel, RemovalMask};
use crate::nncore::{Graph, Matrix, Optimizer, OptimizerKind};

/// Rows used for the per-epoch `E[f_d]` diagnostic.
pub const MEAN_FD_ROWS: usize = 2048;

/// How the retained feature set of each instance is drawn per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum RemovalMode {
    /// Each feature retained independently with probability `p`.
    Bernoulli { p: f64 },
    /// Retained-set size uniform on `{0, …, D}`, then a uniform subset of that size.
    Shapley {},
}

impl Default for RemovalMode {
    fn default() -> Self {
        RemovalMode::Bernoulli { p: 0.5 }
    }
}

pub fn sample_removal_mask<R: Rng + ?Sized>(n_features: usize, mode: RemovalMode, rng: &mut R) -> RemovalMask {
    match mode {
        RemovalMode::Bernoulli { p } => {
            RemovalMask::from_bools((0..n_features).map(|_| rng.random_bool(p)).collect())
        }
        RemovalMode::Shapley {} => {
            let k = rng.random_range(0..=n_features);
            let mut present = vec![false; n_features];
            for i in rand::seq::index::sample(rng, n_features, k) {
                present[i] = true;
            }
            RemovalMask::from_bools(present)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub removal: RemovalMode,
    /// Weight of the Shapley-KL term (not the grouped `β′`).
    pub beta: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub task: Task,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            removal: RemovalMode::default(),
            beta: 1.0,
            epochs: 300,
            optimizer: OptimizerKind::adam(),
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            task: Task::Regression,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let RemovalMode::Bernoulli { p } = self.removal {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("removal probability must be in (0, 1], got {p}")));
            }
        }
        ElboConfig::new(self.beta, self.task)?;
        Optimizer::new(self.optimizer, self.lr, self.weight_decay)?;
        Ok(())
    }

    pub fn elbo(&self) -> ElboConfig {
        ElboConfig {
            beta: self.beta,
            task: self.task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// `E_x[f_d(x)]` over the diagnostic rows with all features present.
    pub mean_fd: Vec<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn mean_fd_linf(&self) -> f64 {
        self.mean_fd.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// Number of removal masks drawn over the whole run.
    pub masks_drawn: u64,
    pub seconds: f64,
}

impl TrainTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Optimizer state and random stream of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    masks_drawn: u64,
    epochs_done: usize,
}

fn check_data(model: &PsiModel, x: &Matrix, y: &[f64], task: Task) -> Result<()> {
    if x.cols() != model.n_features() {
        return Err(Error::shape("training inputs", model.n_features(), x.cols()));
    }
    if x.rows() != y.len() {
        return Err(Error::shape("training targets", x.rows(), y.len()));
    }
    if x.rows() == 0 {
        return Err(Error::Domain("empty training set".into()));
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("training data".into()));
    }
    if task == Task::Classification && y.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Domain("classification labels must be 0 or 1".into()));
    }
    Ok(())
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: Optimizer::new(config.optimizer, config.lr, config.weight_decay)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            masks_drawn: 0,
            epochs_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn masks_drawn(&self) -> u64 {
        self.masks_drawn
    }

    /// One pass over shuffled mini-batches; returns the row-weighted mean loss.
    pub fn train_epoch(&mut self, model: &mut PsiModel, x: &Matrix, y: &[f64]) -> Result<f64> {
        check_data(model, x, y, self.config.task)?;
        let n = x.rows();
        let d = model.n_features();
        let elbo = self.config.elbo();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let xb = x.select_rows(idx);
            let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let mut masks = Matrix::zeros(idx.len(), d);
            for i in 0..idx.len() {
                let r = sample_removal_mask(d, self.config.removal, &mut self.rng);
                masks.row_mut(i).copy_from_slice(&r.to_f64());
            }
            self.masks_drawn += idx.len() as u64;
            let batch = Batch {
                x: &xb,
                y: &yb,
                masks: &masks,
            };
            let draws = sample_loss_draws(&batch, self.config.task, &mut self.rng);
            let mut g = Graph::new();
            let out = loss_graph(&mut g, model, &batch, &draws, &elbo).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "epoch {}, batch {b} (rows {:?}): {msg}",
                    self.epochs_done + 1,
                    &idx[..idx.len().min(8)]
                )),
                other => other,
            })?;
            total += g.scalar(out.loss) * idx.len() as f64;
            let grads = g.backward(out.loss)?;
            grads.accumulate_into(model.store_mut());
            self.optimizer.step(model.store_mut())?;
        }
        self.epochs_done += 1;
        Ok(total / n as f64)
    }
}

/// `E_x[f_d(x)]` over the rows with all features present.
pub fn mean_fd(model: &PsiModel, x: &Matrix) -> Result<Vec<f64>> {
    let pred = model.predict_f(x, &Matrix::filled(x.rows(), x.cols(), 1.0))?;
    let n = x.rows() as f64;
    Ok((0..x.cols())
        .map(|d| pred.column(d).iter().sum::<f64>() / n)
        .collect())
}

/// Fixed-epoch training; `observer` sees every epoch record as it is produced.
pub fn fit_with_observer(
    model: &mut PsiModel,
    x: &Matrix,
    y: &[f64],
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainTrace> {
    let mut trainer = Trainer::new(config.clone())?;
    check_data(model, x, y, config.task)?;
    let start = Instant::now();
    let mut diag_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d1a6);
    let mut diag: Vec<usize> = (0..x.rows()).collect();
    diag.shuffle(&mut diag_rng);
    diag.truncate(MEAN_FD_ROWS);
    diag.sort_unstable();
    let x_diag = x.select_rows(&diag);

    let mut trace = TrainTrace::default();
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        let loss = trainer.train_epoch(model, x, y)?;
        let record = EpochRecord {
            epoch,
            loss,
            mean_fd: mean_fd(model, &x_diag)?,
            seconds: t0.elapsed().as_secs_f64(),
        };
        observer(&record);
        trace.epochs.push(record);
    }
    trace.masks_drawn = trainer.masks_drawn();
    trace.seconds = start.elapsed().as_secs_f64();
    Ok(trace)
}

pub fn fit(model: &mut PsiModel, x: &Matrix, y: &[f64], config: &TrainConfig) -> Result<TrainTrace> {
    fit_with_observer(model, x, y, config, |_| {})
}
