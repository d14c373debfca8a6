use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {},
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with coupled (L2) weight decay.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    moments: Vec<(Matrix, Matrix)>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {weight_decay}"
            )));
        }
        Ok(Optimizer {
            kind,
            lr,
            weight_decay,
            moments: Vec::new(),
            steps: 0,
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd {}, lr, 0.0)
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), lr, weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients, then clears them.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.gradient.is_finite()) {
            return Err(Error::Numeric(format!("gradient of parameter `{}`", p.name)));
        }
        if self.moments.len() != store.len() {
            self.moments = store
                .iter()
                .map(|(_, p)| {
                    let (r, c) = p.value.shape();
                    (Matrix::zeros(r, c), Matrix::zeros(r, c))
                })
                .collect();
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (lr, wd) = (self.lr, self.weight_decay);
        for (p, (m, v)) in store.params_mut().iter_mut().zip(self.moments.iter_mut()) {
            if p.frozen {
                p.gradient.fill(0.0);
                continue;
            }
            let value = p.value.data_mut();
            let grad = p.gradient.data();
            match self.kind {
                OptimizerKind::Sgd {} => {
                    for (w, g) in value.iter_mut().zip(grad) {
                        *w -= lr * (g + wd * *w);
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for (((w, g), m), v) in value
                        .iter_mut()
                        .zip(grad)
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let g = g + wd * *w;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            p.gradient.fill(0.0);
        }
        Ok(())
    }
}
