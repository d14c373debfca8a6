//! Run configuration in TOML with `[data]`, `[model]`, `[train]` and `[eval]` sections.
//!
//! ```toml
//! [data]
//! synth = 2            # or: path = "train.csv"
//! n = 8000
//! folds = 5
//! fold = 0
//!
//! [model]
//! architecture = "menn"
//! activation = "elu"
//!
//! [train]
//! beta_prime = 0.01    # or: beta = 1.0
//! epochs = 300
//! removal = { mode = "bernoulli", p = 0.5 }
//!
//! [eval]
//! z_list = [0.0, 2.0]
//! ```
//!
//! Every key is optional except the data source; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::elbo::Task;
use crate::error::{Error, Result};
use crate::eval::JDivergenceConfig;
use crate::menn::{Architecture, BandRounding, ModelConfig, SigmaInput};
use crate::nncore::{Activation, OptimizerKind};
use crate::traineng::{RemovalMode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Synthetic dataset id (1..=5), or 0 for the logit classification DGP.
    pub synth: Option<u8>,
    pub path: Option<PathBuf>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub task: Option<Task>,
    pub folds: Option<usize>,
    /// Held-out fold; the others are used for training.
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Option<Architecture>,
    pub activation: Option<Activation>,
    pub menn_hidden: Option<Vec<usize>>,
    pub embed_width: Option<usize>,
    pub head_hidden: Option<Vec<usize>>,
    pub menn2_hidden: Option<Vec<usize>>,
    pub menn2_embed: Option<usize>,
    pub sigma_hidden: Option<Vec<usize>>,
    pub sigma_input: Option<SigmaInput>,
    pub band_rounding: Option<BandRounding>,
    pub out_of_support: Option<f64>,
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub removal: Option<RemovalMode>,
    pub beta: Option<f64>,
    pub beta_prime: Option<f64>,
    pub epochs: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub z_list: Option<Vec<f64>>,
    pub j_divergence: Option<JDivergenceConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub output_dir: Option<PathBuf>,
}

/// The data source named by a config.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth { id: u8, n: usize, seed: u64 },
    Logit { n: usize, seed: u64 },
    Csv { path: PathBuf, task: Task },
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data_source()?;
        if self.train.beta.is_some() && self.train.beta_prime.is_some() {
            return Err(Error::Config("set either beta or beta_prime, not both".into()));
        }
        let folds = self.folds();
        if folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {folds}")));
        }
        if self.fold() >= folds {
            return Err(Error::Config(format!("fold {} out of range for {folds} folds", self.fold())));
        }
        if let Some(j) = &self.eval.j_divergence {
            j.validate()?;
        }
        // Feature count is unknown until the data is loaded; validate with a placeholder.
        self.train_config(3)?.validate()?;
        Ok(())
    }

    pub fn data_source(&self) -> Result<DataSource> {
        let d = &self.data;
        match (d.synth, &d.path) {
            (Some(_), Some(_)) => Err(Error::Config("set either data.synth or data.path, not both".into())),
            (None, None) => Err(Error::Config("data.synth or data.path is required".into())),
            (Some(0), None) => Ok(DataSource::Logit {
                n: d.n.unwrap_or(4000),
                seed: d.seed.unwrap_or(0),
            }),
            (Some(id), None) if id <= 5 => Ok(DataSource::Synth {
                id,
                n: d.n.unwrap_or(crate::datagen::DEFAULT_N),
                seed: d.seed.unwrap_or(0),
            }),
            (Some(id), None) => Err(Error::Config(format!("unknown synthetic dataset {id}"))),
            (None, Some(p)) => Ok(DataSource::Csv {
                path: p.clone(),
                task: d.task.unwrap_or_default(),
            }),
        }
    }

    pub fn task(&self) -> Task {
        match self.data_source() {
            Ok(DataSource::Logit { .. }) => Task::Classification,
            Ok(DataSource::Csv { task, .. }) => task,
            _ => Task::Regression,
        }
    }

    pub fn folds(&self) -> usize {
        self.data.folds.unwrap_or(5)
    }

    pub fn fold(&self) -> usize {
        self.data.fold.unwrap_or(0)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed.unwrap_or(0)
    }

    pub fn z_list(&self) -> Vec<f64> {
        self.eval.z_list.clone().unwrap_or_else(|| vec![0.0, 2.0])
    }

    pub fn model_config(&self, n_features: usize) -> ModelConfig {
        let m = &self.model;
        let mut c = ModelConfig::new(n_features);
        c.init_seed = m.init_seed.unwrap_or(self.seed());
        if let Some(v) = m.architecture {
            c.architecture = v;
        }
        if let Some(v) = m.activation {
            c.activation = v;
        }
        if let Some(v) = &m.menn_hidden {
            c.menn_hidden = v.clone();
        }
        if let Some(v) = m.embed_width {
            c.embed_width = v;
        }
        if let Some(v) = &m.head_hidden {
            c.head_hidden = v.clone();
        }
        if let Some(v) = &m.menn2_hidden {
            c.menn2_hidden = v.clone();
        }
        if let Some(v) = m.menn2_embed {
            c.menn2_embed = v;
        }
        if let Some(v) = &m.sigma_hidden {
            c.sigma_hidden = v.clone();
        }
        if let Some(v) = m.sigma_input {
            c.sigma_input = v;
        }
        if let Some(v) = m.band_rounding {
            c.band_rounding = v;
        }
        if let Some(v) = m.out_of_support {
            c.out_of_support = v;
        }
        c
    }

    pub fn train_config(&self, n_features: usize) -> Result<TrainConfig> {
        let t = &self.train;
        let d = TrainConfig::default();
        let beta = match (t.beta, t.beta_prime) {
            (Some(b), None) => b,
            (None, Some(bp)) => 2.0 * bp / n_features as f64,
            (None, None) => d.beta,
            (Some(_), Some(_)) => {
                return Err(Error::Config("set either beta or beta_prime, not both".into()))
            }
        };
        Ok(TrainConfig {
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            removal: t.removal.unwrap_or(d.removal),
            beta,
            epochs: t.epochs.unwrap_or(d.epochs),
            optimizer: t.optimizer.unwrap_or(d.optimizer),
            lr: t.lr.unwrap_or(d.lr),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            seed: self.seed(),
            task: self.task(),
        })
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
