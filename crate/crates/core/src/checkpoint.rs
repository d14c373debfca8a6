//! Version-tagged JSON checkpoints.
//!
//! Parameters are stored by name as flat row-major arrays. Floats are written
//! in shortest round-trip form, so `load(save(m))` reproduces every bit.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::datagen::Standardizer;
use crate::elbo::Task;
use crate::error::{Error, Result};
use crate::menn::{MaskSpec, ModelConfig, PsiModel};
use crate::nncore::Matrix;

pub const FORMAT: &str = "psi-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    /// Mask layout of the embedding network (informational; rebuilt from `model`).
    pub mask_spec: MaskSpec,
    pub task: Task,
    pub params: Vec<StoredParam>,
    pub phi0: f64,
    pub log_sigma0: f64,
    pub standardizer: Option<Standardizer>,
    pub seed: u64,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn from_model(
        model: &PsiModel,
        task: Task,
        standardizer: Option<Standardizer>,
        seed: u64,
        config_hash: impl Into<String>,
    ) -> Self {
        let params = model
            .store()
            .iter()
            .map(|(_, p)| StoredParam {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model: model.config().clone(),
            mask_spec: model.config().menn1_spec(),
            task,
            params,
            phi0: model.phi0(),
            log_sigma0: model.store().value(model.log_sigma0_id()).get(0, 0),
            standardizer,
            seed,
            config_hash: config_hash.into(),
        }
    }

    /// Rebuilds the model and loads every stored parameter.
    pub fn to_model(&self) -> Result<PsiModel> {
        let mut model = PsiModel::new(self.model.clone())?;
        let expected: BTreeSet<String> = model.store().iter().map(|(_, p)| p.name.clone()).collect();
        let stored: BTreeSet<String> = self.params.iter().map(|p| p.name.clone()).collect();
        if expected != stored {
            let missing: Vec<_> = expected.difference(&stored).collect();
            let extra: Vec<_> = stored.difference(&expected).collect();
            return Err(Error::Format(format!(
                "checkpoint parameters do not match the model (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for p in &self.params {
            let value = Matrix::from_vec(p.rows, p.cols, p.data.clone())
                .map_err(|_| Error::Format(format!("parameter `{}` has a bad length", p.name)))?;
            if !value.is_finite() {
                return Err(Error::Format(format!("parameter `{}` is not finite", p.name)));
            }
            model.store_mut().load_value(&p.name, value)?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint JSON: {e}")))?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = raw.get("version").and_then(serde_json::Value::as_u64);
        if version != Some(u64::from(VERSION)) {
            return Err(Error::Format(format!(
                "checkpoint version {version:?} is not supported (expected {VERSION})"
            )));
        }
        serde_json::from_value(raw).map_err(|e| Error::Format(format!("checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
