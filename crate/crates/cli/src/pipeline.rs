//! Data loading and fold selection shared by the commands.

use anyhow::{bail, Context, Result};
use psi_core::config::{DataSource, RunConfig};
use psi_core::csvio::load_dataset;
use psi_core::datagen::{gen_logit, gen_synth, kfold_split, standardize_fit_apply, DatasetTabular, Standardizer};
use std::path::{Path, PathBuf};

pub struct Split {
    /// Standardized training folds.
    pub train: DatasetTabular,
    /// Held-out fold in original units.
    pub heldout: DatasetTabular,
    pub standardizer: Standardizer,
}

/// Resolves a CSV path in a config relative to the config file's directory.
pub fn resolve(config_path: &Path, data: &Path) -> PathBuf {
    if data.is_absolute() {
        data.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(data)
    }
}

pub fn load_source(config: &RunConfig, config_path: &Path) -> Result<DatasetTabular> {
    Ok(match config.data_source()? {
        DataSource::Synth { id, n, seed } => gen_synth(id, n, seed)?,
        DataSource::Logit { n, seed } => gen_logit(n, seed)?,
        DataSource::Csv { path, task } => {
            let path = resolve(config_path, &path);
            if !path.is_file() {
                bail!("dataset file {} does not exist", path.display());
            }
            load_dataset(&path, task).with_context(|| format!("reading {}", path.display()))?
        }
    })
}

/// Splits into folds and standardizes on the training rows only.
pub fn split(config: &RunConfig, data: &DatasetTabular, seed: u64) -> Result<Split> {
    let folds = kfold_split(data.len(), config.folds(), seed)?;
    let (train_idx, test_idx) = &folds[config.fold()];
    let (train, standardizer) = standardize_fit_apply(&data.subset(train_idx))?;
    Ok(Split {
        train,
        heldout: data.subset(test_idx),
        standardizer,
    })
}
