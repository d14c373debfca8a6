//! Probabilistic Shapley inference.
//!
//! Jointly trains an additive predictive model `f(x) = Σ_d f_d(x)` and an
//! input-conditional Gaussian distribution `N(f_d(x), σ_d²(x))` over each
//! feature's Shapley attribution. The pieces:
//!
//! - [`nncore`]: matrices, a reverse-mode gradient tape, dense layers, optimizers.
//! - [`menn`]: the masked embedding network with baseline substitution, and
//!   the plain feed-forward ablation.
//! - [`shapley`]: exact Shapley enumeration and the stochastic Shapley-KL estimator.
//! - [`elbo`]: Gaussian and truncated-normal closed forms and the training objectives.
//! - [`traineng`]: mini-batch training with random feature removal.
//! - [`datagen`]: synthetic data-generating processes, standardization, k-fold splits.
//! - [`eval`]: RMSE, PR-AUC, probabilistic attributions, attribution PRF and J-divergence.
//! - [`checkpoint`], [`config`], [`csvio`]: on-disk formats.

pub mod checkpoint;
pub mod config;
pub mod csvio;
pub mod datagen;
pub mod elbo;
pub mod error;
pub mod eval;
pub mod menn;
pub mod nncore;
pub mod shapley;
pub mod traineng;

pub use error::{Error, Result};
