//! Variational objectives for regression and binary classification.

mod loss;
pub mod special;
mod trunc;

pub use loss::{
    loss_graph, sample_loss_draws, v_class_loss, v_reg_loss, Batch, ElboConfig, LossDraws,
    LossOutput, Task,
};
pub use trunc::{
    cross_entropy_logit, marginal_stats, nll_gaussian, sample_logit, sample_logit_with_grad,
    trunc_arg, trunc_cdf, trunc_normalizer, trunc_stats, GaussianStats, TruncStats, PSI_FLOOR,
    U_EPS,
};
