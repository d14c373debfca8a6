//! Masked embedding network and the feed-forward ablation baseline.

mod mask;
mod model;

pub use mask::{build_mask_stack, build_mask_stack_for_inputs, BandRounding, MaskSpec, MaskStack};
pub use model::{
    masks_to_matrix, substitute_baselines, Architecture, GraphForward, ModelConfig, Prediction,
    PsiModel, RemovalMask, SigmaInput, SIGMA_FLOOR,
};
