//! Gradient-masked fine-tuning for small dense networks.
//!
//! Each optimizer step updates only a subset of the backbone parameters (the
//! "child network"): either a fresh Bernoulli mask per step with kept
//! gradients rescaled by 1/p, or a fixed mask of the coordinates with the
//! largest empirical Fisher information at the pretrained weights. Task head
//! parameters are always updated.

// Validation uses `!(x > 0.0)` so that NaN is rejected along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fisher;
pub mod fsio;
pub mod harness;
pub mod masking;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod params;
pub mod special;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use fisher::{empirical_fisher_diag, empirical_fisher_diag_capped, FisherDiag};
pub use masking::{
    apply_mask, bernoulli_mask, child_count, fisher_topk_mask, jaccard, lowest_fisher_mask,
    prune_params, random_fixed_mask, topk_layer_mask, GradMask, HeadSet, MaskKind,
};
pub use model::{
    init_params, Activation, Checkpoint, Dataset, Labels, Metric, Model, ModelSpec, OutputKind,
};
pub use optim::{child_tuning_adam_step, clip_global_norm, lr_schedule, AdamState, OptimConfig};
pub use params::{ParamEntry, ParamVector};
pub use tensor::{finite_diff_grad, forward_backward, FdStep, Graph, Likelihood, Node, Tensor};
