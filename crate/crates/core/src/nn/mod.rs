//! Feed-forward network engine: GELU MLP with inverted dropout, softmax
//! cross-entropy (hard or neighbour-smoothed targets), exact backprop,
//! Adam with decoupled weight decay, and early stopping on validation NLL.

mod adam;
mod mlp;
mod train;

pub use adam::{adam_step, AdamState};
pub use mlp::{
    backward, cross_entropy, forward, forward_batch, gelu, gelu_derivative, init_params, operator_widths,
    predict_proba, smoothed_targets, softmax, softmax_in_place, ForwardCache, Gradients, Layer, MlpParams, Mode,
    HIDDEN_WIDTHS,
};
pub use train::{
    dataset_nll, train, train_from, Dataset, EpochRecord, TrainConfig, TrainOutcome, DEFAULT_SMOOTHING_EPS,
    IMPROVEMENT_THRESHOLD,
};
