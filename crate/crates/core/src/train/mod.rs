//! Composite loss assembly, masked pretraining, the drift
//! intervention, and the training loop.

mod loss;
mod mask;
mod trainer;

pub use loss::{
    compose_total, drift_intervention_loss, drift_intervention_loss_on, extreme_beta_loss,
    hyp_alignment_loss, mse_on, smoothed_loss_floor, task_loss_classification,
    task_loss_classification_on, LossComponents, LossTerms, LossWeights,
};
pub use mask::{apply_mask, gen_mask, masked_fraction, MaskSpec};
pub use trainer::{
    embed_all, evaluate, mean_log_abs_a, prefix, prepare_classification, prepare_forecast,
    prepare_pretrain, train_loop, EpochLog, InputWindow, PreparedData, Target, TrainConfig, TrainLog,
};
