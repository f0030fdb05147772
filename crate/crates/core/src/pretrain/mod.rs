mod checkpoint;
mod loss;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, RngState};
pub use loss::{combined_loss, decoder_targets, mlm_loss, weak_decoder_loss, LossParts};
pub use optim::{adam_step, global_grad_norm, lr_at, AdamState, OptimConfig, StepStats};
pub use trainer::{
    batch_indices, parse_metrics, pretrain, step_seed, LossRecord, PretrainConfig, PretrainOutcome, BEST_CHECKPOINT,
    METRICS_FILE, METRICS_HEADER,
};
