//! Multi-label training: loss, AdamW, the learning-rate schedule, the
//! epoch loop with best-validation selection, and checkpoint files.

mod checkpoint;
mod fit;
mod optim;

pub use checkpoint::{write_atomic, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use fit::{fit, mean_auroc, predict_all, EpochLog, Example, FitOutcome, TrainConfig};
pub use optim::{adamw_step, cosine_warmup_lr, AdamState, AdamW, GroupRates};
