//! Fine-tuning a pretrained autoregressive model for outline-then-fill
//! decoding.
//!
//! Every step samples each pair's target from the raw or the distilled
//! caption, sends a growing share `p_g` of the pairs through the outliner and
//! filler layouts and the rest through the autoregressive and one-shot
//! layouts, averages the per-kind losses and takes one optimizer step on the
//! accumulated gradients. The teacher is trained by the same loop with
//! `p_g = 0` and raw targets only.

mod curriculum;
mod distill;
mod examples;
mod trainer;

pub use curriculum::{curriculum_rate, hybrid_sample, CurriculumSchedule};
pub use distill::{generate_distillation_set, DistilledTarget, DISTILL_BEAM};
pub use examples::{
    build_training_batch, example_loss, layout, loss_for, outliner_target, pad_to_groups, ExampleKind, Layout,
    TrainPair, TrainingExample,
};
pub use trainer::{load_teacher, train_saic, EpochSummary, LogRow, TrainConfig, TrainMode, Trainer};
