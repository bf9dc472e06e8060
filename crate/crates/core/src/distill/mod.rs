//! Progressive distillation: teacher-forced block regression (Stage I),
//! then logit distillation with a cosine hidden-state term (Stage II).

mod eval;
mod loss;
mod optim;
mod train;

pub use eval::{agreement, block_losses, evaluate, heldout_sequences, EvalAccumulator, EvalReport};
pub use loss::{block_loss, block_loss_value, cos_loss, cos_loss_value, kd_loss, kd_loss_value, model_loss, model_loss_value};
pub use optim::{clip_scale, grad_norm, AdamWConfig, LrSchedule, Moments, OptimizerState};
pub use train::{
    lm_loss, next_token_targets, pretrain_teacher, run_progressive, run_stage1, run_stage2, stage1_objective, stage1_step,
    stage2_plan, stage2_step, trainable_names, DistillConfig, MetricsSink, PretrainConfig, ProgressiveOutcome,
    SegmentSwitch, Stage, Stage1Graph, StepOutcome, TrainMetrics,
};
