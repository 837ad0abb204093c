//! The DTLight policy: teacher pre-training, distillation, adapter fine-tuning and evaluation.

pub mod buffer;
pub mod eval;
pub mod loss;
pub mod policy;
pub mod train;

pub use buffer::ReplayBuffer;
pub use eval::{evaluate_behavior, evaluate_dt, evaluate_policies, EpisodeOutcome};
pub use loss::{dt_loss, kd_loss, soft_cross_entropy, DtLoss, KdLoss, KdWeights};
pub use policy::{choose_action, select_action, ActionMode, Context, DtAgent, RtgSchedule};
pub use train::{
    decile_means, distill, finetune_online, greedy_agreement, holdout_windows, loss_and_grads, sized_for,
    train_teacher, DistillOutcome, DtTrainSettings, FinetuneLog, FinetuneSettings, LossReport, TrainLog, Trainer,
};
