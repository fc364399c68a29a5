//! Self-distillation of the memory modules against the same base run with
//! full attention, plus the pre-training loop that produces a base.

mod config;
mod eval;
mod loss;
mod optim;
mod train;

pub use config::{lr_at, DistillConfig, Objective, Sampler};
pub use eval::{eval_csv, evaluate_distill, evaluate_modes, EvalRow};
pub use loss::{ce_loss, ce_loss_tape, kl_loss, kl_loss_tape};
pub use optim::{global_norm, AdamW};
pub use train::{Batch, Phase, StepMetrics, Trainer};
