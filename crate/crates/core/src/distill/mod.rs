//! Losses, optimizers, datasets and the staged training procedures for
//! bottlenecked students and their baselines.

pub mod data;
pub mod loss;
pub mod optim;
pub mod recipe;
pub mod train;

pub use data::{synthetic, DataSource, Dataset};
pub use loss::{ce_loss, kd_loss, softened_distribution};
pub use optim::{Optimizer, OptimizerKind};
pub use recipe::{expand, train_with_recipe, RecipeName, ScheduleOptions};
pub use train::{
    default_hooks, evaluate_accuracy, loss_and_grad, predict_labels, run_recipe, run_stage, train_teacher, write_log_csv,
    Classify, EpochLog, HookPoint, LossKind, LrDecay, Objective, StageSpec, TrainingRecipe,
};
