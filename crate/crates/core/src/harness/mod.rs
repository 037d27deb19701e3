//! Synthetic tasks, training, evaluation, pruning, analysis and the CLI.

pub mod analyze;
pub mod cli;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod task;
pub mod train;

pub use analyze::analyze;
pub use config::RunConfig;
pub use eval::{evaluate, prune_sweep, EvalResult, PruneRow};
pub use gradcheck::{grad_check, GradCheckReport};
pub use task::{Example, TaskKind, TaskSpec};
pub use train::{inverse_sqrt_lr, train, LogRow, TrainConfig, TrainOutcome};
