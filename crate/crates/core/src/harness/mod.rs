//! Dataset generation, training, evaluation, ablation, and reporting —
//! the machinery behind the CLI.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod report;
pub mod train;

pub use ablate::{ablate, target_mean, write_ablation_csv, AblationRow, Suite};
pub use config::{LambdaSetting, RunConfig};
pub use eval::{evaluate, evaluate_split, write_metrics_csv, DomainEval};
pub use train::{build_models, models_from_checkpoint, train, LossRow, TrainOutcome, TrainedModels};
