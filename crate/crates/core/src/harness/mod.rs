//! Configuration, training, evaluation, checkpoints and ablations.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod output;
pub mod train;

pub use ablate::{ablate, AblationAxis, AblationReport, AblationRow};
pub use checkpoint::Checkpoint;
pub use config::{DataConfig, OptimConfig, RunConfig, Switches};
pub use train::{
    evaluate, heuristic_baseline, load_data, moving_average, train, train_with_progress, Datasets, EpochRecord, StepRecord,
    TrainOutcome,
};
