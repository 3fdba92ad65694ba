//! Desk-scale reference trainer, analyses and plots for gwa-core.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod plots;
pub mod report;
pub mod trainer;

pub use config::{Activation, DatasetSpec, ModelKind, OptimizerKind, TrainerConfig};
pub use data::{prepare, Dataset, Splits};
pub use error::HarnessError;
pub use report::RunReport;
pub use trainer::{train, train_to_dir, train_with_trace, TrainOutput, Trainer};
