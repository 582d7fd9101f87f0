//! Configuration, datasets, checkpoints, diagnostics and the two-phase
//! training procedure.

pub mod artifacts;
pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod train;

pub use config::{Augmentation, DataSource, TrainConfig};
pub use data::{Dataset, Splits};
pub use train::{train_two_phase, MetricsRecord, TestSummary, TrainOutcome};
