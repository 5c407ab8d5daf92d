//! Experiment harness for uncertainty-aware mixup distillation: dataset
//! I/O, training loops for every method and ablation, reports, and the
//! diagnostics computed from run artifacts.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod presets;
pub mod report;
pub mod trace;
pub mod train;

pub use config::{lr_at, Method, TrainConfig};
pub use error::{HarnessError, Result};
pub use report::ExperimentReport;
