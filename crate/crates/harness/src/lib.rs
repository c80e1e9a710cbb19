//! Experiment runner for `timesteer`: builds corpora and models per seed,
//! runs the steering experiments and writes CSV, Markdown, TSV and JSON
//! reports.

#![forbid(unsafe_code)]

pub mod analysis;
pub mod config;
pub mod error;
pub mod experiments;
pub mod report;
pub mod select;
pub mod stats;
pub mod workbench;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{HarnessError, Result};
pub use experiments::{regenerate_rows, run_experiment, run_on};
pub use report::{ExperimentReport, Row};
pub use workbench::Workbench;
