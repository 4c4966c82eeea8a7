//! Orchestration of the two-stage experiment: configuration, run ledger,
//! the sweep pipeline and image previews.

pub mod config;
pub mod error;
pub mod ledger;
pub mod pipeline;
pub mod quicklook;

pub use config::{ExperimentConfig, Method, Training};
pub use error::CliError;
pub use pipeline::{run_all, Evaluation, Stage};
