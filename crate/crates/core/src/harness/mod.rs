//! Configuration, named experiment suites, and report emission.

pub mod config;
pub mod experiments;
pub mod report;
pub mod svg;

pub use config::{ExperimentConfig, ExperimentKind};

pub use experiments::run_experiment;
pub use report::{emit_report, ReportBundle, Table};
