//! Monte-Carlo experiments driven by a plain-text configuration.

mod config;
mod harness;
mod slope;
mod tables;

pub use self::config::{
    parse_config, parse_config_str, DesignName, Direction, Estimator, ExperimentConfig,
    MethodConfig, OutputConfig, ProblemConfig, ProblemFamily, RunConfig, SketchKind, Solver,
    XStarRule,
};
pub use self::harness::{
    build_oracle, format_named_matrices, oracle_matrices, run_experiment,
    run_experiment_with_threads, write_outputs, ExperimentReport, OracleBundle,
};
pub use self::slope::{fit_loglog_slope, slope_from_csv, DEFAULT_TAIL};
pub use self::tables::{
    parse_aggregate_csv, parse_summary_csv, write_aggregate_csv, write_summary_csv, AggregateRow,
    SummaryRow, AGGREGATE_COLUMNS, SUMMARY_COLUMNS,
};

use thiserror::Error;

/// Errors surfaced by the experiment layer, each mapped to a process exit
/// code by [`ExperimentError::exit_code`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("config error: {key}{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config {
        key: String,
        line: Option<usize>,
        message: String,
    },

    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("{diverged} of {total} replications diverged")]
    Divergence { diverged: usize, total: usize },

    #[error("malformed CSV: {0}")]
    Csv(String),

    #[error(transparent)]
    Core(#[from] crate::Error),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Core(_) => 2,
            Self::Divergence { .. } => 3,
            Self::Io { .. } | Self::Csv(_) => 4,
        }
    }
}
