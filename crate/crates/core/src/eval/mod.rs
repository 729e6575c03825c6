//! Metrics, configuration, synthetic data and experiment orchestration.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod synthetic;

pub use config::{ExperimentConfig, Method};
pub use experiment::{run_experiment, Cell, CellResult};
pub use metrics::{label_rank, mrr_at_k, rank_items, recall_at_k, MetricAccumulator};
pub use report::{EvalReport, ReportRow, SummaryRow};
