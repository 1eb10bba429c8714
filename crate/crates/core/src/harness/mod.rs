//! Experiment orchestration: configuration, training, evaluation, ablation
//! grids and reports.

pub mod ablation;
pub mod config;
pub mod metrics;
pub mod report;
pub mod train;

pub use config::{ExperimentConfig, Toggles};
pub use metrics::{MetricsRecord, METRICS_HEADER};
pub use train::{evaluate, load_data, train, train_with, EvalData, Evaluation, TrainData, TrainHooks, TrainOutcome, UnlabeledImages};
pub use ablation::{run_ablation, AblationGrid, AblationReport, AblationRow, CellStatus};
pub use report::{load_runs, parse_runs, render_report, report, run_experiment, ReportBytes, ReportFiles, RunFiles};
