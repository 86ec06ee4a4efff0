//! Evaluation diagnostics and the experiment runner.

mod eval;
mod experiment;
pub mod svg;

pub use eval::{
    embed, evaluate_accuracy, margin_from_embeddings, margin_statistic, silhouette_score, target_alignment, Estimate,
};
pub use experiment::{
    prepare_domains, read_metrics_column, run_experiment, run_experiment_with, run_id, run_single, run_single_with_state, write_metrics_csv,
    write_report_csv, DomainSplit, ExperimentConfig, Report, RunResult, Summary, METRICS_HEADER, OUT_DIR_ENV,
};
