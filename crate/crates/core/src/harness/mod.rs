//! Configuration, persistence, evaluation protocols and reports.

mod commands;
mod config;
mod fsio;
mod labels;
mod probe;
mod report;

pub use commands::{
    eval_file_name, evaluate_bundle, gen_data, load_checkpoint, load_weights, run_eval, run_evolve, train_final,
    train_with, EvalResult, EvolveSummary, GenDataSummary, TrainSummary,
};
pub use config::*;
pub use fsio::{load_dataset, load_labels, write_atomic, write_text};
pub use labels::{LabelCapability, LabelPurpose};
pub use probe::{
    accuracy, fine_tune, kmeans_probe, linear_probe, parity_split, train_linear_probe, LinearHead, ProbeConfig,
    Protocol,
};
pub use report::{
    best_record, correlation_csv, eval_results_csv, fitness_pairs, fitness_scatter_csv, heatmap_csv, pearson, ranks,
    read_eval, read_history, spearman, strategies, strategy_summary_csv, weights_trajectory_csv, write_report,
    ReportSummary,
};
