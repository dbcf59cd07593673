//! End-to-end runs: initial training, selection rounds against the label
//! oracle, evaluation on a held-out target split, and persistence.

pub mod cli;
mod config;
mod eval;
mod run;
mod strategy;

pub use config::{mix, BudgetConfig, DatasetSource, RunConfig, Seeds, Strategy, TrainConfig, CONFIG_VERSION};
pub use eval::{evaluate, predict_labeled, write_predictions, Metrics, Prediction};
pub use run::{
    diversity_path, dump_selection, ldm_path, prepare, run_active_loop, train_phase, Environment, PhaseLog, Prepared,
    ReportMetrics, RoundReport, RunReport, RunStatus, REPORT_VERSION,
};
pub use strategy::{select, Selection};
