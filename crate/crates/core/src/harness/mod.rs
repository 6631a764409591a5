//! Experiment configs, data generation, runs and artifact output.
//!
//! A run directory holds `config.json`, the observed cloud (`observed.csv`
//! or a raw `observed.f32` image stack), `ground_truth/`, initial and final
//! particles, `snapshots/`, `run_log.csv` (with wall times in `timing.csv`), `summary.json` and plot data
//! under `plots/`.

mod compare;
mod config;
mod diagnostics;
mod run;

pub use compare::{compare_losses, write_compare_csv, CompareRow};
pub use config::{
    paper_nanocluster_initial, paper_nanocluster_truth, paper_onedim_truth, paper_protein_laws, CompareConfig, DiagnosticsConfig,
    ExperimentConfig, ExperimentKind, MapdtoConfig, ModelConfig, OperatorConfig, PlotConfig,
};
pub use diagnostics::{run_diagnostics, INTEGRANDS};
pub use run::{
    generate_observed, initial_ensemble, push_forward, resolve_discrepancy, run_experiment, write_kde_csv, write_run_log, ObservedData,
    Problem, RunMetrics, RunSummary,
};
