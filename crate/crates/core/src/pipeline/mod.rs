//! Orchestration of the dual-teacher self-training flow: manifests,
//! bootstrapping, cross-validation and the end-to-end run.

mod bootstrap;
mod config;
mod crossval;
pub mod manifest;
mod run;

pub use bootstrap::{bootstrap_pancreas_labels, compose_bootstrap, BootstrapReport};
pub use config::{Ablation, EvalConfig, ModelConfigs, PipelineConfig, PIPELINE_CONFIG_VERSION};
pub use crossval::{assign_folds, crossval_split, fold_ids};
pub use manifest::{CaseRecord, DatasetManifest, Provenance};
pub use run::{
    run_ablations, run_dir_name, run_pipeline, Audits, CaseScore, DatasetSummary, FoldAudit,
    InitAudit, ModelRecord, PseudoCase, RowResult, RunOutcome, RunReport, TaEffect,
    RUN_REPORT_FILE, RUN_REPORT_VERSION, TIMINGS_FILE,
};
