//! Run configuration and orchestration of the two-stage pipeline:
//! `gen → train (stage 1, stage 2) → eval → probe → saliency → report`.
//!
//! Every command reads one [`RunConfig`] and works inside a fixed
//! [`Workdir`] layout (`cohort/`, `checkpoints/`, `logs/`, `reports/`).

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use commands::{
    cmd_eval, cmd_gen, cmd_pipeline, cmd_probe, cmd_saliency, cmd_train_stage1, cmd_train_stage2, ProbeReport,
    ProbeRow, SaliencyReport, SaliencyRow, Variant,
};
pub use config::{RunConfig, Workdir, WORKDIR_ENV};
pub use error::{PipelineError, Result};
pub use report::{cmd_report, SummaryRow};
