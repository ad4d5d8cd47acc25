//! Orchestration of the slide classification and image generation
//! workflows: run configuration, stage directories, timing and reports.

pub mod classify;
pub mod config;
pub mod error;
pub mod generation;
pub mod lock;
pub mod report;
pub mod timing;

pub use classify::{run_classification_pipeline, run_stage, ClassificationOutcome, TestReport, STAGES};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use generation::{generation_table, run_finetune, run_generation_pipeline, GenerationOutcome, GenerationRow, Variant};
pub use report::report;
pub use timing::{format_hms, StageTiming, TimingReport};
