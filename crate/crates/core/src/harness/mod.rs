//! Pipeline driver, evaluation metrics, configuration and reports.

pub mod commands;
pub mod config;
pub mod eval;
pub mod pipeline;
pub mod report;

pub use config::{BaseConfig, MoeSection, PipelineConfig, RouterSection};
pub use eval::{linear_probe, recall_at_k, Recalls, Retrieval};
pub use pipeline::{run_pipeline, run_pipeline_with, run_sweep, specialization_report, Event};
pub use report::{emit_report, read_report, EvalReport, LossTraces, PhaseTiming, Specialization};
