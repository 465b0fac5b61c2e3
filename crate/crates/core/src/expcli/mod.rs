//! Experiment driver: configs, run directories, stages, ablations and
//! reports.

pub mod ablation;
pub mod config;
pub mod record;
pub mod report;
pub mod runner;

pub use ablation::{run_ablation, Factor};
pub use config::{parse_override_args, ExperimentConfig};
pub use record::ExperimentRecord;
pub use report::{collect_records, render_report};
pub use runner::Experiment;
