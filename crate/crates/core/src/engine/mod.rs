//! Nested cross-validation (NACHOS) and deployment-model selection
//! (DACHOS): planning, selection at the phase barrier, aggregation, and
//! replay from metric tables.

pub mod plan;
pub mod replay;
pub mod report;
pub mod run;
pub mod stats;

use std::path::PathBuf;

use crate::checkpoint::StoreError;
use crate::scheduler::SchedulerError;
use crate::trainer::TrainerError;

pub use plan::{plan, plan_dachos, plan_nachos, Algorithm, Placeholder, TaskPlan};
pub use replay::{detect_algorithm, load_matrix, parse_matrix, replay, MatrixRow};
pub use report::{DachosReport, NachosFold, NachosReport, RunMetadata, RunReport, REPORT_FORMAT};
pub use run::{assemble, execute_run, report_from_log, LogStatus, PhaseCount, RunInfo, RunOutcome};
pub use stats::{fmt2, select_best, summarize_tests, ConfigSummary, SelectionResult, SummaryStats, ValidationMatrix};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{0}")]
    InvalidJob(String),
    #[error("need at least 2 test metrics for a standard error, got {0}")]
    TooFewValues(usize),
    #[error("nothing to select from")]
    EmptySelection,
    #[error("missing validation metric for config h{config} on fold {val_fold}")]
    MissingCell { config: usize, val_fold: usize },
    #[error("table shape error: {0}")]
    Shape(String),
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no result for task {0}")]
    Incomplete(String),
    #[error("run `{0}` not found in the metadata log")]
    UnknownRun(String),
    #[error("run `{0}` already exists in this store with different settings")]
    RunMismatch(String),
    #[error("unreadable run header: {0}")]
    CorruptRunInfo(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
}
