//! Task dispatch: a manager that owns the queue and the metadata log, and
//! workers that pull one task per free slot.

pub mod makespan;
pub mod manager;
pub mod protocol;
pub mod worker;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::{CheckpointStore, StoreError};
use crate::trainer::{TaskContext, TaskResult, Trainer, TrainerError, TrainingData, TrainingTask};

pub use makespan::{lpt_order, list_schedule, makespan_report, DispatchTrace, MakespanReport, TraceEntry};
pub use manager::{DispatchProgress, Manager, ManagerConfig, ProgressHook};
pub use protocol::{ManagerMsg, WorkerMsg};
pub use worker::{run_worker, FaultInjection, TcpWorkerLink, WorkerError, WorkerLink, WorkerOptions};

#[derive(Debug, thiserror::Error)]
pub enum SchedulerError {
    #[error("every worker is gone with {remaining} task(s) unfinished")]
    AllWorkersLost { remaining: usize },
    #[error("{} task(s) failed after retries: {}", .0.len(), summarize_failures(.0))]
    TasksFailed(Vec<(String, String)>),
    #[error("task id {0} appears twice")]
    DuplicateTask(String),
    #[error("{0}")]
    InvalidTask(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("bad worker pool: {0}")]
    Pool(String),
}

fn summarize_failures(failures: &[(String, String)]) -> String {
    failures
        .iter()
        .map(|(id, msg)| format!("{id} ({msg})"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Results of one phase keyed by task id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseOutcome {
    pub results: BTreeMap<String, TaskResult>,
    /// Tasks trained during this call.
    pub executed: usize,
    /// Tasks whose results came from the log.
    pub skipped: usize,
}

/// Anything that can run a batch of independent tasks to completion.
pub trait TaskExecutor {
    fn execute(&mut self, run_id: &str, phase: usize, tasks: Vec<TrainingTask>) -> Result<PhaseOutcome, SchedulerError>;

    /// Where run records go, if anywhere.
    fn store(&self) -> Option<&CheckpointStore>;
}

/// Runs tasks one after another on the calling thread, without a log.
pub struct InlineExecutor {
    trainer: Box<dyn Trainer>,
    data: Option<TrainingData>,
}

impl InlineExecutor {
    pub fn new(trainer: Box<dyn Trainer>, data: Option<TrainingData>) -> Self {
        Self { trainer, data }
    }
}

impl TaskExecutor for InlineExecutor {
    fn execute(&mut self, _run_id: &str, _phase: usize, tasks: Vec<TrainingTask>) -> Result<PhaseOutcome, SchedulerError> {
        let mut outcome = PhaseOutcome::default();
        let mut failed = Vec::new();
        for task in tasks {
            let ctx = TaskContext {
                data: self.data.as_ref(),
                store: None,
                progress: &|_, _| {},
            };
            match self.trainer.run_task(&task, &ctx) {
                Ok(r) => {
                    outcome.executed += 1;
                    outcome.results.insert(task.task_id.clone(), r);
                }
                Err(TrainerError::InvalidTask(msg)) => return Err(SchedulerError::InvalidTask(msg)),
                Err(e) => failed.push((task.task_id.clone(), e.to_string())),
            }
        }
        if failed.is_empty() {
            Ok(outcome)
        } else {
            Err(SchedulerError::TasksFailed(failed))
        }
    }

    fn store(&self) -> Option<&CheckpointStore> {
        None
    }
}

/// A worker the manager connects to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub worker_id: String,
    pub endpoint: String,
    pub slots: usize,
}

/// Where workers come from: `local:G` in-process workers, or a pool file
/// listing `worker_id host:port slots` per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkerPool {
    Local(usize),
    Remote(Vec<PoolEntry>),
}

impl WorkerPool {
    pub fn total_slots(&self) -> usize {
        match self {
            WorkerPool::Local(g) => *g,
            WorkerPool::Remote(entries) => entries.iter().map(|e| e.slots).sum(),
        }
    }

    pub fn parse_pool_file(text: &str) -> Result<Self, SchedulerError> {
        let mut entries: Vec<PoolEntry> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| SchedulerError::Pool(format!("line {}: {m}", n + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let (id, endpoint, slots) = match fields.as_slice() {
                [id, ep] => (*id, *ep, 1),
                [id, ep, s] => (*id, *ep, s.parse().map_err(|_| bad("slots must be a positive integer"))?),
                _ => return Err(bad("expected `worker_id host:port [slots]`")),
            };
            if slots == 0 {
                return Err(bad("slots must be a positive integer"));
            }
            if !endpoint.contains(':') {
                return Err(bad("endpoint must be host:port"));
            }
            if entries.iter().any(|e| e.worker_id == id) {
                return Err(bad(&format!("duplicate worker id {id}")));
            }
            entries.push(PoolEntry {
                worker_id: id.to_string(),
                endpoint: endpoint.to_string(),
                slots,
            });
        }
        if entries.is_empty() {
            return Err(SchedulerError::Pool("no workers listed".into()));
        }
        Ok(WorkerPool::Remote(entries))
    }

    /// `local:G`, or a path to a pool file.
    pub fn resolve(spec: &str, base: &Path) -> Result<Self, SchedulerError> {
        if let Ok(pool) = spec.parse() {
            return Ok(pool);
        }
        let path = base.join(spec);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| SchedulerError::Pool(format!("{}: {e}", path.display())))?;
        Self::parse_pool_file(&text)
    }
}

impl FromStr for WorkerPool {
    type Err = SchedulerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let g = s
            .strip_prefix("local:")
            .ok_or_else(|| SchedulerError::Pool(format!("`{s}` is not local:G")))?;
        match g.parse::<usize>() {
            Ok(g) if g > 0 => Ok(WorkerPool::Local(g)),
            _ => Err(SchedulerError::Pool(format!("`{s}`: G must be a positive integer"))),
        }
    }
}

impl fmt::Display for WorkerPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkerPool::Local(g) => write!(f, "local:{g}"),
            WorkerPool::Remote(entries) => write!(f, "{} remote worker(s)", entries.len()),
        }
    }
}
