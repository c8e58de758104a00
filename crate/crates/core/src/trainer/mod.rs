//! Units of training work and the backends that execute them.
//!
//! A [`TrainingTask`] names one training run: a configuration, the folds to
//! train on, and the fold to evaluate on. Backends implement [`Trainer`] and
//! must checkpoint after every epoch so an interrupted task resumes where it
//! stopped.

mod exec;
mod mock;
mod tiny;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointStore, StoreError};
use crate::hpspace::HyperparameterConfig;
use crate::manifest::Manifest;
use crate::partition::FoldAssignment;

pub use exec::ExecTrainer;
pub use mock::{fnv1a64, mock_canonical_string, mock_metric, MockTrainer};
pub use tiny::{TinyLearner, TinyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Inner cross-validation: evaluate on a validation fold.
    TrainVal,
    /// Outer loop: train the selected config, evaluate on the test fold.
    TrainTest,
    /// Deployment model on all folds; no held-out evaluation.
    FinalTrain,
}

impl TaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskMode::TrainVal => "train_val",
            TaskMode::TrainTest => "train_test",
            TaskMode::FinalTrain => "final_train",
        }
    }

    /// Relative cost used to order work longest-first.
    pub fn nominal_cost(&self) -> u8 {
        match self {
            TaskMode::FinalTrain => 2,
            TaskMode::TrainTest => 1,
            TaskMode::TrainVal => 0,
        }
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn slot(v: Option<usize>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// `run/{run_id}/cfg{j}/test{i|-}/val{m|-}`
pub fn canonical_task_id(
    run_id: &str,
    config: usize,
    test_fold: Option<usize>,
    val_fold: Option<usize>,
) -> String {
    format!(
        "run/{run_id}/cfg{config}/test{}/val{}",
        slot(test_fold),
        slot(val_fold)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTask {
    pub task_id: String,
    pub run_id: String,
    pub mode: TaskMode,
    pub config: HyperparameterConfig,
    pub train_folds: Vec<usize>,
    pub eval_fold: Option<usize>,
    /// Outer test fold this task belongs to, if any.
    pub test_fold: Option<usize>,
    pub epochs: u32,
    #[serde(default)]
    pub resume_from_epoch: u32,
    /// Trainer seed shared by every task of a run.
    pub seed: u64,
}

impl TrainingTask {
    /// Builds a task whose evaluation fold follows from the mode: the
    /// validation fold for `TrainVal`, the test fold for `TrainTest`, none
    /// for `FinalTrain`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        run_id: &str,
        mode: TaskMode,
        config: HyperparameterConfig,
        test_fold: Option<usize>,
        val_fold: Option<usize>,
        train_folds: Vec<usize>,
        epochs: u32,
        seed: u64,
    ) -> Result<Self, TrainerError> {
        let eval_fold = match mode {
            TaskMode::TrainVal => val_fold,
            TaskMode::TrainTest => test_fold,
            TaskMode::FinalTrain => None,
        };
        let task = Self {
            task_id: canonical_task_id(run_id, config.index, test_fold, val_fold),
            run_id: run_id.to_string(),
            mode,
            config,
            train_folds,
            eval_fold,
            test_fold,
            epochs,
            resume_from_epoch: 0,
            seed,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn val_fold(&self) -> Option<usize> {
        match self.mode {
            TaskMode::TrainVal => self.eval_fold,
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let invalid = |msg: String| Err(TrainerError::InvalidTask(format!("{}: {msg}", self.task_id)));
        if self.epochs == 0 {
            return invalid("epochs must be at least 1".into());
        }
        if self.resume_from_epoch > self.epochs {
            return invalid(format!(
                "resume epoch {} beyond {} epochs",
                self.resume_from_epoch, self.epochs
            ));
        }
        if self.train_folds.is_empty() {
            return invalid("no training folds".into());
        }
        if self.train_folds.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("training folds must be ascending and distinct".into());
        }
        match (self.mode, self.eval_fold) {
            (TaskMode::FinalTrain, Some(_)) => invalid("final training has no eval fold".into()),
            (TaskMode::TrainVal | TaskMode::TrainTest, None) => {
                invalid("evaluation fold required".into())
            }
            (_, Some(f)) if self.train_folds.contains(&f) => {
                invalid(format!("eval fold {f} is also a training fold"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    /// Accuracy in [0, 1]: validation metric, test metric, or (final
    /// training) the informational training accuracy.
    pub metric: f64,
    pub epochs_completed: u32,
    pub checkpoint_ref: String,
}

/// The deployable model produced by a final-training task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub artifact_ref: String,
    pub config: HyperparameterConfig,
    pub trained_on: Vec<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("invalid task {0}")]
    InvalidTask(String),
    #[error("no checkpoint for {task_id} at epoch {epoch} to resume from")]
    MissingResumeCheckpoint { task_id: String, epoch: u32 },
    #[error("trainer failed{}: {message}", last_epoch.map(|e| format!(" after epoch {e}")).unwrap_or_default())]
    Failure {
        message: String,
        last_epoch: Option<u32>,
    },
    #[error("trainer protocol violation: {0}")]
    Protocol(String),
    #[error("trainer timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("could not launch trainer: {0}")]
    Spawn(std::io::Error),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl TrainerError {
    /// Failures worth re-dispatching (possibly on another worker).
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            TrainerError::Failure { .. }
                | TrainerError::Protocol(_)
                | TrainerError::Timeout(_)
                | TrainerError::Spawn(_)
                | TrainerError::Store(_)
        )
    }
}

/// Data handed to backends. Paths are set when the manifest and fold table
/// exist on disk (external trainers need them).
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub manifest: Arc<Manifest>,
    pub folds: Arc<FoldAssignment>,
    pub manifest_path: Option<PathBuf>,
    pub folds_path: Option<PathBuf>,
}

pub struct TaskContext<'a> {
    pub data: Option<&'a TrainingData>,
    pub store: Option<&'a CheckpointStore>,
    /// Called after each epoch's checkpoint is durable.
    pub progress: &'a (dyn Fn(u32, f64) + Sync),
}

impl<'a> TaskContext<'a> {
    pub fn detached() -> TaskContext<'static> {
        TaskContext {
            data: None,
            store: None,
            progress: &|_, _| {},
        }
    }
}

pub trait Trainer: Send + Sync {
    fn name(&self) -> &str;

    fn run_task(&self, task: &TrainingTask, ctx: &TaskContext<'_>) -> Result<TaskResult, TrainerError>;
}

/// Shared resume precondition: the blob for the resume epoch must exist.
pub(crate) fn resume_blob(
    task: &TrainingTask,
    store: Option<&CheckpointStore>,
) -> Result<Option<Vec<u8>>, TrainerError> {
    if task.resume_from_epoch == 0 {
        return Ok(None);
    }
    let missing = || TrainerError::MissingResumeCheckpoint {
        task_id: task.task_id.clone(),
        epoch: task.resume_from_epoch,
    };
    let store = store.ok_or_else(missing)?;
    let r = CheckpointStore::blob_ref(&task.task_id, task.resume_from_epoch);
    store.load_model(&r).map(Some).map_err(|_| missing())
}

pub(crate) fn check_metric(metric: f64) -> Result<f64, TrainerError> {
    if (0.0..=1.0).contains(&metric) {
        Ok(metric)
    } else {
        Err(TrainerError::Protocol(format!("metric {metric} outside [0, 1]")))
    }
}
