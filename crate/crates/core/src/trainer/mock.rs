use std::thread;
use std::time::Duration;

use super::{resume_blob, TaskContext, TaskResult, Trainer, TrainerError, TrainingTask};

const FNV_OFFSET_BASIS: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

/// `{seed}|{config}|{mode}|{eval fold or -}|{train folds}|{epochs}`
pub fn mock_canonical_string(seed: u64, task: &TrainingTask, epochs: u32) -> String {
    let folds = task
        .train_folds
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let eval = task
        .eval_fold
        .map_or_else(|| "-".to_string(), |f| f.to_string());
    format!(
        "{seed}|{}|{}|{eval}|{folds}|{epochs}",
        task.config.index, task.mode
    )
}

/// FNV-1a of the canonical task string over 2^64. A pure function of task
/// identity, so resumed and uninterrupted runs agree exactly.
pub fn mock_metric(seed: u64, task: &TrainingTask) -> f64 {
    metric_at(seed, task, task.epochs)
}

fn metric_at(seed: u64, task: &TrainingTask, epochs: u32) -> f64 {
    fnv1a64(mock_canonical_string(seed, task, epochs).as_bytes()) as f64 / 18446744073709551616.0
}

/// Deterministic stand-in for training. Optionally sleeps per epoch to model
/// task duration.
#[derive(Debug, Clone, Default)]
pub struct MockTrainer {
    pub epoch_delay: Duration,
}

impl MockTrainer {
    pub fn with_epoch_delay(epoch_delay: Duration) -> Self {
        Self { epoch_delay }
    }
}

impl Trainer for MockTrainer {
    fn name(&self) -> &str {
        "mock"
    }

    fn run_task(&self, task: &TrainingTask, ctx: &TaskContext<'_>) -> Result<TaskResult, TrainerError> {
        task.validate()?;
        resume_blob(task, ctx.store)?;
        let mut checkpoint_ref = match ctx.store {
            Some(_) if task.resume_from_epoch > 0 => {
                crate::checkpoint::CheckpointStore::blob_ref(&task.task_id, task.resume_from_epoch)
            }
            _ => String::new(),
        };
        for epoch in task.resume_from_epoch + 1..=task.epochs {
            if !self.epoch_delay.is_zero() {
                thread::sleep(self.epoch_delay);
            }
            let metric = metric_at(task.seed, task, epoch);
            if let Some(store) = ctx.store {
                let blob = format!("mock epoch={epoch} metric={metric}\n");
                checkpoint_ref = store.save_model(&task.task_id, epoch, blob.as_bytes())?;
            }
            (ctx.progress)(epoch, metric);
        }
        Ok(TaskResult {
            task_id: task.task_id.clone(),
            metric: mock_metric(task.seed, task),
            epochs_completed: task.epochs,
            checkpoint_ref,
        })
    }
}
