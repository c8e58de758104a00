//! Task plans for both algorithms.
//!
//! A plan has two phases separated by a barrier. Phase one is fully known
//! up front. Phase two depends on selections made from phase-one results, so
//! it is carried as placeholders whose config is filled in at the barrier.

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::hpspace::HyperparameterConfig;
use crate::trainer::{TaskMode, TrainingTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Nachos,
    Dachos,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Nachos => "nachos",
            Algorithm::Dachos => "dachos",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nachos" => Ok(Algorithm::Nachos),
            "dachos" => Ok(Algorithm::Dachos),
            other => Err(EngineError::InvalidJob(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// A phase-two task awaiting its config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placeholder {
    pub mode: TaskMode,
    pub test_fold: Option<usize>,
    pub train_folds: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPlan {
    pub algorithm: Algorithm,
    pub run_id: String,
    pub k: usize,
    pub configs: Vec<HyperparameterConfig>,
    pub epochs: u32,
    pub seed: u64,
    pub phase1: Vec<TrainingTask>,
    pub phase2: Vec<Placeholder>,
}

impl TaskPlan {
    pub fn total(&self) -> usize {
        self.phase1.len() + self.phase2.len()
    }

    /// Phase-two task for `placeholder` trained with `config`.
    pub fn resolve(&self, placeholder: &Placeholder, config: &HyperparameterConfig) -> Result<TrainingTask, EngineError> {
        Ok(TrainingTask::new(
            &self.run_id,
            placeholder.mode,
            config.clone(),
            placeholder.test_fold,
            None,
            placeholder.train_folds.clone(),
            self.epochs,
            self.seed,
        )?)
    }

    pub fn config(&self, index: usize) -> Result<&HyperparameterConfig, EngineError> {
        self.configs
            .iter()
            .find(|c| c.index == index)
            .ok_or_else(|| EngineError::InvalidJob(format!("no config with index {index}")))
    }
}

fn check_configs(configs: &[HyperparameterConfig]) -> Result<(), EngineError> {
    if configs.is_empty() {
        return Err(EngineError::InvalidJob("n must be at least 1".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in configs {
        if !seen.insert(c.index) {
            return Err(EngineError::InvalidJob(format!("config index {} appears twice", c.index)));
        }
    }
    Ok(())
}

fn folds_except(k: usize, skip: &[usize]) -> Vec<usize> {
    (0..k).filter(|f| !skip.contains(f)).collect()
}

/// Nested cross-validation: for every test fold `i`, config `j` and inner
/// validation fold `m != i`, train on the remaining `k - 2` folds. Then one
/// test training per `i` on all folds but `i`.
pub fn plan_nachos(
    run_id: &str,
    k: usize,
    configs: &[HyperparameterConfig],
    epochs: u32,
    seed: u64,
) -> Result<TaskPlan, EngineError> {
    if k < 3 {
        return Err(EngineError::InvalidJob(format!(
            "nachos needs k >= 3 so inner training keeps at least one fold (got k={k})"
        )));
    }
    check_configs(configs)?;
    let mut phase1 = Vec::with_capacity(k * (k - 1) * configs.len());
    for i in 0..k {
        for config in configs {
            for m in folds_except(k, &[i]) {
                phase1.push(TrainingTask::new(
                    run_id,
                    TaskMode::TrainVal,
                    config.clone(),
                    Some(i),
                    Some(m),
                    folds_except(k, &[i, m]),
                    epochs,
                    seed,
                )?);
            }
        }
    }
    let phase2 = (0..k)
        .map(|i| Placeholder {
            mode: TaskMode::TrainTest,
            test_fold: Some(i),
            train_folds: folds_except(k, &[i]),
        })
        .collect();
    Ok(TaskPlan {
        algorithm: Algorithm::Nachos,
        run_id: run_id.to_string(),
        k,
        configs: configs.to_vec(),
        epochs,
        seed,
        phase1,
        phase2,
    })
}

/// Deployment selection: plain k-fold validation of every config, then one
/// final training of the winner on all folds.
pub fn plan_dachos(
    run_id: &str,
    k: usize,
    configs: &[HyperparameterConfig],
    epochs: u32,
    seed: u64,
) -> Result<TaskPlan, EngineError> {
    if k < 2 {
        return Err(EngineError::InvalidJob(format!("dachos needs k >= 2 (got k={k})")));
    }
    check_configs(configs)?;
    let mut phase1 = Vec::with_capacity(k * configs.len());
    for config in configs {
        for m in 0..k {
            phase1.push(TrainingTask::new(
                run_id,
                TaskMode::TrainVal,
                config.clone(),
                None,
                Some(m),
                folds_except(k, &[m]),
                epochs,
                seed,
            )?);
        }
    }
    Ok(TaskPlan {
        algorithm: Algorithm::Dachos,
        run_id: run_id.to_string(),
        k,
        configs: configs.to_vec(),
        epochs,
        seed,
        phase1,
        phase2: vec![Placeholder {
            mode: TaskMode::FinalTrain,
            test_fold: None,
            train_folds: (0..k).collect(),
        }],
    })
}

pub fn plan(
    algorithm: Algorithm,
    run_id: &str,
    k: usize,
    configs: &[HyperparameterConfig],
    epochs: u32,
    seed: u64,
) -> Result<TaskPlan, EngineError> {
    match algorithm {
        Algorithm::Nachos => plan_nachos(run_id, k, configs, epochs, seed),
        Algorithm::Dachos => plan_dachos(run_id, k, configs, epochs, seed),
    }
}
