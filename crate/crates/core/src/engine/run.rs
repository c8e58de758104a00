//! Live runs and reconstruction of reports from the metadata log.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::plan::{plan, Algorithm, TaskPlan};
use super::report::{DachosReport, NachosFold, NachosReport, RunMetadata, RunReport, REPORT_FORMAT};
use super::stats::{select_best, summarize_tests, ConfigSummary, SelectionResult, ValidationMatrix};
use super::EngineError;
use crate::checkpoint::{build_view, CheckpointStore, MetadataRecord, RecordStatus};
use crate::hpspace::HyperparameterConfig;
use crate::scheduler::TaskExecutor;
use crate::trainer::{ModelArtifact, TrainingTask};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

/// Everything needed to rebuild a run's plan, stored in the run's header
/// record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub algorithm: Algorithm,
    pub meta: RunMetadata,
    pub configs: Vec<HyperparameterConfig>,
}

impl RunInfo {
    pub fn plan(&self) -> Result<TaskPlan, EngineError> {
        plan(
            self.algorithm,
            &self.meta.run_id,
            self.meta.k,
            &self.configs,
            self.meta.epochs,
            self.meta.trainer_seed,
        )
    }

    fn header_id(&self) -> String {
        format!("run/{}", self.meta.run_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: RunReport,
    pub executed: usize,
    pub skipped: usize,
}

/// Stored metrics and checkpoint refs by task id.
pub trait ResultSource {
    fn metric(&self, task_id: &str) -> Option<f64>;
    fn checkpoint_ref(&self, task_id: &str) -> Option<String>;
}

impl ResultSource for BTreeMap<String, (f64, String)> {
    fn metric(&self, task_id: &str) -> Option<f64> {
        self.get(task_id).map(|(m, _)| *m)
    }

    fn checkpoint_ref(&self, task_id: &str) -> Option<String> {
        self.get(task_id).map(|(_, c)| c.clone())
    }
}

fn metric(results: &dyn ResultSource, task: &TrainingTask) -> Result<f64, EngineError> {
    results
        .metric(&task.task_id)
        .ok_or_else(|| EngineError::Incomplete(task.task_id.clone()))
}

/// Per-config validation means over the phase-one tasks that pass `filter`.
fn summaries_for(
    plan: &TaskPlan,
    results: &dyn ResultSource,
    filter: impl Fn(&TrainingTask) -> bool,
) -> Result<Vec<ConfigSummary>, EngineError> {
    let mut matrix = ValidationMatrix::new();
    let mut folds = BTreeSet::new();
    for task in plan.phase1.iter().filter(|t| filter(t)) {
        let m = task.val_fold().expect("phase one validates");
        folds.insert(m);
        matrix.insert(task.config.index, m, metric(results, task)?);
    }
    let configs: Vec<usize> = plan.configs.iter().map(|c| c.index).collect();
    let folds: Vec<usize> = folds.into_iter().collect();
    matrix.summaries(&configs, &folds)
}

/// Selections made at the barrier, one per phase-two placeholder.
pub fn selections(plan: &TaskPlan, results: &dyn ResultSource) -> Result<Vec<(Vec<ConfigSummary>, SelectionResult)>, EngineError> {
    plan.phase2
        .iter()
        .map(|p| {
            let summaries = match plan.algorithm {
                Algorithm::Nachos => summaries_for(plan, results, |t| t.test_fold == p.test_fold)?,
                Algorithm::Dachos => summaries_for(plan, results, |_| true)?,
            };
            let sel = select_best(&summaries)?;
            Ok((summaries, sel))
        })
        .collect()
}

pub fn resolve_phase2(plan: &TaskPlan, picks: &[(Vec<ConfigSummary>, SelectionResult)]) -> Result<Vec<TrainingTask>, EngineError> {
    plan.phase2
        .iter()
        .zip(picks)
        .map(|(p, (_, sel))| plan.resolve(p, plan.config(sel.jstar)?))
        .collect()
}

/// The report as a pure function of the plan and the stored results.
pub fn assemble(plan: &TaskPlan, meta: Option<RunMetadata>, results: &dyn ResultSource) -> Result<RunReport, EngineError> {
    let picks = selections(plan, results)?;
    let phase2 = resolve_phase2(plan, &picks)?;
    match plan.algorithm {
        Algorithm::Nachos => {
            let mut folds = Vec::with_capacity(plan.k);
            for ((summaries, sel), task) in picks.into_iter().zip(&phase2) {
                folds.push(NachosFold {
                    test_fold: task.test_fold.expect("test task"),
                    jstar: sel.jstar,
                    vbar: Some(sel.vbar_star),
                    runner_up_gap: sel.runner_up_gap,
                    t: metric(results, task)?,
                    summaries,
                });
            }
            let t: Vec<f64> = folds.iter().map(|f| f.t).collect();
            Ok(RunReport::Nachos(NachosReport {
                format: REPORT_FORMAT,
                meta,
                stats: summarize_tests(&t)?,
                folds,
            }))
        }
        Algorithm::Dachos => {
            let (summaries, selection) = picks.into_iter().next().expect("one final task");
            let task = &phase2[0];
            metric(results, task)?;
            Ok(RunReport::Dachos(DachosReport {
                format: REPORT_FORMAT,
                meta,
                summaries,
                selection,
                model: Some(ModelArtifact {
                    artifact_ref: results.checkpoint_ref(&task.task_id).unwrap_or_default(),
                    config: task.config.clone(),
                    trained_on: task.train_folds.clone(),
                }),
            }))
        }
    }
}

/// Writes the run header, or checks that an existing one matches.
fn register_run(store: &CheckpointStore, info: &RunInfo) -> Result<(), EngineError> {
    let value = serde_json::to_value(info).expect("run info serializes");
    let existing = store
        .run_records(&info.meta.run_id)?
        .into_iter()
        .find(|r| r.status == RecordStatus::Run);
    match existing {
        Some(r) if r.run_info.as_ref() == Some(&value) => Ok(()),
        Some(_) => Err(EngineError::RunMismatch(info.meta.run_id.clone())),
        None => {
            let mut r = MetadataRecord::new(&info.meta.run_id, &info.header_id(), RecordStatus::Run);
            r.run_info = Some(value);
            Ok(store.append(&r)?)
        }
    }
}

fn persist(store: &CheckpointStore, run_id: &str, report: &RunReport) -> Result<(), EngineError> {
    store.write_run_file(run_id, REPORT_JSON, report.to_json().as_bytes())?;
    store.write_run_file(run_id, REPORT_TEXT, report.to_text().as_bytes())?;
    Ok(())
}

/// Runs both phases through `executor` and builds the report. With a store,
/// the run is resumable: finished tasks are not retrained.
pub fn execute_run(info: &RunInfo, executor: &mut dyn TaskExecutor) -> Result<RunOutcome, EngineError> {
    let plan = info.plan()?;
    if let Some(store) = executor.store() {
        register_run(store, info)?;
    }
    let run_id = info.meta.run_id.as_str();
    let mut results: BTreeMap<String, (f64, String)> = BTreeMap::new();
    let (mut executed, mut skipped) = (0, 0);

    let first = executor.execute(run_id, 1, plan.phase1.clone())?;
    executed += first.executed;
    skipped += first.skipped;
    results.extend(first.results.into_values().map(|r| (r.task_id, (r.metric, r.checkpoint_ref))));

    let picks = selections(&plan, &results)?;
    for (p, (_, sel)) in plan.phase2.iter().zip(&picks) {
        log::info!(
            "selected h{} for {} (vbar {:.4})",
            sel.jstar,
            p.test_fold.map_or_else(|| "the final model".to_string(), |i| format!("test fold {i}")),
            sel.vbar_star
        );
    }
    let second = executor.execute(run_id, 2, resolve_phase2(&plan, &picks)?)?;
    executed += second.executed;
    skipped += second.skipped;
    results.extend(second.results.into_values().map(|r| (r.task_id, (r.metric, r.checkpoint_ref))));

    let report = assemble(&plan, Some(info.meta.clone()), &results)?;
    if let Some(store) = executor.store() {
        persist(store, run_id, &report)?;
    }
    Ok(RunOutcome { report, executed, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PhaseCount {
    pub done: usize,
    pub total: usize,
}

impl PhaseCount {
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            100.0
        } else {
            100.0 * self.done as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogStatus {
    Complete(RunReport),
    InProgress {
        info: Box<RunInfo>,
        phases: [PhaseCount; 2],
        failed_attempts: usize,
    },
}

pub fn run_info_from_records(run_id: &str, records: &[MetadataRecord]) -> Result<RunInfo, EngineError> {
    let header = records
        .iter()
        .find(|r| r.status == RecordStatus::Run)
        .and_then(|r| r.run_info.clone())
        .ok_or_else(|| EngineError::UnknownRun(run_id.to_string()))?;
    serde_json::from_value(header).map_err(|e| EngineError::CorruptRunInfo(e.to_string()))
}

/// Rebuilds the report of `run_id` from the metadata log alone, or reports
/// how far an unfinished run has come.
pub fn report_from_log(store: &CheckpointStore, run_id: &str) -> Result<LogStatus, EngineError> {
    let records = store.run_records(run_id)?;
    if records.is_empty() {
        return Err(EngineError::UnknownRun(run_id.to_string()));
    }
    let info = run_info_from_records(run_id, &records)?;
    let plan = info.plan()?;
    let view = build_view(&records)?;
    let results: BTreeMap<String, (f64, String)> = view
        .completed
        .iter()
        .map(|(id, c)| (id.clone(), (c.metric, c.checkpoint_ref.clone().unwrap_or_default())))
        .collect();
    match assemble(&plan, Some(info.meta.clone()), &results) {
        Ok(report) => Ok(LogStatus::Complete(report)),
        Err(EngineError::Incomplete(_)) => {
            let phase1: BTreeSet<&str> = plan.phase1.iter().map(|t| t.task_id.as_str()).collect();
            let done1 = phase1.iter().filter(|id| results.contains_key(**id)).count();
            let done2 = results.keys().filter(|id| !phase1.contains(id.as_str())).count();
            let failed_attempts = records.iter().filter(|r| r.status == RecordStatus::Failed).count();
            Ok(LogStatus::InProgress {
                phases: [
                    PhaseCount { done: done1, total: plan.phase1.len() },
                    PhaseCount { done: done2, total: plan.phase2.len() },
                ],
                info: Box::new(info),
                failed_attempts,
            })
        }
        Err(e) => Err(e),
    }
}
