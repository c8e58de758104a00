//! Config selection and aggregation of test metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::EngineError;

/// Two-decimal display used for every printed metric.
pub fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    /// Denominator `count - 1`.
    pub sample_sd: f64,
    pub standard_error: f64,
    pub count: usize,
}

/// Mean, sample standard deviation and standard error of `t`.
pub fn summarize_tests(t: &[f64]) -> Result<SummaryStats, EngineError> {
    if t.len() < 2 {
        return Err(EngineError::TooFewValues(t.len()));
    }
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let ss: f64 = t.iter().map(|x| (x - mean) * (x - mean)).sum();
    let sample_sd = (ss / (n - 1.0)).sqrt();
    Ok(SummaryStats {
        mean,
        sample_sd,
        standard_error: sample_sd / n.sqrt(),
        count: t.len(),
    })
}

impl fmt::Display for SummaryStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ± {}", fmt2(self.mean), fmt2(self.standard_error))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub config: usize,
    /// Mean validation metric over `folds`.
    pub vbar: f64,
    pub folds: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub jstar: usize,
    pub vbar_star: f64,
    /// `vbar_star` minus the best other mean; absent with a single config.
    pub runner_up_gap: Option<f64>,
}

/// Argmax of `vbar` at full precision; equal means go to the lower index.
pub fn select_best(summaries: &[ConfigSummary]) -> Result<SelectionResult, EngineError> {
    let mut best: Option<&ConfigSummary> = None;
    for s in summaries {
        best = match best {
            Some(b) if s.vbar > b.vbar || (s.vbar == b.vbar && s.config < b.config) => Some(s),
            Some(b) => Some(b),
            None => Some(s),
        };
    }
    let best = best.ok_or(EngineError::EmptySelection)?;
    let runner_up = summaries
        .iter()
        .filter(|s| s.config != best.config)
        .map(|s| s.vbar)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    Ok(SelectionResult {
        jstar: best.config,
        vbar_star: best.vbar,
        runner_up_gap: runner_up.map(|r| best.vbar - r),
    })
}

/// Validation metrics `v[j][m]` of one selection context.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationMatrix {
    cells: BTreeMap<(usize, usize), f64>,
}

impl ValidationMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the previous value if the cell was already set.
    pub fn insert(&mut self, config: usize, val_fold: usize, metric: f64) -> Option<f64> {
        self.cells.insert((config, val_fold), metric)
    }

    pub fn get(&self, config: usize, val_fold: usize) -> Option<f64> {
        self.cells.get(&(config, val_fold)).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn configs(&self) -> BTreeSet<usize> {
        self.cells.keys().map(|(j, _)| *j).collect()
    }

    pub fn val_folds(&self) -> BTreeSet<usize> {
        self.cells.keys().map(|(_, m)| *m).collect()
    }

    /// Per-config means over `val_folds`; every `(j, m)` cell must exist.
    pub fn summaries(&self, configs: &[usize], val_folds: &[usize]) -> Result<Vec<ConfigSummary>, EngineError> {
        configs
            .iter()
            .map(|&j| {
                let mut sum = 0.0;
                for &m in val_folds {
                    sum += self
                        .get(j, m)
                        .ok_or(EngineError::MissingCell { config: j, val_fold: m })?;
                }
                Ok(ConfigSummary {
                    config: j,
                    vbar: sum / val_folds.len() as f64,
                    folds: val_folds.to_vec(),
                })
            })
            .collect()
    }
}
