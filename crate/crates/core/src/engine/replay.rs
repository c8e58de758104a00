//! Selection and aggregation from transcribed metric tables, no training.
//!
//! Table rows are `test_fold,config_index,val_fold,metric` under a header.
//! A `-` test fold marks the unnested (DACHOS) context. A `-` validation fold
//! marks a test metric `t_i`, whose config index is the one used for fold `i`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::report::{DachosReport, NachosFold, NachosReport, RunReport, REPORT_FORMAT};
use super::stats::{select_best, summarize_tests, ValidationMatrix};
use super::plan::Algorithm;
use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixRow {
    pub test_fold: Option<usize>,
    pub config: usize,
    pub val_fold: Option<usize>,
    pub metric: f64,
    /// 1-based line number in the source, header included.
    pub line: usize,
}

fn slot(field: &str) -> Result<Option<usize>, String> {
    match field.trim() {
        "-" => Ok(None),
        f => f.parse().map(Some).map_err(|_| format!("`{f}` is not a fold index or `-`")),
    }
}

pub fn parse_matrix(text: &str) -> Result<Vec<MatrixRow>, EngineError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| EngineError::Parse { row: 1, message: e.to_string() })?;
    let expected = ["test_fold", "config_index", "val_fold", "metric"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(EngineError::Parse {
            row: 1,
            message: format!("header must be `{}`", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| EngineError::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| EngineError::Parse { row: line, message };
        if record.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", record.len())));
        }
        let config = record[1]
            .parse()
            .map_err(|_| bad(format!("`{}` is not a config index", &record[1])))?;
        let metric: f64 = record[3]
            .parse()
            .map_err(|_| bad(format!("`{}` is not a number", &record[3])))?;
        if !(0.0..=1.0).contains(&metric) {
            return Err(bad(format!("metric {metric} outside [0, 1]")));
        }
        let row = MatrixRow {
            test_fold: slot(&record[0]).map_err(bad)?,
            config,
            val_fold: slot(&record[2]).map_err(bad)?,
            metric,
            line,
        };
        if row.test_fold.is_none() && row.val_fold.is_none() {
            return Err(EngineError::Parse {
                row: line,
                message: "a row needs a test fold, a validation fold, or both".into(),
            });
        }
        if row.test_fold.is_some() && row.test_fold == row.val_fold {
            return Err(EngineError::Parse {
                row: line,
                message: "validation fold equals the test fold".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_matrix(path: &Path) -> Result<Vec<MatrixRow>, EngineError> {
    let text = std::fs::read_to_string(path).map_err(|e| EngineError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_matrix(&text)
}

/// The algorithm a table describes: unnested rows mean DACHOS.
pub fn detect_algorithm(rows: &[MatrixRow]) -> Algorithm {
    if !rows.is_empty() && rows.iter().all(|r| r.test_fold.is_none()) {
        Algorithm::Dachos
    } else {
        Algorithm::Nachos
    }
}

fn duplicate(row: &MatrixRow) -> EngineError {
    EngineError::Parse {
        row: row.line,
        message: "duplicate cell".into(),
    }
}

pub fn replay(rows: &[MatrixRow], algorithm: Option<Algorithm>) -> Result<RunReport, EngineError> {
    if rows.is_empty() {
        return Err(EngineError::Shape("table has no rows".into()));
    }
    match algorithm.unwrap_or_else(|| detect_algorithm(rows)) {
        Algorithm::Nachos => replay_nachos(rows).map(RunReport::Nachos),
        Algorithm::Dachos => replay_dachos(rows).map(RunReport::Dachos),
    }
}

fn replay_nachos(rows: &[MatrixRow]) -> Result<NachosReport, EngineError> {
    let mut matrices: BTreeMap<usize, ValidationMatrix> = BTreeMap::new();
    let mut tests: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    let mut all_configs = BTreeSet::new();
    let mut k = 0;
    for row in rows {
        let i = row.test_fold.ok_or_else(|| EngineError::Parse {
            row: row.line,
            message: "nested table row without a test fold".into(),
        })?;
        k = k.max(i + 1).max(row.val_fold.map_or(0, |m| m + 1));
        match row.val_fold {
            Some(m) => {
                all_configs.insert(row.config);
                if matrices.entry(i).or_default().insert(row.config, m, row.metric).is_some() {
                    return Err(duplicate(row));
                }
            }
            None => {
                if tests.insert(i, (row.config, row.metric)).is_some() {
                    return Err(duplicate(row));
                }
            }
        }
    }
    let configs: Vec<usize> = all_configs.into_iter().collect();
    let mut folds = Vec::with_capacity(k);
    for i in 0..k {
        let test = tests.get(&i).copied();
        let fold = match matrices.get(&i) {
            Some(matrix) => {
                let val_folds: Vec<usize> = (0..k).filter(|&m| m != i).collect();
                let summaries = matrix
                    .summaries(&configs, &val_folds)
                    .map_err(|e| EngineError::Shape(format!("test fold {i}: {e}")))?;
                let sel = select_best(&summaries)?;
                let (j, t) = test.ok_or_else(|| EngineError::Shape(format!("test fold {i} has no test metric row")))?;
                if j != sel.jstar {
                    return Err(EngineError::Shape(format!(
                        "test fold {i}: test row uses h{j} but validation selects h{}",
                        sel.jstar
                    )));
                }
                NachosFold {
                    test_fold: i,
                    jstar: sel.jstar,
                    vbar: Some(sel.vbar_star),
                    runner_up_gap: sel.runner_up_gap,
                    t,
                    summaries,
                }
            }
            None => {
                let (j, t) = test.ok_or_else(|| EngineError::Shape(format!("test fold {i} has no rows")))?;
                NachosFold {
                    test_fold: i,
                    jstar: j,
                    vbar: None,
                    runner_up_gap: None,
                    t,
                    summaries: Vec::new(),
                }
            }
        };
        folds.push(fold);
    }
    let t: Vec<f64> = folds.iter().map(|f| f.t).collect();
    Ok(NachosReport {
        format: REPORT_FORMAT,
        meta: None,
        stats: summarize_tests(&t)?,
        folds,
    })
}

fn replay_dachos(rows: &[MatrixRow]) -> Result<DachosReport, EngineError> {
    let mut matrix = ValidationMatrix::new();
    for row in rows {
        let (None, Some(m)) = (row.test_fold, row.val_fold) else {
            return Err(EngineError::Parse {
                row: row.line,
                message: "unnested table rows need `-` as test fold and a validation fold".into(),
            });
        };
        if matrix.insert(row.config, m, row.metric).is_some() {
            return Err(duplicate(row));
        }
    }
    let configs: Vec<usize> = matrix.configs().into_iter().collect();
    let k = matrix.val_folds().last().map_or(0, |m| m + 1);
    let val_folds: Vec<usize> = (0..k).collect();
    let summaries = matrix.summaries(&configs, &val_folds)?;
    let selection = select_best(&summaries)?;
    Ok(DachosReport {
        format: REPORT_FORMAT,
        meta: None,
        summaries,
        selection,
        model: None,
    })
}
