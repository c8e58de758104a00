//! Run reports. The JSON form keeps full precision; the text form rounds
//! every metric to two decimals.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::stats::{fmt2, ConfigSummary, SelectionResult, SummaryStats};
use crate::trainer::ModelArtifact;

pub const REPORT_FORMAT: u32 = 1;

/// Job parameters that determine the results. The worker count is left out
/// on purpose: reports must not depend on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub k: usize,
    pub n: usize,
    pub epochs: u32,
    pub level: String,
    pub partition_seed: u64,
    pub sampling_seed: u64,
    pub trainer_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NachosFold {
    pub test_fold: usize,
    pub jstar: usize,
    /// Absent when only the test metric is known.
    pub vbar: Option<f64>,
    pub runner_up_gap: Option<f64>,
    pub t: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub summaries: Vec<ConfigSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NachosReport {
    pub format: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<RunMetadata>,
    pub folds: Vec<NachosFold>,
    pub stats: SummaryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DachosReport {
    pub format: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<RunMetadata>,
    pub summaries: Vec<ConfigSummary>,
    pub selection: SelectionResult,
    /// The deployable model; absent for replays.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelArtifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "lowercase")]
pub enum RunReport {
    Nachos(NachosReport),
    Dachos(DachosReport),
}

fn header(out: &mut String, algorithm: &str, meta: &Option<RunMetadata>) {
    match meta {
        Some(m) => {
            let _ = writeln!(
                out,
                "{algorithm} run {} (k={}, n={}, epochs={}, level={})",
                m.run_id, m.k, m.n, m.epochs, m.level
            );
        }
        None => {
            let _ = writeln!(out, "{algorithm} replay");
        }
    }
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self {
            RunReport::Nachos(r) => {
                header(&mut out, "NACHOS", &r.meta);
                let _ = writeln!(out, "{:<6}{:<6}{:<7}t", "fold", "best", "vbar");
                for f in &r.folds {
                    let vbar = f.vbar.map_or_else(|| "-".to_string(), fmt2);
                    let _ = writeln!(out, "{:<6}{:<6}{:<7}{}", format!("F{}", f.test_fold), format!("h{}", f.jstar), vbar, fmt2(f.t));
                }
                let s = &r.stats;
                let _ = writeln!(
                    out,
                    "mean {:.4}  sd {:.4}  se {:.4}  over {} folds",
                    s.mean, s.sample_sd, s.standard_error, s.count
                );
                let _ = writeln!(out, "Average and standard error {s}");
            }
            RunReport::Dachos(r) => {
                header(&mut out, "DACHOS", &r.meta);
                let _ = writeln!(out, "{:<8}vbar", "config");
                for c in &r.summaries {
                    let _ = writeln!(out, "{:<8}{}", format!("h{}", c.config), fmt2(c.vbar));
                }
                let sel = &r.selection;
                let gap = sel
                    .runner_up_gap
                    .map_or_else(String::new, |g| format!(", lead {g:.4}"));
                let _ = writeln!(out, "best: h{} (vbar {:.4}{gap})", sel.jstar, sel.vbar_star);
                if let Some(m) = &r.model {
                    let folds: Vec<String> = m.trained_on.iter().map(|f| f.to_string()).collect();
                    let _ = writeln!(
                        out,
                        "model: {} (h{}, trained on folds {})",
                        if m.artifact_ref.is_empty() { "-" } else { &m.artifact_ref },
                        m.config.index,
                        folds.join(",")
                    );
                }
            }
        }
        out
    }
}
