//! Hyperparameter search space, random-search sampling and the engine-wide
//! deterministic PRNG.
//!
//! Every random decision in the engine (fold shuffles, config draws, weight
//! initialization, mini-batch order) goes through [`SplitMix64`], so a job is
//! reproducible bit-for-bit on any platform given its seeds.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// splitmix64 generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// An independent generator for sub-stream `stream` of `seed`.
    ///
    /// The starting state is `seed ^ mix64(stream + gamma)`, which keeps
    /// streams from being shifted copies of one another.
    pub fn stream(seed: u64, stream: u64) -> Self {
        Self::new(seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform integer in `[0, bound)` by rejection, free of modulo bias.
    ///
    /// Panics if `bound == 0`.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below() needs a positive bound");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % bound;
            }
        }
    }

    /// Uniform float in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SpaceError {
    #[error("duplicate axis name `{0}`")]
    DuplicateAxis(String),
    #[error("axis `{0}` has no choices")]
    EmptyAxis(String),
    #[error("config list line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config h{index}: unknown axis `{axis}`")]
    UnknownAxis { index: usize, axis: String },
    #[error("config h{index}: value `{value}` is not a choice of axis `{axis}`")]
    NotAChoice {
        index: usize,
        axis: String,
        value: String,
    },
    #[error("config h{index}: missing axis `{axis}`")]
    MissingAxis { index: usize, axis: String },
    #[error("config h{index}: axis `{axis}` value `{value}` is not numeric")]
    NotNumeric {
        index: usize,
        axis: String,
        value: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One categorical axis. Numeric choices are kept as their decimal text so
/// that config identity never depends on float parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub choices: Vec<String>,
}

impl Axis {
    pub fn new<S: Into<String>>(name: S, choices: &[&str]) -> Self {
        Self {
            name: name.into(),
            choices: choices.iter().map(|c| c.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    axes: Vec<Axis>,
}

impl SearchSpace {
    pub fn new(axes: Vec<Axis>) -> Result<Self, SpaceError> {
        let mut seen = HashSet::new();
        for axis in &axes {
            if !seen.insert(axis.name.as_str()) {
                return Err(SpaceError::DuplicateAxis(axis.name.clone()));
            }
            if axis.choices.is_empty() {
                return Err(SpaceError::EmptyAxis(axis.name.clone()));
            }
        }
        Ok(Self { axes })
    }

    /// The six-axis space used for the chest X-ray and kidney OCT studies.
    pub fn table1_preset() -> Self {
        Self::new(vec![
            Axis::new("architecture", &["ResNet50", "InceptionV3", "Xception"]),
            Axis::new("batch_size", &["16", "32", "64", "128"]),
            Axis::new("learning_rate", &["0.01", "0.001", "0.0001"]),
            Axis::new("decay", &["0.01", "0.001", "0.0001"]),
            Axis::new("momentum", &["0.5", "0.9", "0.99"]),
            Axis::new("nesterov", &["enabled", "disabled"]),
        ])
        .expect("preset is well-formed")
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, name: &str) -> Option<&Axis> {
        self.axes.iter().find(|a| a.name == name)
    }

    /// Number of distinct configurations (saturating).
    pub fn cardinality(&self) -> u64 {
        self.axes
            .iter()
            .fold(1u64, |acc, a| acc.saturating_mul(a.choices.len() as u64))
    }

    /// Plain random search: config `j` draws one uniform choice per axis, in
    /// axis order, from `SplitMix64::stream(seed, j)`. Duplicates are kept.
    pub fn sample_configs(&self, n: usize, seed: u64) -> Vec<HyperparameterConfig> {
        (0..n)
            .map(|j| {
                let mut rng = SplitMix64::stream(seed, j as u64);
                let values = self
                    .axes
                    .iter()
                    .map(|axis| {
                        let pick = rng.below(axis.choices.len() as u64) as usize;
                        (axis.name.clone(), axis.choices[pick].clone())
                    })
                    .collect();
                HyperparameterConfig { index: j, values }
            })
            .collect()
    }

    /// Checks that `config` assigns exactly one listed choice to every axis.
    pub fn validate(&self, config: &HyperparameterConfig) -> Result<(), SpaceError> {
        for (axis, value) in &config.values {
            let Some(spec) = self.axis(axis) else {
                return Err(SpaceError::UnknownAxis {
                    index: config.index,
                    axis: axis.clone(),
                });
            };
            if !spec.choices.contains(value) {
                return Err(SpaceError::NotAChoice {
                    index: config.index,
                    axis: axis.clone(),
                    value: value.clone(),
                });
            }
        }
        for axis in &self.axes {
            if !config.values.contains_key(&axis.name) {
                return Err(SpaceError::MissingAxis {
                    index: config.index,
                    axis: axis.name.clone(),
                });
            }
        }
        Ok(())
    }
}

/// One sampled configuration `h_j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperparameterConfig {
    pub index: usize,
    pub values: IndexMap<String, String>,
}

impl HyperparameterConfig {
    pub fn get(&self, axis: &str) -> Option<&str> {
        self.values.get(axis).map(String::as_str)
    }

    pub fn get_f64(&self, axis: &str) -> Result<Option<f64>, SpaceError> {
        match self.get(axis) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| SpaceError::NotNumeric {
                index: self.index,
                axis: axis.to_string(),
                value: v.to_string(),
            }),
        }
    }
}

impl fmt::Display for HyperparameterConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{} (", self.index)?;
        for (n, (k, v)) in self.values.iter().enumerate() {
            if n > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        f.write_str(")")
    }
}

#[derive(Serialize, Deserialize)]
struct ConfigRecord {
    index: usize,
    values: IndexMap<String, String>,
}

/// Parses a config-list file: one JSON object per line,
/// `{"index": j, "values": {"axis": "choice", ...}}`. Blank lines and lines
/// starting with `#` are skipped. When `space` is given every config is
/// validated against it.
pub fn parse_configs(
    text: &str,
    space: Option<&SearchSpace>,
) -> Result<Vec<HyperparameterConfig>, SpaceError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rec: ConfigRecord = serde_json::from_str(line).map_err(|e| SpaceError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        let config = HyperparameterConfig {
            index: rec.index,
            values: rec.values,
        };
        if let Some(space) = space {
            space.validate(&config)?;
        }
        out.push(config);
    }
    Ok(out)
}

pub fn load_configs(
    path: &Path,
    space: Option<&SearchSpace>,
) -> Result<Vec<HyperparameterConfig>, SpaceError> {
    parse_configs(&fs::read_to_string(path)?, space)
}

pub fn format_configs(configs: &[HyperparameterConfig]) -> String {
    let mut out = String::new();
    for c in configs {
        let rec = ConfigRecord {
            index: c.index,
            values: c.values.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("config serializes"));
        out.push('\n');
    }
    out
}
