//! Job specification files (TOML).
//!
//! ```toml
//! version = 1
//! run_id = "xray"
//! algorithm = "nachos"
//! manifest = "manifest.csv"
//! k = 4
//! level = "supergroup"
//! n = 9
//! epochs = 5
//! store = "store"
//! workers = "local:4"
//!
//! [seeds]
//! partition = 1
//! sampling = 2
//! trainer = 3
//!
//! [space]
//! preset = "table1"
//!
//! [backend]
//! kind = "mock"
//! ```
//!
//! Relative paths are resolved against the directory holding the spec.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nestcv::engine::Algorithm;
use nestcv::hpspace::{load_configs, Axis, HyperparameterConfig, SearchSpace};
use nestcv::partition::PartitionLevel;
use serde::{Deserialize, Serialize};

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub partition: u64,
    pub sampling: u64,
    pub trainer: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub name: String,
    pub choices: Vec<String>,
}

/// Exactly one of the three sources must be given.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Explicit config list; `n` must match its length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<Vec<AxisSpec>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Tiny,
    Exec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    /// External trainer command line (exec only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    /// Artificial per-epoch delay (mock only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_delay_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub version: u32,
    pub run_id: String,
    pub algorithm: Algorithm,
    pub manifest: PathBuf,
    pub k: usize,
    pub level: PartitionLevel,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stratify: bool,
    pub n: usize,
    pub epochs: u32,
    pub store: PathBuf,
    /// `local:G` or a pool file.
    pub workers: String,
    /// Address to accept worker connections on, in addition to `workers`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heartbeat_secs: Option<f64>,
    pub seeds: Seeds,
    pub space: SpaceSpec,
    pub backend: BackendSpec,
}

fn default_retries() -> u32 {
    1
}

impl JobSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: JobSpec = toml::from_str(text).context("invalid job spec")?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Loads a spec and makes its relative paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let mut spec = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        spec.resolve_paths(&base);
        Ok(spec)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.manifest = abs(&self.manifest);
        self.store = abs(&self.store);
        if let Some(c) = &self.space.configs {
            self.space.configs = Some(abs(c));
        }
        if !self.workers.starts_with("local:") {
            self.workers = abs(Path::new(&self.workers)).to_string_lossy().into_owned();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SPEC_VERSION {
            bail!("unsupported spec version {} (expected {SPEC_VERSION})", self.version);
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            bail!("run_id must be non-empty and contain no path separators");
        }
        match self.algorithm {
            Algorithm::Nachos if self.k < 3 => bail!("nachos needs k >= 3 (got k={})", self.k),
            Algorithm::Dachos if self.k < 2 => bail!("dachos needs k >= 2 (got k={})", self.k),
            _ => {}
        }
        if self.n == 0 {
            bail!("n must be at least 1");
        }
        if self.epochs == 0 {
            bail!("epochs must be at least 1");
        }
        let sources = [self.space.preset.is_some(), self.space.configs.is_some(), self.space.axes.is_some()];
        if sources.iter().filter(|s| **s).count() != 1 {
            bail!("[space] needs exactly one of preset, configs or axes");
        }
        if let Some(p) = &self.space.preset {
            if p != "table1" {
                bail!("unknown space preset `{p}` (known: table1)");
            }
        }
        match self.backend.kind {
            BackendKind::Exec if self.backend.command.is_empty() => bail!("exec backend needs a command"),
            BackendKind::Mock | BackendKind::Tiny if !self.backend.command.is_empty() => {
                bail!("only the exec backend takes a command")
            }
            _ => {}
        }
        Ok(())
    }

    /// The declared space, if it is not an explicit config list.
    pub fn search_space(&self) -> Result<Option<SearchSpace>> {
        if self.space.preset.is_some() {
            return Ok(Some(SearchSpace::table1_preset()));
        }
        match &self.space.axes {
            Some(axes) => {
                let axes = axes
                    .iter()
                    .map(|a| {
                        let choices: Vec<&str> = a.choices.iter().map(String::as_str).collect();
                        Axis::new(a.name.clone(), &choices)
                    })
                    .collect();
                Ok(Some(SearchSpace::new(axes)?))
            }
            None => Ok(None),
        }
    }

    pub fn configs(&self) -> Result<Vec<HyperparameterConfig>> {
        if let Some(space) = self.search_space()? {
            return Ok(space.sample_configs(self.n, self.seeds.sampling));
        }
        let path = self.space.configs.as_ref().expect("validated");
        let configs = load_configs(path, None).with_context(|| format!("cannot load {}", path.display()))?;
        if configs.len() != self.n {
            bail!("{} lists {} configs but n = {}", path.display(), configs.len(), self.n);
        }
        Ok(configs)
    }
}
