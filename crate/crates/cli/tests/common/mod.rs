#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nestcv::synth::{synthetic_manifest, SyntheticSpec};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nestcv"));
    cmd.env_remove("NESTCV_STORE").env("RUST_LOG", "warn");
    cmd
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn nestcv(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A temp directory holding a synthetic manifest and job specs.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

pub struct Job<'a> {
    pub algorithm: &'a str,
    pub k: usize,
    pub n: usize,
    pub epochs: u32,
    pub workers: &'a str,
    pub backend: &'a str,
}

impl Default for Job<'_> {
    fn default() -> Self {
        Self {
            algorithm: "nachos",
            k: 4,
            n: 9,
            epochs: 2,
            workers: "local:2",
            backend: "kind = \"mock\"",
        }
    }
}

impl Workspace {
    /// Small x-ray-shaped manifest with features, so every backend can use it.
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SyntheticSpec::xray_analog();
        spec.groups_per_class = 6;
        spec.feature_dim = Some(4);
        synthetic_manifest(&spec).write(&dir.path().join("manifest.csv")).unwrap();
        Self { dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn spec(&self, name: &str, job: &Job) -> PathBuf {
        let text = format!(
            r#"version = 1
run_id = "{name}"
algorithm = "{}"
manifest = "manifest.csv"
k = {}
level = "supergroup"
n = {}
epochs = {}
store = "store"
workers = "{}"

[seeds]
partition = 1
sampling = 2
trainer = 3

[space]
preset = "table1"

[backend]
{}
"#,
            job.algorithm, job.k, job.n, job.epochs, job.workers, job.backend
        );
        let path = self.path(&format!("{name}.toml"));
        std::fs::write(&path, text).unwrap();
        path
    }

    pub fn run(&self, spec: &Path, extra: &[&str]) -> Output {
        bin()
            .current_dir(self.dir.path())
            .arg("run")
            .arg("--spec")
            .arg(spec)
            .args(extra)
            .output()
            .unwrap()
    }
}
