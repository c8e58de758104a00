//! Two-tier checkpointing: an append-only metadata log recording the
//! lifecycle of every task, and per-task model blobs where only the latest
//! epoch is kept.
//!
//! Layout under the store root:
//!
//! ```text
//! metadata.jsonl              one MetadataRecord per line
//! models/{task_id}/{e}.ckpt   model blob after epoch e
//! runs/{run_id}/...           fold files and reports
//! ```
//!
//! The log tolerates a crash at any byte: an unterminated final line is
//! dropped on read and truncated away before the next append.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const LOG_FILE: &str = "metadata.jsonl";
const MODEL_DIR: &str = "models";
const RUNS_DIR: &str = "runs";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt metadata log at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("refusing to save an empty model blob for {0}")]
    EmptyBlob(String),
    #[error("invalid task id `{0}` for blob storage")]
    BadTaskId(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    /// Run header carrying the job description in `run_info`.
    Run,
    Started,
    Epoch,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub run_id: String,
    pub task_id: String,
    pub status: RecordStatus,
    #[serde(default)]
    pub config: Option<usize>,
    #[serde(default)]
    pub test_fold: Option<usize>,
    #[serde(default)]
    pub val_fold: Option<usize>,
    #[serde(default)]
    pub epoch: u32,
    #[serde(default)]
    pub metric: Option<f64>,
    /// Milliseconds since the Unix epoch.
    pub wall_time: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_info: Option<serde_json::Value>,
}

impl MetadataRecord {
    pub fn new(run_id: &str, task_id: &str, status: RecordStatus) -> Self {
        Self {
            run_id: run_id.to_string(),
            task_id: task_id.to_string(),
            status,
            config: None,
            test_fold: None,
            val_fold: None,
            epoch: 0,
            metric: None,
            wall_time: now_millis(),
            checkpoint_ref: None,
            message: None,
            run_info: None,
        }
    }
}

pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletedTask {
    pub metric: f64,
    pub epochs: u32,
    pub checkpoint_ref: Option<String>,
    pub config: Option<usize>,
    pub test_fold: Option<usize>,
    pub val_fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialTask {
    pub epoch: u32,
    pub checkpoint_ref: String,
}

/// What a restarted run can reuse: finished tasks with their metrics and
/// interrupted tasks with the newest surviving model blob.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecoveryView {
    pub completed: BTreeMap<String, CompletedTask>,
    pub partial: BTreeMap<String, PartialTask>,
    /// Highest logged epoch per unfinished task.
    pub logged_epoch: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Default)]
pub struct LogContents {
    pub records: Vec<MetadataRecord>,
    /// An unterminated final line was found and ignored.
    pub torn_tail: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// fsync log appends and blob writes.
    pub sync: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self { sync: true }
    }
}

#[derive(Debug)]
pub struct CheckpointStore {
    root: PathBuf,
    options: StoreOptions,
    log: Mutex<Option<File>>,
}

impl CheckpointStore {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        Self::open_with(root, StoreOptions::default())
    }

    pub fn open_with(root: &Path, options: StoreOptions) -> Result<Self, StoreError> {
        fs::create_dir_all(root.join(MODEL_DIR)).map_err(io_err(root))?;
        fs::create_dir_all(root.join(RUNS_DIR)).map_err(io_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            options,
            log: Mutex::new(None),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf, StoreError> {
        let dir = self.root.join(RUNS_DIR).join(sanitize_run_id(run_id)?);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    /// Atomically replaces `runs/{run_id}/{name}`.
    pub fn write_run_file(&self, run_id: &str, name: &str, bytes: &[u8]) -> Result<PathBuf, StoreError> {
        let dir = self.run_dir(run_id)?;
        let target = dir.join(name);
        let tmp = dir.join(format!(".{name}.tmp"));
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(bytes).map_err(io_err(&tmp))?;
            if self.options.sync {
                f.sync_all().map_err(io_err(&tmp))?;
            }
        }
        fs::rename(&tmp, &target).map_err(io_err(&target))?;
        Ok(target)
    }

    /// Appends one record and flushes it to disk before returning.
    pub fn append(&self, record: &MetadataRecord) -> Result<(), StoreError> {
        let path = self.log_path();
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let mut guard = self.log.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            *guard = Some(open_log_for_append(&path)?);
        }
        let file = guard.as_mut().expect("opened above");
        file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        file.flush().map_err(io_err(&path))?;
        if self.options.sync {
            file.sync_data().map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn read_log(&self) -> Result<LogContents, StoreError> {
        let path = self.log_path();
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(LogContents::default()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let contents = parse_log(&bytes)?;
        if contents.torn_tail {
            log::warn!("{}: dropping torn final record", path.display());
        }
        Ok(contents)
    }

    pub fn run_records(&self, run_id: &str) -> Result<Vec<MetadataRecord>, StoreError> {
        Ok(self
            .read_log()?
            .records
            .into_iter()
            .filter(|r| r.run_id == run_id)
            .collect())
    }

    pub fn run_ids(&self) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = Vec::new();
        for r in self.read_log()?.records {
            if !ids.contains(&r.run_id) {
                ids.push(r.run_id);
            }
        }
        Ok(ids)
    }

    pub fn recovery_view(&self, run_id: &str) -> Result<RecoveryView, StoreError> {
        let records = self.run_records(run_id)?;
        let mut view = build_view(&records)?;
        let unfinished: Vec<String> = view.logged_epoch.keys().cloned().collect();
        for task_id in unfinished {
            if let Some((epoch, checkpoint_ref)) = self.latest_blob(&task_id)? {
                view.partial.insert(
                    task_id,
                    PartialTask {
                        epoch,
                        checkpoint_ref,
                    },
                );
            }
        }
        Ok(view)
    }

    pub fn completed(&self, run_id: &str, task_id: &str) -> Result<Option<CompletedTask>, StoreError> {
        let records: Vec<MetadataRecord> = self
            .run_records(run_id)?
            .into_iter()
            .filter(|r| r.task_id == task_id)
            .collect();
        Ok(build_view(&records)?.completed.remove(task_id))
    }

    fn task_dir(&self, task_id: &str) -> Result<PathBuf, StoreError> {
        let mut dir = self.root.join(MODEL_DIR);
        for part in task_id.split('/') {
            if part.is_empty() || part == "." || part == ".." || part.contains('\\') {
                return Err(StoreError::BadTaskId(task_id.to_string()));
            }
            dir.push(part);
        }
        Ok(dir)
    }

    /// Directory an external trainer writes its blobs into.
    pub fn model_dir(&self, task_id: &str) -> Result<PathBuf, StoreError> {
        let dir = self.task_dir(task_id)?;
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    pub fn blob_ref(task_id: &str, epoch: u32) -> String {
        format!("{task_id}/{epoch}.ckpt")
    }

    /// Writes the blob for `epoch` durably, then removes older epochs.
    pub fn save_model(&self, task_id: &str, epoch: u32, blob: &[u8]) -> Result<String, StoreError> {
        if blob.is_empty() {
            return Err(StoreError::EmptyBlob(task_id.to_string()));
        }
        let dir = self.model_dir(task_id)?;
        let target = dir.join(format!("{epoch}.ckpt"));
        let tmp = dir.join(format!(".{epoch}.ckpt.tmp"));
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(blob).map_err(io_err(&tmp))?;
            if self.options.sync {
                f.sync_all().map_err(io_err(&tmp))?;
            }
        }
        fs::rename(&tmp, &target).map_err(io_err(&target))?;
        if self.options.sync {
            if let Ok(d) = File::open(&dir) {
                let _ = d.sync_all();
            }
        }
        for (old, _) in self.blob_epochs(task_id)? {
            if old < epoch {
                let path = dir.join(format!("{old}.ckpt"));
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        Ok(Self::blob_ref(task_id, epoch))
    }

    pub fn load_model(&self, checkpoint_ref: &str) -> Result<Vec<u8>, StoreError> {
        let (task_id, file) = checkpoint_ref
            .rsplit_once('/')
            .ok_or_else(|| StoreError::BadTaskId(checkpoint_ref.to_string()))?;
        let path = self.task_dir(task_id)?.join(file);
        fs::read(&path).map_err(io_err(&path))
    }

    fn blob_epochs(&self, task_id: &str) -> Result<Vec<(u32, PathBuf)>, StoreError> {
        let dir = self.task_dir(task_id)?;
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&dir)(e)),
        };
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(epoch) = name.strip_suffix(".ckpt").and_then(|e| e.parse().ok()) {
                out.push((epoch, entry.path()));
            }
        }
        out.sort();
        Ok(out)
    }

    /// Highest-epoch blob for a task, if any survived.
    pub fn latest_blob(&self, task_id: &str) -> Result<Option<(u32, String)>, StoreError> {
        Ok(self
            .blob_epochs(task_id)?
            .last()
            .map(|(e, _)| (*e, Self::blob_ref(task_id, *e))))
    }
}

fn sanitize_run_id(run_id: &str) -> Result<&str, StoreError> {
    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id == "." || run_id == ".." {
        Err(StoreError::BadTaskId(run_id.to_string()))
    } else {
        Ok(run_id)
    }
}

fn open_log_for_append(path: &Path) -> Result<File, StoreError> {
    let file = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    // cut a torn tail so the next record starts on a fresh line
    let bytes = fs::read(path).map_err(io_err(path))?;
    if !bytes.is_empty() && !bytes.ends_with(b"\n") {
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
        log::warn!("{}: truncating torn final record", path.display());
        file.set_len(keep as u64).map_err(io_err(path))?;
    }
    Ok(file)
}

pub fn parse_log(bytes: &[u8]) -> Result<LogContents, StoreError> {
    let mut contents = LogContents::default();
    let mut rest = bytes;
    let mut line_no = 0;
    while !rest.is_empty() {
        line_no += 1;
        let Some(end) = rest.iter().position(|b| *b == b'\n') else {
            contents.torn_tail = true;
            break;
        };
        let line = &rest[..end];
        rest = &rest[end + 1..];
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let record = serde_json::from_slice(line).map_err(|e| StoreError::CorruptLog {
            line: line_no,
            message: e.to_string(),
        })?;
        contents.records.push(record);
    }
    Ok(contents)
}

/// Completed and unfinished tasks from one run's records. Blob state is not
/// consulted here.
pub fn build_view(records: &[MetadataRecord]) -> Result<RecoveryView, StoreError> {
    let mut view = RecoveryView::default();
    let mut last_epoch: HashMap<&str, u32> = HashMap::new();
    for (n, r) in records.iter().enumerate() {
        match r.status {
            RecordStatus::Run => {}
            RecordStatus::Epoch => {
                let last = last_epoch.entry(&r.task_id).or_insert(0);
                if r.epoch < *last {
                    return Err(StoreError::CorruptLog {
                        line: n + 1,
                        message: format!(
                            "task {} epoch {} logged after epoch {}",
                            r.task_id, r.epoch, last
                        ),
                    });
                }
                *last = r.epoch;
                if !view.completed.contains_key(&r.task_id) {
                    view.logged_epoch.insert(r.task_id.clone(), r.epoch);
                }
            }
            RecordStatus::Started | RecordStatus::Failed => {
                if !view.completed.contains_key(&r.task_id) {
                    view.logged_epoch.entry(r.task_id.clone()).or_insert(0);
                }
            }
            RecordStatus::Completed => {
                let metric = r.metric.ok_or_else(|| StoreError::CorruptLog {
                    line: n + 1,
                    message: format!("completed record for {} has no metric", r.task_id),
                })?;
                let done = CompletedTask {
                    metric,
                    epochs: r.epoch,
                    checkpoint_ref: r.checkpoint_ref.clone(),
                    config: r.config,
                    test_fold: r.test_fold,
                    val_fold: r.val_fold,
                };
                if view.completed.insert(r.task_id.clone(), done).is_some() {
                    return Err(StoreError::CorruptLog {
                        line: n + 1,
                        message: format!("duplicate completed record for {}", r.task_id),
                    });
                }
                view.logged_epoch.remove(&r.task_id);
            }
        }
    }
    Ok(view)
}
