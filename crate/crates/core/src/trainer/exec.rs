//! Host for external trainer processes.
//!
//! The host writes one `task` record to the trainer's stdin and reads
//! newline-delimited JSON records from its stdout:
//!
//! ```text
//! host -> trainer  {"type":"task", ...task fields, "data_path", "folds_path", "checkpoint_dir"}
//!                  {"type":"cancel"}                      (on timeout)
//! trainer -> host  {"type":"progress","task_id","epoch","metric"}   once per epoch
//!                  {"type":"done","task_id","metric","checkpoint_ref"}
//!                  {"type":"error","task_id","message"}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{check_metric, TaskContext, TaskResult, Trainer, TrainerError, TrainingTask};

#[derive(Debug, Serialize)]
struct TaskMessage<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(flatten)]
    task: &'a TrainingTask,
    data_path: Option<PathBuf>,
    folds_path: Option<PathBuf>,
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrainerMessage {
    Progress {
        task_id: String,
        epoch: u32,
        metric: f64,
    },
    Done {
        task_id: String,
        metric: f64,
        #[serde(default)]
        checkpoint_ref: String,
    },
    Error {
        task_id: String,
        message: String,
    },
}

#[derive(Debug, Clone)]
pub struct ExecTrainer {
    pub command: Vec<String>,
    /// Whole-task time limit.
    pub timeout: Option<Duration>,
}

impl ExecTrainer {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            timeout: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    fn spawn(&self) -> Result<Child, TrainerError> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| TrainerError::Spawn(std::io::Error::other("empty trainer command")))?;
        Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(TrainerError::Spawn)
    }
}

fn kill(child: &mut Child, stdin: Option<&mut ChildStdin>, cancel: bool) {
    if cancel {
        if let Some(stdin) = stdin {
            let _ = stdin.write_all(b"{\"type\":\"cancel\"}\n");
            let _ = stdin.flush();
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

impl Trainer for ExecTrainer {
    fn name(&self) -> &str {
        "exec"
    }

    fn run_task(&self, task: &TrainingTask, ctx: &TaskContext<'_>) -> Result<TaskResult, TrainerError> {
        task.validate()?;
        let checkpoint_dir = ctx
            .store
            .map(|s| s.model_dir(&task.task_id))
            .transpose()?;
        let message = TaskMessage {
            kind: "task",
            task,
            data_path: ctx.data.and_then(|d| d.manifest_path.clone()),
            folds_path: ctx.data.and_then(|d| d.folds_path.clone()),
            checkpoint_dir,
        };
        let mut line = serde_json::to_string(&message).expect("task serializes");
        line.push('\n');

        let mut child = self.spawn()?;
        let mut stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout piped");
        if let Some(s) = stdin.as_mut() {
            if let Err(e) = s.write_all(line.as_bytes()).and_then(|_| s.flush()) {
                kill(&mut child, None, false);
                return Err(TrainerError::Failure {
                    message: format!("could not send task: {e}"),
                    last_epoch: None,
                });
            }
        }

        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let deadline = self.timeout.map(|t| Instant::now() + t);
        let mut last_epoch = task.resume_from_epoch;
        let violation = |child: &mut Child, stdin: &mut Option<ChildStdin>, msg: String| {
            kill(child, stdin.as_mut(), false);
            Err(TrainerError::Protocol(msg))
        };
        loop {
            let next = match deadline {
                Some(deadline) => {
                    let left = deadline.saturating_duration_since(Instant::now());
                    match rx.recv_timeout(left) {
                        Ok(line) => Some(line),
                        Err(mpsc::RecvTimeoutError::Timeout) => {
                            kill(&mut child, stdin.as_mut(), true);
                            return Err(TrainerError::Timeout(self.timeout.expect("deadline set")));
                        }
                        Err(mpsc::RecvTimeoutError::Disconnected) => None,
                    }
                }
                None => rx.recv().ok(),
            };
            let line = match next {
                Some(Ok(line)) => line,
                Some(Err(e)) => return violation(&mut child, &mut stdin, format!("unreadable output: {e}")),
                None => {
                    let status = child.wait().ok();
                    return Err(TrainerError::Failure {
                        message: format!(
                            "trainer exited ({}) without a terminal message",
                            status.map_or_else(|| "unknown status".into(), |s| s.to_string())
                        ),
                        last_epoch: (last_epoch > 0).then_some(last_epoch),
                    });
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let msg: TrainerMessage = match serde_json::from_str(&line) {
                Ok(m) => m,
                Err(e) => return violation(&mut child, &mut stdin, format!("bad record `{line}`: {e}")),
            };
            match msg {
                TrainerMessage::Progress { task_id, epoch, metric } => {
                    if task_id != task.task_id {
                        return violation(&mut child, &mut stdin, format!("progress for foreign task {task_id}"));
                    }
                    if epoch <= last_epoch || epoch > task.epochs {
                        return violation(&mut child, &mut stdin, format!("unexpected epoch {epoch}"));
                    }
                    if let Err(e) = check_metric(metric) {
                        kill(&mut child, stdin.as_mut(), false);
                        return Err(e);
                    }
                    last_epoch = epoch;
                    (ctx.progress)(epoch, metric);
                }
                TrainerMessage::Done { task_id, metric, checkpoint_ref } => {
                    if task_id != task.task_id {
                        return violation(&mut child, &mut stdin, format!("result for foreign task {task_id}"));
                    }
                    if let Err(e) = check_metric(metric) {
                        kill(&mut child, stdin.as_mut(), false);
                        return Err(e);
                    }
                    drop(stdin);
                    let _ = child.wait();
                    return Ok(TaskResult {
                        task_id,
                        metric,
                        epochs_completed: task.epochs,
                        checkpoint_ref,
                    });
                }
                TrainerMessage::Error { message, .. } => {
                    kill(&mut child, stdin.as_mut(), false);
                    return Err(TrainerError::Failure {
                        message,
                        last_epoch: (last_epoch > 0).then_some(last_epoch),
                    });
                }
            }
        }
    }
}
