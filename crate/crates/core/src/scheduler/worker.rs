//! Worker side of the pull protocol: announce slots, request work, run
//! assigned tasks, report progress and results, heartbeat while alive.

use std::io::{self, BufReader};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::protocol::{read_frame, write_frame, ManagerMsg, WorkerMsg};
use crate::checkpoint::CheckpointStore;
use crate::trainer::{TaskContext, TaskResult, Trainer, TrainingData, TrainingTask};

#[derive(Debug, thiserror::Error)]
pub enum WorkerError {
    #[error("connection error: {0}")]
    Connection(#[from] io::Error),
    #[error("manager closed the connection before shutdown")]
    ConnectionLost,
}

/// Worker end of a connection.
pub trait WorkerLink: Send + Sync {
    fn send(&self, msg: &WorkerMsg) -> io::Result<()>;
    /// Blocks for the next message; `None` once the manager is gone.
    fn recv(&self) -> io::Result<Option<ManagerMsg>>;
    /// Abandons the connection; the manager sees it as closed.
    fn close(&self);
}

pub struct TcpWorkerLink {
    reader: Mutex<BufReader<TcpStream>>,
    writer: Mutex<TcpStream>,
}

impl TcpWorkerLink {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: Mutex::new(BufReader::new(stream.try_clone()?)),
            writer: Mutex::new(stream),
        })
    }

    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }

    /// Waits for a single manager connection on `addr`.
    pub fn accept_one<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let (stream, _) = listener.accept()?;
        Self::new(stream)
    }
}

impl WorkerLink for TcpWorkerLink {
    fn send(&self, msg: &WorkerMsg) -> io::Result<()> {
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        write_frame(&mut *w, msg)
    }

    fn recv(&self) -> io::Result<Option<ManagerMsg>> {
        let mut r = self.reader.lock().unwrap_or_else(|e| e.into_inner());
        read_frame(&mut *r)
    }

    fn close(&self) {
        let w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let _ = w.shutdown(std::net::Shutdown::Both);
    }
}

/// Test hooks that make a worker misbehave.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultInjection {
    /// Drop the connection when the task with this 0-based assignment
    /// number arrives, after its first epoch if `mid_task`.
    pub die_on_task: Option<usize>,
    pub mid_task: bool,
    /// Stop heartbeating and go silent on this assignment number.
    pub hang_on_task: Option<usize>,
}

#[derive(Clone)]
pub struct WorkerOptions {
    pub worker_id: String,
    pub slots: usize,
    pub heartbeat_interval: Duration,
    pub data: Option<TrainingData>,
    pub store: Option<Arc<CheckpointStore>>,
    pub fault: FaultInjection,
}

impl WorkerOptions {
    pub fn new(worker_id: impl Into<String>) -> Self {
        Self {
            worker_id: worker_id.into(),
            slots: 1,
            heartbeat_interval: Duration::from_secs(10),
            data: None,
            store: None,
            fault: FaultInjection::default(),
        }
    }
}

enum SlotOutcome {
    Continue,
    Die,
}

/// Runs the worker protocol until the manager sends `shutdown`. Returns the
/// number of assignments received.
pub fn run_worker(
    link: Arc<dyn WorkerLink>,
    trainer: Arc<dyn Trainer>,
    options: WorkerOptions,
) -> Result<usize, WorkerError> {
    let slots = options.slots.max(1);
    link.send(&WorkerMsg::Hello {
        worker_id: options.worker_id.clone(),
        slots,
    })?;

    let stop = Arc::new(AtomicBool::new(false));
    let silent = Arc::new(AtomicBool::new(false));
    let heartbeat = {
        let (link, stop, silent) = (link.clone(), stop.clone(), silent.clone());
        let id = options.worker_id.clone();
        let interval = options.heartbeat_interval;
        thread::spawn(move || {
            let tick = Duration::from_millis(10).min(interval);
            let mut since = Duration::ZERO;
            while !stop.load(Ordering::Relaxed) {
                thread::sleep(tick);
                since += tick;
                if since >= interval {
                    since = Duration::ZERO;
                    if silent.load(Ordering::Relaxed) {
                        continue;
                    }
                    if link.send(&WorkerMsg::Heartbeat { worker_id: id.clone() }).is_err() {
                        break;
                    }
                }
            }
        })
    };

    let (job_tx, job_rx) = mpsc::channel::<(usize, TrainingTask)>();
    let job_rx = Arc::new(Mutex::new(job_rx));
    let (dead_tx, dead_rx) = mpsc::channel::<()>();
    let mut slot_threads = Vec::new();
    for _ in 0..slots {
        let (slot_link, trainer, slot_options, jobs, dead_tx, silent) = (
            link.clone(),
            trainer.clone(),
            options.clone(),
            job_rx.clone(),
            dead_tx.clone(),
            silent.clone(),
        );
        slot_threads.push(thread::spawn(move || {
            slot_loop(&*slot_link, &*trainer, &slot_options, &jobs, &silent, dead_tx)
        }));
        link_request(&*link, &options.worker_id)?;
    }
    drop(dead_tx);

    let result = receive_loop(&*link, &job_tx, &dead_rx);
    stop.store(true, Ordering::Relaxed);
    drop(job_tx);
    for t in slot_threads {
        let _ = t.join();
    }
    let _ = heartbeat.join();
    result
}

fn link_request(link: &dyn WorkerLink, worker_id: &str) -> io::Result<()> {
    link.send(&WorkerMsg::Request {
        worker_id: worker_id.to_string(),
    })
}

fn receive_loop(
    link: &dyn WorkerLink,
    jobs: &Sender<(usize, TrainingTask)>,
    dead: &Receiver<()>,
) -> Result<usize, WorkerError> {
    let mut assigned = 0usize;
    loop {
        if dead.try_recv().is_ok() {
            return Err(WorkerError::ConnectionLost);
        }
        match link.recv()? {
            Some(ManagerMsg::Assign { task }) => {
                let _ = jobs.send((assigned, task));
                assigned += 1;
            }
            Some(ManagerMsg::Wait {}) => {}
            Some(ManagerMsg::Shutdown {}) => return Ok(assigned),
            None => return Err(WorkerError::ConnectionLost),
        }
    }
}

fn slot_loop(
    link: &dyn WorkerLink,
    trainer: &dyn Trainer,
    options: &WorkerOptions,
    jobs: &Mutex<Receiver<(usize, TrainingTask)>>,
    silent: &AtomicBool,
    dead: Sender<()>,
) {
    loop {
        let next = jobs.lock().unwrap_or_else(|e| e.into_inner()).recv();
        let Ok((number, task)) = next else { return };
        match run_one(link, trainer, options, number, &task, silent) {
            SlotOutcome::Continue => {
                if link_request(link, &options.worker_id).is_err() {
                    return;
                }
            }
            SlotOutcome::Die => {
                let _ = dead.send(());
                if !silent.load(Ordering::Relaxed) {
                    link.close();
                }
                return;
            }
        }
    }
}

fn run_one(
    link: &dyn WorkerLink,
    trainer: &dyn Trainer,
    options: &WorkerOptions,
    number: usize,
    task: &TrainingTask,
    silent: &AtomicBool,
) -> SlotOutcome {
    let fault = options.fault;
    if fault.hang_on_task == Some(number) {
        silent.store(true, Ordering::Relaxed);
        return SlotOutcome::Die;
    }
    if fault.die_on_task == Some(number) && !fault.mid_task {
        return SlotOutcome::Die;
    }

    // the manager filters finished work, but a stale assignment can still
    // arrive after a crash
    if let Some(store) = &options.store {
        if let Ok(Some(done)) = store.completed(&task.run_id, &task.task_id) {
            let msg = WorkerMsg::Done {
                task_id: task.task_id.clone(),
                metric: done.metric,
                checkpoint_ref: done.checkpoint_ref.unwrap_or_default(),
                epochs_completed: done.epochs,
            };
            return if link.send(&msg).is_ok() {
                SlotOutcome::Continue
            } else {
                SlotOutcome::Die
            };
        }
    }

    let die_mid = fault.die_on_task == Some(number) && fault.mid_task;
    let progress = |epoch: u32, metric: f64| {
        let _ = link.send(&WorkerMsg::Progress {
            task_id: task.task_id.clone(),
            epoch,
            metric,
        });
    };
    let ctx = TaskContext {
        data: options.data.as_ref(),
        store: options.store.as_deref(),
        progress: &progress,
    };
    let outcome = if die_mid {
        // one epoch, then vanish
        let mut short = task.clone();
        short.epochs = short.resume_from_epoch + 1;
        let _ = trainer.run_task(&short, &ctx);
        return SlotOutcome::Die;
    } else {
        trainer.run_task(task, &ctx)
    };
    let msg = match outcome {
        Ok(TaskResult {
            task_id,
            metric,
            epochs_completed,
            checkpoint_ref,
        }) => WorkerMsg::Done {
            task_id,
            metric,
            checkpoint_ref,
            epochs_completed,
        },
        Err(e) => WorkerMsg::Failed {
            task_id: task.task_id.clone(),
            message: e.to_string(),
        },
    };
    if link.send(&msg).is_ok() {
        SlotOutcome::Continue
    } else {
        SlotOutcome::Die
    }
}
