//! The dispatching side: owns the task queue and the metadata log, hands a
//! task to a worker slot only when that slot asks for one, and requeues work
//! from workers that disappear.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::makespan::{DispatchTrace, TraceEntry};
use super::protocol::{read_frame, write_frame, ManagerMsg, WorkerMsg};
use super::worker::{run_worker, FaultInjection, WorkerError, WorkerLink, WorkerOptions};
use super::{PhaseOutcome, SchedulerError, TaskExecutor};
use crate::checkpoint::{CheckpointStore, MetadataRecord, RecordStatus};
use crate::trainer::{TaskResult, Trainer, TrainingData, TrainingTask};

type ConnId = u64;

/// Manager end of a connection.
trait ManagerLink: Send {
    fn send(&mut self, msg: &ManagerMsg) -> io::Result<()>;
    fn close(&mut self);
}

enum Event {
    Connected(ConnId, Box<dyn ManagerLink>),
    Message(ConnId, WorkerMsg),
    Closed(ConnId),
}

struct LocalManagerLink(Option<Sender<ManagerMsg>>);

impl ManagerLink for LocalManagerLink {
    fn send(&mut self, msg: &ManagerMsg) -> io::Result<()> {
        match &self.0 {
            Some(tx) => tx
                .send(msg.clone())
                .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe)),
            None => Err(io::Error::from(io::ErrorKind::NotConnected)),
        }
    }

    fn close(&mut self) {
        self.0 = None;
    }
}

struct LocalWorkerLink {
    id: ConnId,
    events: Mutex<Sender<Event>>,
    inbox: Mutex<Receiver<ManagerMsg>>,
    closed: AtomicBool,
}

impl WorkerLink for LocalWorkerLink {
    fn send(&self, msg: &WorkerMsg) -> io::Result<()> {
        if self.closed.load(Ordering::Relaxed) {
            return Err(io::Error::from(io::ErrorKind::NotConnected));
        }
        self.events
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .send(Event::Message(self.id, msg.clone()))
            .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))
    }

    fn recv(&self) -> io::Result<Option<ManagerMsg>> {
        if self.closed.load(Ordering::Relaxed) {
            return Ok(None);
        }
        Ok(self.inbox.lock().unwrap_or_else(|e| e.into_inner()).recv().ok())
    }

    fn close(&self) {
        if !self.closed.swap(true, Ordering::Relaxed) {
            let _ = self
                .events
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .send(Event::Closed(self.id));
        }
    }
}

impl Drop for LocalWorkerLink {
    fn drop(&mut self) {
        self.close();
    }
}

struct TcpManagerLink(TcpStream);

impl ManagerLink for TcpManagerLink {
    fn send(&mut self, msg: &ManagerMsg) -> io::Result<()> {
        write_frame(&mut self.0, msg)
    }

    fn close(&mut self) {
        let _ = self.0.shutdown(std::net::Shutdown::Both);
    }
}

/// Registers a TCP connection and pumps its frames into the event queue.
fn attach_tcp(stream: TcpStream, ids: &AtomicU64, events: &Sender<Event>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let id = ids.fetch_add(1, Ordering::Relaxed);
    let reader = stream.try_clone()?;
    events
        .send(Event::Connected(id, Box::new(TcpManagerLink(stream))))
        .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
    let events = events.clone();
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            match read_frame::<_, WorkerMsg>(&mut reader) {
                Ok(Some(msg)) => {
                    if events.send(Event::Message(id, msg)).is_err() {
                        return;
                    }
                }
                Ok(None) | Err(_) => {
                    let _ = events.send(Event::Closed(id));
                    return;
                }
            }
        }
    });
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub heartbeat_interval: Duration,
    /// Missed heartbeat intervals before a worker is declared lost.
    pub missed_heartbeats: u32,
    /// Extra attempts for a task whose trainer failed.
    pub retries: u32,
    /// How long to wait for replacement workers when every worker is gone
    /// but new ones can still connect.
    pub reconnect_grace: Duration,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval: Duration::from_secs(10),
            missed_heartbeats: 3,
            retries: 1,
            reconnect_grace: Duration::from_secs(60),
        }
    }
}

/// Counts reported after every finished task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchProgress {
    pub done: usize,
    pub total: usize,
    pub skipped: usize,
}

/// Called with the phase number and counts.
pub type ProgressHook = Box<dyn FnMut(usize, &DispatchProgress) + Send>;

struct Conn {
    link: Box<dyn ManagerLink>,
    worker_id: Option<String>,
    slots: usize,
    inflight: BTreeSet<String>,
    parked: usize,
    last_seen: Instant,
}

struct InFlight {
    task: TrainingTask,
    conn: ConnId,
    started: Duration,
}

pub struct Manager {
    config: ManagerConfig,
    store: Option<Arc<CheckpointStore>>,
    events_tx: Sender<Event>,
    events_rx: Receiver<Event>,
    ids: Arc<AtomicU64>,
    conns: BTreeMap<ConnId, Conn>,
    local_workers: Vec<JoinHandle<Result<usize, WorkerError>>>,
    accepts_remote: bool,
    stop: Arc<AtomicBool>,
    progress: Option<ProgressHook>,
    phase: usize,
    trace: DispatchTrace,
}

impl Manager {
    pub fn new(config: ManagerConfig, store: Option<Arc<CheckpointStore>>) -> Self {
        let (events_tx, events_rx) = mpsc::channel();
        Self {
            config,
            store,
            events_tx,
            events_rx,
            ids: Arc::new(AtomicU64::new(0)),
            conns: BTreeMap::new(),
            local_workers: Vec::new(),
            accepts_remote: false,
            stop: Arc::new(AtomicBool::new(false)),
            progress: None,
            phase: 1,
            trace: DispatchTrace::default(),
        }
    }

    pub fn set_progress(&mut self, hook: ProgressHook) {
        self.progress = Some(hook);
    }

    /// Trace of the most recent `dispatch` call.
    pub fn trace(&self) -> &DispatchTrace {
        &self.trace
    }

    pub fn store(&self) -> Option<&Arc<CheckpointStore>> {
        self.store.as_ref()
    }

    /// Starts an in-process worker on its own thread.
    pub fn spawn_local_worker(&mut self, trainer: Arc<dyn Trainer>, mut options: WorkerOptions) {
        if options.store.is_none() {
            options.store = self.store.clone();
        }
        let (tx, rx) = mpsc::channel();
        let id = self.ids.fetch_add(1, Ordering::Relaxed);
        let _ = self
            .events_tx
            .send(Event::Connected(id, Box::new(LocalManagerLink(Some(tx)))));
        let link = Arc::new(LocalWorkerLink {
            id,
            events: Mutex::new(self.events_tx.clone()),
            inbox: Mutex::new(rx),
            closed: AtomicBool::new(false),
        });
        self.local_workers
            .push(thread::spawn(move || run_worker(link, trainer, options)));
    }

    /// `g` single-slot in-process workers named `local-0..`.
    pub fn spawn_local_workers(
        &mut self,
        g: usize,
        trainer: Arc<dyn Trainer>,
        data: Option<TrainingData>,
    ) {
        for n in 0..g {
            let mut options = WorkerOptions::new(format!("local-{n}"));
            options.data = data.clone();
            options.heartbeat_interval = self.config.heartbeat_interval;
            self.spawn_local_worker(trainer.clone(), options);
        }
    }

    #[doc(hidden)]
    pub fn spawn_faulty_local_worker(
        &mut self,
        name: &str,
        trainer: Arc<dyn Trainer>,
        data: Option<TrainingData>,
        fault: FaultInjection,
    ) {
        let mut options = WorkerOptions::new(name);
        options.data = data;
        options.fault = fault;
        options.heartbeat_interval = self.config.heartbeat_interval;
        self.spawn_local_worker(trainer, options);
    }

    /// Accepts worker connections on `addr` for the lifetime of the manager.
    pub fn listen(&mut self, addr: &str) -> io::Result<SocketAddr> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        self.accepts_remote = true;
        let (ids, events, stop) = (self.ids.clone(), self.events_tx.clone(), self.stop.clone());
        thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let _ = stream.set_nonblocking(false);
                        if let Err(e) = attach_tcp(stream, &ids, &events) {
                            log::warn!("dropping connection from {peer}: {e}");
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(20))
                    }
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(200));
                    }
                }
            }
        });
        Ok(local)
    }

    /// Connects to a listening worker, retrying in the background until it
    /// comes up or the manager shuts down.
    pub fn dial(&mut self, endpoint: &str) {
        self.accepts_remote = true;
        let (ids, events, stop) = (self.ids.clone(), self.events_tx.clone(), self.stop.clone());
        let endpoint = endpoint.to_string();
        thread::spawn(move || {
            let mut backoff = Duration::from_millis(50);
            while !stop.load(Ordering::Relaxed) {
                match TcpStream::connect(&endpoint) {
                    Ok(stream) => {
                        if let Err(e) = attach_tcp(stream, &ids, &events) {
                            log::warn!("could not attach {endpoint}: {e}");
                        }
                        return;
                    }
                    Err(e) => {
                        log::debug!("worker {endpoint} unreachable: {e}");
                        thread::sleep(backoff);
                        backoff = (backoff * 2).min(Duration::from_secs(2));
                    }
                }
            }
        });
    }

    fn live_workers(&self) -> usize {
        self.conns.len()
    }

    fn append(&self, record: MetadataRecord) -> Result<(), SchedulerError> {
        if let Some(store) = &self.store {
            store.append(&record)?;
        }
        Ok(())
    }

    fn task_record(task: &TrainingTask, status: RecordStatus) -> MetadataRecord {
        let mut r = MetadataRecord::new(&task.run_id, &task.task_id, status);
        r.config = Some(task.config.index);
        r.test_fold = task.test_fold;
        r.val_fold = task.val_fold();
        r
    }

    fn resume_epoch(&self, task: &TrainingTask) -> Result<u32, SchedulerError> {
        Ok(match &self.store {
            Some(store) => store
                .latest_blob(&task.task_id)?
                .map_or(0, |(e, _)| e.min(task.epochs)),
            None => 0,
        })
    }

    /// Runs `tasks` to completion on the connected workers.
    ///
    /// Tasks already completed in the store are not dispatched; their stored
    /// metrics are returned instead. Interrupted tasks resume from their
    /// newest model checkpoint.
    pub fn dispatch(&mut self, run_id: &str, tasks: Vec<TrainingTask>) -> Result<PhaseOutcome, SchedulerError> {
        let mut ids = BTreeSet::new();
        for t in &tasks {
            if !ids.insert(t.task_id.clone()) {
                return Err(SchedulerError::DuplicateTask(t.task_id.clone()));
            }
            t.validate().map_err(|e| SchedulerError::InvalidTask(e.to_string()))?;
        }
        let view = match &self.store {
            Some(store) => store.recovery_view(run_id)?,
            None => Default::default(),
        };
        let total = tasks.len();
        let mut outcome = PhaseOutcome::default();
        let mut pending: Vec<TrainingTask> = Vec::new();
        for mut task in tasks {
            if let Some(done) = view.completed.get(&task.task_id) {
                outcome.results.insert(
                    task.task_id.clone(),
                    TaskResult {
                        task_id: task.task_id.clone(),
                        metric: done.metric,
                        epochs_completed: done.epochs,
                        checkpoint_ref: done.checkpoint_ref.clone().unwrap_or_default(),
                    },
                );
                outcome.skipped += 1;
                continue;
            }
            if let Some(p) = view.partial.get(&task.task_id) {
                task.resume_from_epoch = p.epoch.min(task.epochs);
            }
            pending.push(task);
        }
        // longest-first: final training, then test training, then inner
        // validation; canonical id within a class
        pending.sort_by(|a, b| {
            b.mode
                .nominal_cost()
                .cmp(&a.mode.nominal_cost())
                .then_with(|| a.task_id.cmp(&b.task_id))
        });
        let mut pending: VecDeque<TrainingTask> = pending.into();
        let mut logged_epoch: HashMap<String, u32> = view.logged_epoch.into_iter().collect();
        let mut inflight: HashMap<String, InFlight> = HashMap::new();
        let mut attempts: HashMap<String, u32> = HashMap::new();
        let mut exhausted: Vec<(String, String)> = Vec::new();

        let started = Instant::now();
        self.trace = DispatchTrace::default();
        let phase = self.phase;
        let report = |hook: &mut Option<ProgressHook>, outcome: &PhaseOutcome| {
            if let Some(hook) = hook {
                hook(phase, &DispatchProgress {
                    done: outcome.results.len(),
                    total,
                    skipped: outcome.skipped,
                });
            }
        };
        report(&mut self.progress, &outcome);
        let mut alone_since: Option<Instant> = None;
        let tick = (self.config.heartbeat_interval / 4).clamp(Duration::from_millis(5), Duration::from_millis(250));

        while !pending.is_empty() || !inflight.is_empty() {
            self.assign_parked(&mut pending, &mut inflight, started)?;

            let event = match self.events_rx.recv_timeout(tick) {
                Ok(e) => Some(e),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => unreachable!("manager holds a sender"),
            };
            match event {
                // queue drained: only now is an empty worker set meaningful
                None if self.live_workers() == 0 => {
                    let remaining = pending.len() + inflight.len();
                    if !self.accepts_remote {
                        return Err(SchedulerError::AllWorkersLost { remaining });
                    }
                    let since = *alone_since.get_or_insert_with(Instant::now);
                    if since.elapsed() > self.config.reconnect_grace {
                        return Err(SchedulerError::AllWorkersLost { remaining });
                    }
                }
                None => alone_since = None,
                Some(Event::Connected(id, link)) => {
                    self.conns.insert(
                        id,
                        Conn {
                            link,
                            worker_id: None,
                            slots: 0,
                            inflight: BTreeSet::new(),
                            parked: 0,
                            last_seen: Instant::now(),
                        },
                    );
                }
                Some(Event::Closed(id)) => {
                    if let Some(conn) = self.conns.remove(&id) {
                        log::warn!(
                            "worker {} disconnected; requeueing {} task(s)",
                            conn.worker_id.as_deref().unwrap_or("?"),
                            conn.inflight.len()
                        );
                        self.requeue(conn, &mut pending, &mut inflight)?;
                    }
                }
                Some(Event::Message(id, msg)) => {
                    let Some(conn) = self.conns.get_mut(&id) else {
                        continue;
                    };
                    conn.last_seen = Instant::now();
                    match msg {
                        WorkerMsg::Hello { worker_id, slots } => {
                            let duplicate = self
                                .conns
                                .iter()
                                .any(|(other, c)| *other != id && c.worker_id.as_deref() == Some(&worker_id));
                            let conn = self.conns.get_mut(&id).expect("present");
                            if duplicate {
                                log::warn!("rejecting duplicate worker id {worker_id}");
                                let _ = conn.link.send(&ManagerMsg::Shutdown {});
                                conn.link.close();
                                self.conns.remove(&id);
                                continue;
                            }
                            log::info!("worker {worker_id} joined with {slots} slot(s)");
                            conn.worker_id = Some(worker_id);
                            conn.slots = slots.max(1);
                        }
                        WorkerMsg::Request { .. } => {
                            if conn.parked + conn.inflight.len() < conn.slots.max(1) {
                                conn.parked += 1;
                            }
                            if pending.is_empty() {
                                let _ = conn.link.send(&ManagerMsg::Wait {});
                            }
                        }
                        WorkerMsg::Heartbeat { .. } => {}
                        WorkerMsg::Progress { task_id, epoch, metric } => {
                            if !conn.inflight.contains(&task_id) {
                                continue;
                            }
                            let last = logged_epoch.entry(task_id.clone()).or_insert(0);
                            if epoch > *last {
                                *last = epoch;
                                let task = &inflight[&task_id].task;
                                let mut r = Self::task_record(task, RecordStatus::Epoch);
                                r.epoch = epoch;
                                r.metric = Some(metric);
                                self.append(r)?;
                            }
                        }
                        WorkerMsg::Done {
                            task_id,
                            metric,
                            checkpoint_ref,
                            epochs_completed,
                        } => {
                            if !conn.inflight.remove(&task_id) {
                                log::warn!("ignoring result for {task_id} not held by this worker");
                                continue;
                            }
                            let worker = conn.worker_id.clone().unwrap_or_default();
                            let flight = inflight.remove(&task_id).expect("tracked");
                            if !(0.0..=1.0).contains(&metric) {
                                self.fail_task(
                                    flight.task,
                                    format!("metric {metric} outside [0, 1]"),
                                    &mut attempts,
                                    &mut pending,
                                    &mut exhausted,
                                )?;
                                continue;
                            }
                            let mut r = Self::task_record(&flight.task, RecordStatus::Completed);
                            r.epoch = epochs_completed.max(flight.task.epochs);
                            r.metric = Some(metric);
                            r.checkpoint_ref = (!checkpoint_ref.is_empty()).then(|| checkpoint_ref.clone());
                            self.append(r)?;
                            logged_epoch.remove(&task_id);
                            self.trace.entries.push(TraceEntry {
                                task_id: task_id.clone(),
                                worker_id: worker,
                                start: flight.started,
                                end: started.elapsed(),
                            });
                            outcome.executed += 1;
                            outcome.results.insert(
                                task_id.clone(),
                                TaskResult {
                                    task_id,
                                    metric,
                                    epochs_completed: flight.task.epochs,
                                    checkpoint_ref,
                                },
                            );
                            report(&mut self.progress, &outcome);
                        }
                        WorkerMsg::Failed { task_id, message } => {
                            if !conn.inflight.remove(&task_id) {
                                continue;
                            }
                            let flight = inflight.remove(&task_id).expect("tracked");
                            log::warn!("task {task_id} failed: {message}");
                            self.fail_task(flight.task, message, &mut attempts, &mut pending, &mut exhausted)?;
                        }
                    }
                }
            }

            let deadline = self.config.heartbeat_interval * self.config.missed_heartbeats;
            let lost: Vec<ConnId> = self
                .conns
                .iter()
                .filter(|(_, c)| c.last_seen.elapsed() > deadline)
                .map(|(id, _)| *id)
                .collect();
            for id in lost {
                let mut conn = self.conns.remove(&id).expect("present");
                log::warn!(
                    "worker {} missed {} heartbeats; requeueing {} task(s)",
                    conn.worker_id.as_deref().unwrap_or("?"),
                    self.config.missed_heartbeats,
                    conn.inflight.len()
                );
                conn.link.close();
                self.requeue(conn, &mut pending, &mut inflight)?;
            }
        }
        self.trace.wall = started.elapsed();
        self.trace.slots = self.conns.values().map(|c| c.slots.max(1)).sum();
        if !exhausted.is_empty() {
            return Err(SchedulerError::TasksFailed(exhausted));
        }
        Ok(outcome)
    }

    fn assign_parked(
        &mut self,
        pending: &mut VecDeque<TrainingTask>,
        inflight: &mut HashMap<String, InFlight>,
        started: Instant,
    ) -> Result<(), SchedulerError> {
        let ids: Vec<ConnId> = self.conns.keys().copied().collect();
        for id in ids {
            loop {
                let conn = self.conns.get_mut(&id).expect("present");
                if conn.parked == 0 || conn.inflight.len() >= conn.slots.max(1) {
                    break;
                }
                let Some(task) = pending.pop_front() else { return Ok(()) };
                if conn.link.send(&ManagerMsg::Assign { task: task.clone() }).is_err() {
                    pending.push_front(task);
                    let conn = self.conns.remove(&id).expect("present");
                    self.requeue(conn, pending, inflight)?;
                    break;
                }
                conn.parked -= 1;
                conn.inflight.insert(task.task_id.clone());
                let mut r = Self::task_record(&task, RecordStatus::Started);
                r.epoch = task.resume_from_epoch;
                self.append(r)?;
                inflight.insert(
                    task.task_id.clone(),
                    InFlight {
                        task,
                        conn: id,
                        started: started.elapsed(),
                    },
                );
            }
        }
        Ok(())
    }

    fn requeue(
        &mut self,
        conn: Conn,
        pending: &mut VecDeque<TrainingTask>,
        inflight: &mut HashMap<String, InFlight>,
    ) -> Result<(), SchedulerError> {
        for task_id in conn.inflight.iter().rev() {
            if let Some(flight) = inflight.remove(task_id) {
                debug_assert!(!self.conns.contains_key(&flight.conn));
                let mut task = flight.task;
                task.resume_from_epoch = self.resume_epoch(&task)?;
                pending.push_front(task);
            }
        }
        Ok(())
    }

    fn fail_task(
        &mut self,
        mut task: TrainingTask,
        message: String,
        attempts: &mut HashMap<String, u32>,
        pending: &mut VecDeque<TrainingTask>,
        exhausted: &mut Vec<(String, String)>,
    ) -> Result<(), SchedulerError> {
        let mut r = Self::task_record(&task, RecordStatus::Failed);
        r.message = Some(message.clone());
        self.append(r)?;
        let n = attempts.entry(task.task_id.clone()).or_insert(0);
        *n += 1;
        if *n <= self.config.retries {
            task.resume_from_epoch = self.resume_epoch(&task)?;
            pending.push_front(task);
        } else {
            exhausted.push((task.task_id, message));
        }
        Ok(())
    }

    /// Tells every worker to exit and waits for in-process workers.
    pub fn shutdown(mut self) {
        self.shutdown_inner();
    }

    fn shutdown_inner(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        // connections that arrived after the last dispatch
        while let Ok(event) = self.events_rx.try_recv() {
            if let Event::Connected(_, mut link) = event {
                let _ = link.send(&ManagerMsg::Shutdown {});
                link.close();
            }
        }
        for conn in self.conns.values_mut() {
            let _ = conn.link.send(&ManagerMsg::Shutdown {});
            conn.link.close();
        }
        self.conns.clear();
        for handle in self.local_workers.drain(..) {
            match handle.join() {
                Ok(Ok(_)) | Ok(Err(WorkerError::ConnectionLost)) => {}
                Ok(Err(e)) => log::debug!("local worker ended with {e}"),
                Err(_) => log::warn!("local worker panicked"),
            }
        }
    }
}

impl Drop for Manager {
    fn drop(&mut self) {
        if !self.stop.load(Ordering::Relaxed) {
            self.shutdown_inner();
        }
    }
}

impl TaskExecutor for Manager {
    fn execute(&mut self, run_id: &str, phase: usize, tasks: Vec<TrainingTask>) -> Result<PhaseOutcome, SchedulerError> {
        self.phase = phase;
        self.dispatch(run_id, tasks)
    }

    fn store(&self) -> Option<&CheckpointStore> {
        self.store.as_deref()
    }
}
