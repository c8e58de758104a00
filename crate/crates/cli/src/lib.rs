//! `nestcv` command-line front end.

pub mod jobspec;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nestcv::checkpoint::CheckpointStore;
use nestcv::engine::{
    execute_run, load_matrix, report_from_log, replay, Algorithm, EngineError, LogStatus, RunInfo,
    RunMetadata,
};
use nestcv::manifest::Manifest;
use nestcv::partition::{assign_folds, FoldAssignment, PartitionOptions};
use nestcv::scheduler::{
    run_worker, Manager, ManagerConfig, SchedulerError, TcpWorkerLink, WorkerError, WorkerOptions, WorkerPool,
};
use nestcv::trainer::{ExecTrainer, MockTrainer, TinyLearner, Trainer, TrainingData};

use jobspec::{BackendKind, BackendSpec, JobSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUN_FAILED: i32 = 2;

pub const STORE_ENV: &str = "NESTCV_STORE";
pub const FOLDS_FILE: &str = "folds.csv";

#[derive(Debug, Parser)]
#[command(name = "nestcv", version, about = "Nested cross-validation and deployment-model selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a job spec to completion, resuming from the store if it was interrupted
    Run(RunArgs),
    /// Select and aggregate from a transcribed metric table without training
    Replay(ReplayArgs),
    /// Serve tasks for a manager
    Worker(WorkerArgs),
    /// Rebuild a run's report from the metadata log
    Report(ReportArgs),
    /// Print the task plan of a job spec without executing it
    Plan(PlanArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Overrides the spec's store root
    #[arg(long, env = STORE_ENV)]
    pub store: Option<PathBuf>,
    /// Overrides the spec's workers (`local:G` or a pool file)
    #[arg(long)]
    pub workers: Option<String>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub listen: Option<String>,
    /// Print the report as JSON instead of text
    #[arg(long)]
    pub json: bool,
    /// Exit abruptly after this many tasks finish (crash testing)
    #[arg(long, hide = true)]
    pub fault_abort_after_tasks: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgorithmArg {
    Nachos,
    Dachos,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Nachos => Algorithm::Nachos,
            AlgorithmArg::Dachos => Algorithm::Dachos,
        }
    }
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Table with rows `test_fold,config_index,val_fold,metric`
    pub matrix: PathBuf,
    /// Defaults to dachos when no row has a test fold
    #[arg(long, value_enum)]
    pub algorithm: Option<AlgorithmArg>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Mock,
    Tiny,
    Exec,
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    /// Manager address to connect to
    #[arg(long, conflicts_with = "listen", required_unless_present = "listen")]
    pub connect: Option<String>,
    /// Wait for the manager to connect on this address
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long, default_value = "worker")]
    pub worker_id: String,
    #[arg(long, default_value_t = 1)]
    pub slots: usize,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendArg,
    #[arg(long)]
    pub epoch_delay_ms: Option<u64>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Shared store for model checkpoints
    #[arg(long, env = STORE_ENV)]
    pub store: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    pub heartbeat_secs: f64,
    /// External trainer command (exec backend)
    #[arg(last = true)]
    pub command: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, env = STORE_ENV)]
    pub store: PathBuf,
    #[arg(long)]
    pub run_id: String,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub spec: PathBuf,
}

/// A run that started but could not finish; distinct from usage errors.
#[derive(Debug, thiserror::Error)]
#[error("run failed: {0}")]
pub struct RunFailed(String);

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Worker(a) => cmd_worker(a),
        Command::Report(a) => cmd_report(a),
        Command::Plan(a) => cmd_plan(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) if e.is::<RunFailed>() => {
            eprintln!("error: {e:#}");
            EXIT_RUN_FAILED
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

pub fn build_trainer(backend: &BackendSpec) -> Arc<dyn Trainer> {
    match backend.kind {
        BackendKind::Mock => Arc::new(MockTrainer::with_epoch_delay(Duration::from_millis(
            backend.epoch_delay_ms.unwrap_or(0),
        ))),
        BackendKind::Tiny => Arc::new(TinyLearner),
        BackendKind::Exec => {
            let mut t = ExecTrainer::new(backend.command.clone());
            if let Some(s) = backend.timeout_secs {
                t = t.with_timeout(Duration::from_secs(s));
            }
            Arc::new(t)
        }
    }
}

fn apply_overrides(spec: &mut JobSpec, args: &RunArgs) -> Result<()> {
    let cwd = std::env::current_dir()?;
    if let Some(store) = &args.store {
        spec.store = cwd.join(store);
    }
    if let Some(w) = &args.workers {
        spec.workers = if w.starts_with("local:") { w.clone() } else { cwd.join(w).to_string_lossy().into_owned() };
    }
    if let Some(id) = &args.run_id {
        spec.run_id = id.clone();
    }
    if let Some(r) = args.retries {
        spec.retries = r;
    }
    if let Some(l) = &args.listen {
        spec.listen = Some(l.clone());
    }
    spec.validate()
}

fn prepare_data(spec: &JobSpec, store: &CheckpointStore) -> Result<TrainingData> {
    let manifest = Manifest::load(&spec.manifest).with_context(|| format!("loading {}", spec.manifest.display()))?;
    let options = PartitionOptions { stratify: spec.stratify };
    let folds = assign_folds(&manifest, spec.k, spec.level, spec.seeds.partition, options)?;
    let violations = folds.check_integrity(&manifest);
    if !violations.is_empty() {
        bail!("fold assignment failed its integrity check: {violations:?}");
    }
    if spec.backend.kind == BackendKind::Tiny && manifest.feature_dim().is_none() {
        bail!("the tiny backend needs a features column in every manifest row");
    }
    let folds_path = store.write_run_file(&spec.run_id, FOLDS_FILE, folds.to_text().as_bytes())?;
    log::info!("fold sizes {:?}", folds.fold_sizes());
    Ok(TrainingData {
        manifest: Arc::new(manifest),
        folds: Arc::new(folds),
        manifest_path: Some(spec.manifest.clone()),
        folds_path: Some(folds_path),
    })
}

pub fn run_info(spec: &JobSpec) -> Result<RunInfo> {
    Ok(RunInfo {
        algorithm: spec.algorithm,
        meta: RunMetadata {
            run_id: spec.run_id.clone(),
            k: spec.k,
            n: spec.n,
            epochs: spec.epochs,
            level: spec.level.as_str().to_string(),
            partition_seed: spec.seeds.partition,
            sampling_seed: spec.seeds.sampling,
            trainer_seed: spec.seeds.trainer,
        },
        configs: spec.configs()?,
    })
}

fn is_run_failure(e: &EngineError) -> bool {
    matches!(
        e,
        EngineError::Scheduler(SchedulerError::AllWorkersLost { .. } | SchedulerError::TasksFailed(_))
    )
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut spec = JobSpec::load(&args.spec)?;
    apply_overrides(&mut spec, &args)?;
    let info = run_info(&spec)?;
    let store = Arc::new(CheckpointStore::open(&spec.store)?);
    let data = prepare_data(&spec, &store)?;
    let pool = WorkerPool::resolve(&spec.workers, Path::new("."))?;
    let trainer = build_trainer(&spec.backend);

    let mut config = ManagerConfig {
        retries: spec.retries,
        ..ManagerConfig::default()
    };
    if let Some(s) = spec.heartbeat_secs {
        config.heartbeat_interval = Duration::from_secs_f64(s);
    }
    let mut manager = Manager::new(config, Some(store.clone()));
    let abort_after = args.fault_abort_after_tasks;
    let mut last = (0usize, 0usize);
    let mut finished = 0usize;
    manager.set_progress(Box::new(move |phase, p| {
        eprintln!("PROGRESS phase={phase} done={}/{}", p.done, p.total);
        if phase == last.0 && p.done > last.1 {
            finished += p.done - last.1;
        }
        last = (phase, p.done);
        if abort_after.is_some_and(|n| finished >= n) {
            eprintln!("aborting after {finished} task(s)");
            std::process::exit(137);
        }
    }));
    if let Some(addr) = &spec.listen {
        let bound = manager.listen(addr)?;
        eprintln!("listening for workers on {bound}");
    }
    match &pool {
        WorkerPool::Local(g) => manager.spawn_local_workers(*g, trainer, Some(data)),
        WorkerPool::Remote(entries) => {
            for e in entries {
                manager.dial(&e.endpoint);
            }
        }
    }

    let outcome = execute_run(&info, &mut manager);
    manager.shutdown();
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) if is_run_failure(&e) => {
            return Err(RunFailed(format!("{e}; rerun the same command to resume")).into())
        }
        Err(e) => return Err(e.into()),
    };
    let mut out = std::io::stdout().lock();
    if outcome.executed == 0 {
        writeln!(out, "all tasks skipped ({} already completed)", outcome.skipped)?;
    } else if outcome.skipped > 0 {
        writeln!(out, "resumed: {} task(s) reused, {} trained", outcome.skipped, outcome.executed)?;
    }
    if args.json {
        write!(out, "{}", outcome.report.to_json())?;
    } else {
        write!(out, "{}", outcome.report.to_text())?;
    }
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let rows = load_matrix(&args.matrix).with_context(|| format!("in {}", args.matrix.display()))?;
    let report = replay(&rows, args.algorithm.map(Into::into))?;
    if args.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_worker(args: WorkerArgs) -> Result<()> {
    let backend = BackendSpec {
        kind: match args.backend {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Tiny => BackendKind::Tiny,
            BackendArg::Exec => BackendKind::Exec,
        },
        command: args.command.clone(),
        timeout_secs: args.timeout_secs,
        epoch_delay_ms: args.epoch_delay_ms,
    };
    if backend.kind == BackendKind::Exec && backend.command.is_empty() {
        bail!("the exec backend needs a trainer command after `--`");
    }
    let data = match (&args.manifest, &args.folds) {
        (Some(m), Some(f)) => Some(TrainingData {
            manifest: Arc::new(Manifest::load(m)?),
            folds: Arc::new(FoldAssignment::load(f)?),
            manifest_path: Some(m.clone()),
            folds_path: Some(f.clone()),
        }),
        (None, None) => None,
        _ => bail!("--manifest and --folds go together"),
    };
    let store = args.store.as_deref().map(CheckpointStore::open).transpose()?.map(Arc::new);
    let link = match (&args.connect, &args.listen) {
        (Some(addr), _) => TcpWorkerLink::connect(addr.as_str()).with_context(|| format!("cannot connect to {addr}"))?,
        (None, Some(addr)) => {
            TcpWorkerLink::accept_one(addr.as_str()).with_context(|| format!("cannot accept on {addr}"))?
        }
        (None, None) => unreachable!("clap requires one"),
    };
    let options = WorkerOptions {
        slots: args.slots.max(1),
        heartbeat_interval: Duration::from_secs_f64(args.heartbeat_secs),
        data,
        store,
        ..WorkerOptions::new(args.worker_id.clone())
    };
    match run_worker(Arc::new(link), build_trainer(&backend), options) {
        Ok(n) => {
            eprintln!("worker {}: {n} task(s) received", args.worker_id);
            Ok(())
        }
        Err(WorkerError::ConnectionLost) => bail!("manager went away before shutdown"),
        Err(e) => Err(e.into()),
    }
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    if !args.store.join(nestcv::checkpoint::LOG_FILE).exists() {
        bail!("no metadata log under {}", args.store.display());
    }
    let store = CheckpointStore::open(&args.store)?;
    match report_from_log(&store, &args.run_id)? {
        LogStatus::Complete(report) => {
            if args.json {
                print!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
        }
        LogStatus::InProgress { phases, failed_attempts, .. } => {
            println!("run {} in progress", args.run_id);
            for (n, p) in phases.iter().enumerate() {
                println!("phase {}: {}/{} tasks ({:.1}%)", n + 1, p.done, p.total, p.percent());
            }
            if failed_attempts > 0 {
                println!("{failed_attempts} failed attempt(s) logged");
            }
        }
    }
    Ok(())
}

fn cmd_plan(args: PlanArgs) -> Result<()> {
    let spec = JobSpec::load(&args.spec)?;
    let plan = run_info(&spec)?.plan()?;
    let mut out = std::io::stdout().lock();
    let folds = |f: &[usize]| f.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let slot = |f: Option<usize>| f.map_or_else(|| "-".to_string(), |x| x.to_string());
    writeln!(out, "phase 1: {} task(s)", plan.phase1.len())?;
    for t in &plan.phase1 {
        writeln!(out, "  {} {} train={} eval={}", t.task_id, t.mode, folds(&t.train_folds), slot(t.eval_fold))?;
    }
    writeln!(out, "barrier: select configs")?;
    writeln!(out, "phase 2: {} task(s)", plan.phase2.len())?;
    for p in &plan.phase2 {
        writeln!(
            out,
            "  run/{}/cfg*/test{}/val- {} train={} eval={}",
            plan.run_id,
            slot(p.test_fold),
            p.mode,
            folds(&p.train_folds),
            slot(p.test_fold)
        )?;
    }
    writeln!(out, "total: {} task(s)", plan.total())?;
    Ok(())
}
