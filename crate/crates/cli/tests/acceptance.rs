//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any failed.

mod common;

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{bin, fixture, Job, Workspace};
use nestcv::checkpoint::{CheckpointStore, StoreOptions};
use nestcv::engine::{
    execute_run, fmt2, load_matrix, plan_dachos, plan_nachos, replay, Algorithm, RunInfo, RunMetadata, RunReport,
};
use nestcv::hpspace::{SearchSpace, SplitMix64};
use nestcv::manifest::{DataItem, Manifest};
use nestcv::partition::{assign_folds, PartitionLevel, PartitionOptions};
use nestcv::scheduler::{makespan_report, InlineExecutor, Manager, ManagerConfig};
use nestcv::synth::{synthetic_manifest, SyntheticSpec};
use nestcv::trainer::MockTrainer;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn nachos(path: &str) -> Result<nestcv::engine::NachosReport, String> {
    let rows = load_matrix(&fixture(path)).map_err(|e| e.to_string())?;
    match replay(&rows, None).map_err(|e| e.to_string())? {
        RunReport::Nachos(r) => Ok(r),
        RunReport::Dachos(_) => Err(format!("{path} replayed as a deployment table")),
    }
}

fn xray_replay() -> Outcome {
    let started = Instant::now();
    let r = nachos("table2_nachos_xray.csv")?;
    let elapsed = started.elapsed();
    let picks: Vec<usize> = r.folds.iter().map(|f| f.jstar).collect();
    check(picks == [2, 1, 8, 5], || format!("selections {picks:?}"))?;
    let s = &r.stats;
    check(close(s.mean, 0.7525, 1e-12), || format!("mean {}", s.mean))?;
    check(format!("{:.4}", s.standard_error) == "0.0312", || format!("se {}", s.standard_error))?;
    check(s.to_string() == "0.75 ± 0.03", || format!("display {s}"))?;
    check(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("h2,h1,h8,h5; {:.4} ± {:.4} shown as {s} in {elapsed:.1?}", s.mean, s.standard_error))
}

fn kidney_replay() -> Outcome {
    let s = nachos("table3_nachos_kidney_test.csv")?.stats;
    check(close(s.mean, 0.839, 1e-12), || format!("mean {}", s.mean))?;
    check(format!("{:.4}", s.sample_sd) == "0.0885", || format!("sd {}", s.sample_sd))?;
    check(format!("{:.4}", s.standard_error) == "0.0280", || format!("se {}", s.standard_error))?;
    check(s.to_string() == "0.84 ± 0.03", || format!("display {s}"))?;
    Ok(format!("mean {:.3} sd {:.4} se {:.4} shown as {s}", s.mean, s.sample_sd, s.standard_error))
}

fn deployment_replays() -> Outcome {
    let mut out = Vec::new();
    for (file, want, vbar, runner_up) in [
        ("table4_dachos_xray.csv", 5, 0.75, 0.7475),
        ("table5_dachos_kidney.csv", 2, 0.898, 0.896),
    ] {
        let rows = load_matrix(&fixture(file)).map_err(|e| e.to_string())?;
        let RunReport::Dachos(r) = replay(&rows, None).map_err(|e| e.to_string())? else {
            return Err(format!("{file} replayed as nested"));
        };
        let sel = &r.selection;
        check(sel.jstar == want, || format!("{file}: picked h{}", sel.jstar))?;
        check(close(sel.vbar_star, vbar, 1e-12), || format!("{file}: vbar {}", sel.vbar_star))?;
        let gap = sel.runner_up_gap.unwrap_or(f64::NAN);
        check(close(gap, vbar - runner_up, 1e-12), || format!("{file}: gap {gap}"))?;
        // both look equal once rounded to two places
        check(fmt2(vbar) == fmt2(runner_up), || format!("{file}: not a near-tie"))?;
        out.push(format!("h{} ({:.4} vs {runner_up:.4})", sel.jstar, sel.vbar_star));
    }
    Ok(out.join(", "))
}

fn task_accounting() -> Outcome {
    let cs = SearchSpace::table1_preset().sample_configs(9, 0);
    let mut out = Vec::new();
    for (alg, k, want) in [("nachos", 4, (108, 4)), ("nachos", 10, (810, 10)), ("dachos", 4, (36, 1))] {
        let p = if alg == "nachos" { plan_nachos("a", k, &cs, 1, 0) } else { plan_dachos("a", k, &cs, 1, 0) }
            .map_err(|e| e.to_string())?;
        let got = (p.phase1.len(), p.phase2.len());
        check(got == want, || format!("{alg} k={k}: {got:?}"))?;
        let closed = if alg == "nachos" { k * (k - 1) * 9 + k } else { k * 9 + 1 };
        check(p.total() == closed, || format!("{alg} k={k}: total {}", p.total()))?;
        out.push(format!("{alg} k={k}: {}+{}", got.0, got.1));
    }
    Ok(out.join(", "))
}

fn job(run_id: &str, trainer_seed: u64) -> RunInfo {
    RunInfo {
        algorithm: Algorithm::Nachos,
        meta: RunMetadata {
            run_id: run_id.into(),
            k: 4,
            n: 9,
            epochs: 3,
            level: "supergroup".into(),
            partition_seed: 1,
            sampling_seed: 2,
            trainer_seed,
        },
        configs: SearchSpace::table1_preset().sample_configs(9, 2),
    }
}

fn parallelism_independence() -> Outcome {
    let started = Instant::now();
    let mut reports = Vec::new();
    for g in [1, 2, 4] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let store = CheckpointStore::open_with(dir.path(), StoreOptions { sync: false }).map_err(|e| e.to_string())?;
        let mut m = Manager::new(ManagerConfig::default(), Some(Arc::new(store)));
        m.spawn_local_workers(g, Arc::new(MockTrainer::default()), None);
        let out = execute_run(&job("par", 7), &mut m).map_err(|e| e.to_string())?;
        m.shutdown();
        reports.push(out.report.to_json());
    }
    let elapsed = started.elapsed();
    check(reports[0] == reports[1] && reports[1] == reports[2], || "reports differ across g".into())?;
    check(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("g=1,2,4 byte-identical ({} bytes) in {elapsed:.1?}", reports[0].len()))
}

fn report_json(store: &Path, run_id: &str) -> Result<String, String> {
    std::fs::read_to_string(store.join("runs").join(run_id).join("report.json")).map_err(|e| e.to_string())
}

fn fresh_workspace(ws: &Workspace, name: &str) -> Result<std::path::PathBuf, String> {
    let dir = ws.path(name);
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    Ok(dir)
}

/// Kills runs of the tiny learner between tasks and at random points inside tasks,
/// resumes each, and compares with an uninterrupted run.
fn fault_tolerance() -> Outcome {
    let started = Instant::now();
    let ws = Workspace::new();
    let mut spec = SyntheticSpec::xray_analog();
    spec.groups_per_class = 8;
    spec.feature_dim = Some(8);
    synthetic_manifest(&spec).write(&ws.path("manifest.csv")).map_err(|e| e.to_string())?;
    let spec = ws.spec(
        "acc",
        &Job { epochs: 4, workers: "local:4", backend: "kind = \"tiny\"", ..Job::default() },
    );
    let run = |store: &Path, extra: &[&str]| {
        bin()
            .current_dir(ws.dir.path())
            .arg("run")
            .arg("--spec")
            .arg(&spec)
            .arg("--store")
            .arg(store)
            .args(extra)
            .output()
            .map_err(|e| e.to_string())
    };

    let golden_store = fresh_workspace(&ws, "golden")?;
    let out = run(&golden_store, &[])?;
    check(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let golden = report_json(&golden_store, "acc")?;

    let mut rng = SplitMix64::new(2024);
    let mut points = Vec::new();
    let mut mid_task = 0;
    for p in 0..3 {
        let n = 1 + rng.below(110) as usize;
        let store = fresh_workspace(&ws, &format!("between{p}"))?;
        let out = run(&store, &["--fault-abort-after-tasks", &n.to_string()])?;
        check(out.status.code() == Some(137), || format!("abort after {n}: {:?}", out.status))?;
        points.push((store, format!("after {n} tasks")));
    }
    for p in 0..3 {
        let store = fresh_workspace(&ws, &format!("kill{p}"))?;
        // two kills in a row on the last store
        let kills = if p == 2 { 2 } else { 1 };
        let mut label = Vec::new();
        for _ in 0..kills {
            // a random number of finished tasks, then a random instant inside the next ones
            let after = 1 + rng.below(40) as usize;
            let delay = Duration::from_micros(rng.below(20_000));
            let mut child = bin()
                .current_dir(ws.dir.path())
                .args(["run", "--spec"])
                .arg(&spec)
                .arg("--store")
                .arg(&store)
                .stdout(std::process::Stdio::null())
                .stderr(std::process::Stdio::piped())
                .spawn()
                .map_err(|e| e.to_string())?;
            let mut lines = BufReader::new(child.stderr.take().expect("piped")).lines();
            let mut seen = 0;
            while seen < after {
                match lines.next() {
                    Some(Ok(l)) if l.starts_with("PROGRESS phase=1") => seen += 1,
                    Some(_) => {}
                    None => return Err(format!("run ended after {seen} progress lines")),
                }
            }
            std::thread::sleep(delay);
            let alive = child.try_wait().map_err(|e| e.to_string())?.is_none();
            check(alive, || format!("run finished before the kill after {after} tasks"))?;
            child.kill().map_err(|e| e.to_string())?;
            child.wait().map_err(|e| e.to_string())?;
            drop(lines);
            let s = CheckpointStore::open(&store).map_err(|e| e.to_string())?;
            let view = s.recovery_view("acc").map_err(|e| e.to_string())?;
            if !view.logged_epoch.is_empty() {
                mid_task += 1;
            }
            label.push(format!(
                "SIGKILL {:.1}ms after task {after} ({} in flight)",
                delay.as_secs_f64() * 1e3,
                view.logged_epoch.len()
            ));
        }
        points.push((store, label.join(" + ")));
    }

    let mut details = Vec::new();
    for (store, label) in &points {
        let out = run(store, &[])?;
        check(out.status.success(), || format!("resume {label}: {}", String::from_utf8_lossy(&out.stderr)))?;
        let text = String::from_utf8_lossy(&out.stdout);
        check(text.starts_with("resumed: "), || format!("resume {label} did not reuse work: {text}"))?;
        check(report_json(store, "acc")? == golden, || format!("report after {label} differs"))?;
        details.push(label.clone());
    }
    let elapsed = started.elapsed();
    check(mid_task >= 1, || "no kill landed inside a task".into())?;
    check(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} interruptions ({} inside tasks) all resume to the uninterrupted report; {} in {elapsed:.1?}",
        details.len() + 1,
        mid_task,
        details.join("; ")
    ))
}

/// Random manifest with nested groups and supergroups.
fn random_manifest(seed: u64, items: usize) -> Manifest {
    let mut rng = SplitMix64::new(seed);
    let supergroups = 1 + rng.below(30) as usize;
    let groups = supergroups + rng.below(400) as usize;
    let parent: Vec<usize> = (0..groups).map(|g| if g < supergroups { g } else { rng.below(supergroups as u64) as usize }).collect();
    let rows = (0..items)
        .map(|i| {
            let g = rng.below(groups as u64) as usize;
            let mut item = DataItem::new(format!("i{i}"), if rng.below(3) == 0 { "b".into() } else { "a".into() });
            item.group_id = format!("g{g}");
            item.supergroup_id = format!("s{}", parent[g]);
            item
        })
        .collect();
    Manifest::new(rows).expect("ids are unique")
}

fn splits(manifest: &Manifest, fold_of: impl Fn(&str) -> usize, key: impl Fn(&DataItem) -> &str) -> usize {
    let mut folds: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for item in manifest.items() {
        folds.entry(key(item)).or_default().insert(fold_of(&item.item_id));
    }
    folds.values().filter(|f| f.len() > 1).count()
}

fn partition_integrity() -> Outcome {
    let started = Instant::now();
    let mut runner = TestRunner::new(Config { cases: 60, failure_persistence: None, ..Config::default() });
    let strategy = (any::<u64>(), 1usize..=10_000, 2usize..=10, any::<u64>(), any::<bool>());
    let largest = Cell::new(0);
    let cases = Cell::new(0);
    runner
        .run(&strategy, |(mseed, items, k, seed, stratify)| {
            let manifest = random_manifest(mseed, items);
            largest.set(largest.get().max(manifest.len()));
            cases.set(cases.get() + 1);
            for level in [PartitionLevel::Item, PartitionLevel::Group, PartitionLevel::Supergroup] {
                let options = PartitionOptions { stratify: stratify && level == PartitionLevel::Item };
                let a = match assign_folds(&manifest, k, level, seed, options) {
                    Ok(a) => a,
                    // fewer units than folds is refused, never silently split
                    Err(_) => {
                        let units: BTreeSet<&str> = manifest.items().iter().map(|i| level.key(i)).collect();
                        prop_assert!(units.len() < k);
                        continue;
                    }
                };
                let fold = |id: &str| a.fold_of(id).expect("every item assigned");
                prop_assert!(a.check_integrity(&manifest).is_empty());
                match level {
                    PartitionLevel::Item => {
                        let sizes = a.fold_sizes();
                        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{:?}", sizes);
                    }
                    PartitionLevel::Group => {
                        prop_assert_eq!(splits(&manifest, fold, |i| &i.group_id), 0);
                    }
                    PartitionLevel::Supergroup => {
                        prop_assert_eq!(splits(&manifest, fold, |i| &i.supergroup_id), 0);
                        prop_assert_eq!(splits(&manifest, fold, |i| &i.group_id), 0);
                    }
                }
                let again = assign_folds(&manifest, k, level, seed, options).unwrap();
                prop_assert_eq!(again.to_text(), a.to_text());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    // the two dataset shapes used as worked examples
    let xray = synthetic_manifest(&SyntheticSpec::xray_analog());
    let sizes = assign_folds(&xray, 4, PartitionLevel::Supergroup, 0, PartitionOptions::default())
        .map_err(|e| e.to_string())?
        .fold_sizes();
    check(sizes == [1240; 4], || format!("x-ray analog folds {sizes:?}"))?;
    let kidney = synthetic_manifest(&SyntheticSpec::kidney_analog());
    let sizes = assign_folds(&kidney, 10, PartitionLevel::Supergroup, 0, PartitionOptions::default())
        .map_err(|e| e.to_string())?
        .fold_sizes();
    check(sizes == [1800; 10], || format!("kidney analog folds {sizes:?}"))?;

    let elapsed = started.elapsed();
    check(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{} random manifests up to {} items, 3 levels, no violations; in {elapsed:.1?}", cases.get(), largest.get()))
}

fn variance(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

fn variance_and_speedup() -> Outcome {
    let mut means = Vec::new();
    let mut singles = Vec::new();
    for seed in 0..200 {
        let mut ex = InlineExecutor::new(Box::new(MockTrainer::default()), None);
        let RunReport::Nachos(r) = execute_run(&job("var", seed), &mut ex).map_err(|e| e.to_string())?.report else {
            return Err("expected a nested report".into());
        };
        means.push(r.stats.mean);
        singles.extend(r.folds.iter().map(|f| f.t));
    }
    let ratio = variance(&means) / (variance(&singles) / 4.0);
    check((0.5..=2.0).contains(&ratio), || format!("variance ratio {ratio:.3}"))?;

    let configs = SearchSpace::table1_preset().sample_configs(4, 5);
    let tasks = plan_dachos("speed", 4, &configs, 1, 0).map_err(|e| e.to_string())?.phase1;
    check(tasks.len() == 16, || format!("{} tasks", tasks.len()))?;
    let mut m = Manager::new(ManagerConfig::default(), None);
    m.spawn_local_workers(4, Arc::new(MockTrainer::with_epoch_delay(Duration::from_millis(100))), None);
    m.dispatch("speed", tasks).map_err(|e| e.to_string())?;
    let mk = makespan_report(m.trace());
    m.shutdown();
    check(mk.wall_secs <= 0.5, || format!("wall {:.3}s", mk.wall_secs))?;
    check(mk.speedup >= 3.6, || format!("speedup {:.2}", mk.speedup))?;
    check(mk.within_bound(), || format!("{mk:?}"))?;
    Ok(format!(
        "variance ratio {ratio:.3} over 200 seeds; 16x100ms on g=4: wall {:.0}ms, speedup {:.2}",
        mk.wall_secs * 1e3,
        mk.speedup
    ))
}

fn no_leakage() -> Outcome {
    let mut tasks = 0;
    for k in 3..=10 {
        for n in 1..=9 {
            let cs = SearchSpace::table1_preset().sample_configs(n, k as u64);
            let p = plan_nachos("leak", k, &cs, 1, 0).map_err(|e| e.to_string())?;
            for t in &p.phase1 {
                tasks += 1;
                let i = t.test_fold.ok_or_else(|| format!("{} has no test fold", t.task_id))?;
                let m = t.eval_fold.ok_or_else(|| format!("{} has no validation fold", t.task_id))?;
                check(!t.train_folds.contains(&i) && m != i, || format!("{} sees test fold {i}", t.task_id))?;
                check(!t.train_folds.contains(&m), || format!("{} trains on its validation fold", t.task_id))?;
                let mut all: Vec<usize> = t.train_folds.clone();
                all.extend([i, m]);
                all.sort_unstable();
                check(all == (0..k).collect::<Vec<_>>(), || format!("{} fold cover {all:?}", t.task_id))?;
            }
            for ph in &p.phase2 {
                let i = ph.test_fold.ok_or("phase 2 without a test fold")?;
                check(!ph.train_folds.contains(&i), || format!("phase 2 for fold {i} trains on it"))?;
                check(ph.train_folds.len() == k - 1, || format!("phase 2 for fold {i} drops extra folds"))?;
            }
        }
    }
    Ok(format!("{tasks} phase-1 tasks over k=3..10, n=1..9"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("x-ray nested replay", xray_replay),
        ("kidney test-row replay", kidney_replay),
        ("deployment replays", deployment_replays),
        ("task accounting", task_accounting),
        ("parallelism independence", parallelism_independence),
        ("fault tolerance", fault_tolerance),
        ("partition integrity", partition_integrity),
        ("variance reduction and speedup", variance_and_speedup),
        ("no leakage", no_leakage),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {}. {name}: {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name}: {why}", n + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
