mod common;

use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::process::Stdio;
use std::time::{Duration, Instant};

use common::{bin, fixture, nestcv, stderr, stdout, Job, Workspace};
use nestcv::engine::RunReport;
use nestcv_cli::jobspec::{AxisSpec, BackendKind, BackendSpec, JobSpec, Seeds, SpaceSpec};
use nestcv::engine::Algorithm;
use nestcv::partition::PartitionLevel;
use proptest::prelude::*;

#[test]
fn usage_errors_and_help() {
    assert_eq!(nestcv(&[]).status.code(), Some(1));
    assert_eq!(nestcv(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(nestcv(&["--help"]).status.code(), Some(0));
    assert_eq!(nestcv(&["run", "--spec", "/nonexistent.toml"]).status.code(), Some(1));
}

#[test]
fn replay_tables() {
    let out = nestcv(&["replay", fixture("table2_nachos_xray.csv").to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("Average and standard error 0.75 ± 0.03"), "{text}");
    assert!(text.contains("mean 0.7525  sd 0.0624  se 0.0312"), "{text}");

    let out = nestcv(&["replay", fixture("table3_nachos_kidney_test.csv").to_str().unwrap()]);
    assert!(stdout(&out).contains("0.84 ± 0.03"), "{}", stdout(&out));

    let out = nestcv(&["replay", fixture("table4_dachos_xray.csv").to_str().unwrap()]);
    assert!(stdout(&out).contains("best: h5 (vbar 0.7500, lead 0.0025)"));
    let out = nestcv(&["replay", "--json", fixture("table5_dachos_kidney.csv").to_str().unwrap()]);
    let RunReport::Dachos(r) = RunReport::from_json(&stdout(&out)).unwrap() else { panic!() };
    assert_eq!(r.selection.jstar, 2);
}

#[test]
fn malformed_matrix_names_the_row() {
    let ws = Workspace::new();
    let bad = ws.path("bad.csv");
    std::fs::write(&bad, "test_fold,config_index,val_fold,metric\n-,0,0,0.5\n-,0,1,high\n").unwrap();
    let out = nestcv(&["replay", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("row 3"), "{}", stderr(&out));
    let out = nestcv(&["replay", ws.path("missing.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn nachos_refuses_two_folds() {
    let ws = Workspace::new();
    let spec = ws.spec("small", &Job { k: 2, ..Job::default() });
    let out = ws.run(&spec, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("k >= 3"), "{}", stderr(&out));
    assert!(!ws.path("store").join("metadata.jsonl").exists());
}

#[test]
fn plan_lists_both_phases() {
    let ws = Workspace::new();
    let out = nestcv(&["plan", "--spec", ws.spec("p", &Job::default()).to_str().unwrap()]);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "phase 1: 108 task(s)");
    assert_eq!(lines[1], "  run/p/cfg0/test0/val1 train_val train=2,3 eval=1");
    assert_eq!(lines[109], "barrier: select configs");
    assert_eq!(lines[110], "phase 2: 4 task(s)");
    assert_eq!(*lines.last().unwrap(), "total: 112 task(s)");
}

#[test]
fn rerun_skips_everything_and_report_matches_the_log() {
    let ws = Workspace::new();
    let spec = ws.spec("golden", &Job::default());
    let first = ws.run(&spec, &["--json"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stderr(&first).contains("PROGRESS phase=1 done=108/108"));
    let live = stdout(&first);

    let second = ws.run(&spec, &["--json"]);
    let text = stdout(&second);
    let (head, rest) = text.split_once('\n').unwrap();
    assert_eq!(head, "all tasks skipped (112 already completed)");
    assert_eq!(rest, live);

    let store = ws.path("store");
    let out = nestcv(&["report", "--store", store.to_str().unwrap(), "--run-id", "golden", "--json"]);
    assert_eq!(stdout(&out), live);
    let saved = std::fs::read_to_string(store.join("runs/golden/report.json")).unwrap();
    assert_eq!(saved, live);
    assert!(store.join("runs/golden/folds.csv").exists());

    let out = bin()
        .env("NESTCV_STORE", &store)
        .args(["report", "--run-id", "golden"])
        .output()
        .unwrap();
    assert!(stdout(&out).contains("Average and standard error"));
    let out = nestcv(&["report", "--store", store.to_str().unwrap(), "--run-id", "other"]);
    assert_eq!(out.status.code(), Some(1));
    let out = nestcv(&["report", "--store", ws.path("nowhere").to_str().unwrap(), "--run-id", "golden"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn interrupted_run_reports_progress_then_resumes() {
    let ws = Workspace::new();
    let spec = ws.spec("cut", &Job { workers: "local:1", ..Job::default() });
    let out = ws.run(&spec, &["--fault-abort-after-tasks", "30"]);
    assert_eq!(out.status.code(), Some(137));

    let store = ws.path("store");
    let out = nestcv(&["report", "--store", store.to_str().unwrap(), "--run-id", "cut"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("run cut in progress\nphase 1: 30/108 tasks (27.8%)\nphase 2: 0/4 tasks (0.0%)"), "{text}");

    let out = ws.run(&spec, &[]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("resumed: 30 task(s) reused, 82 trained\n"), "{}", stdout(&out));
}

#[test]
fn tiny_backend_deployment_run() {
    let ws = Workspace::new();
    let spec = ws.spec(
        "deploy",
        &Job { algorithm: "dachos", n: 3, epochs: 3, backend: "kind = \"tiny\"", ..Job::default() },
    );
    let out = ws.run(&spec, &["--json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let RunReport::Dachos(r) = RunReport::from_json(&stdout(&out)).unwrap() else { panic!() };
    let model = r.model.unwrap();
    assert!(ws.path("store/models").join(&model.artifact_ref).exists());
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn remote_worker_joins_mid_run_and_exits_cleanly() {
    let ws = Workspace::new();
    let spec = ws.spec(
        "remote",
        &Job { workers: "local:1", backend: "kind = \"mock\"\nepoch_delay_ms = 5", ..Job::default() },
    );
    let mut run = bin()
        .current_dir(ws.dir.path())
        .args(["run", "--listen", "127.0.0.1:0", "--spec"])
        .arg(&spec)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(run.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("manager announces its address").unwrap();
        if let Some(a) = line.strip_prefix("listening for workers on ") {
            break a.to_string();
        }
    };
    // wait for some progress so the worker really joins mid-run
    let mut seen = 0;
    for line in lines.by_ref() {
        if line.unwrap().starts_with("PROGRESS phase=1") {
            seen += 1;
            if seen == 5 {
                break;
            }
        }
    }
    let drain = std::thread::spawn(move || lines.count());
    let worker = bin()
        .args(["worker", "--connect", &addr, "--worker-id", "late", "--slots", "2"])
        .output();
    let status = run.wait().unwrap();
    drain.join().unwrap();
    assert!(status.success());
    let worker = worker.unwrap();
    assert!(worker.status.success(), "{}", stderr(&worker));

    let received: usize = stderr(&worker)
        .trim()
        .strip_prefix("worker late: ")
        .and_then(|s| s.strip_suffix(" task(s) received"))
        .and_then(|n| n.parse().ok())
        .unwrap_or_else(|| panic!("{}", stderr(&worker)));
    assert!(received > 0, "remote worker trained nothing");

    let solo = Workspace::new();
    let golden = solo.run(&solo.spec("remote", &Job { workers: "local:3", ..Job::default() }), &["--json"]);
    let out = nestcv(&["report", "--store", ws.path("store").to_str().unwrap(), "--run-id", "remote", "--json"]);
    assert_eq!(stdout(&out), stdout(&golden));
}

#[test]
fn manager_dials_listening_workers() {
    let ws = Workspace::new();
    let ports = [free_port(), free_port()];
    let workers: Vec<_> = ports
        .iter()
        .enumerate()
        .map(|(i, p)| {
            bin()
                .args(["worker", "--listen", &format!("127.0.0.1:{p}"), "--worker-id", &format!("w{i}")])
                .stderr(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    let pool = ws.path("pool.txt");
    std::fs::write(&pool, format!("# two hosts\nw0 127.0.0.1:{}\nw1 127.0.0.1:{} 1\n", ports[0], ports[1])).unwrap();
    let spec = ws.spec("dial", &Job { workers: "pool.txt", n: 3, ..Job::default() });
    let out = ws.run(&spec, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    for mut w in workers {
        assert!(w.wait().unwrap().success());
    }
}

#[test]
fn worker_with_bad_endpoint_exits_nonzero() {
    let started = Instant::now();
    let out = nestcv(&["worker", "--connect", &format!("127.0.0.1:{}", free_port())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(started.elapsed() < Duration::from_secs(30));
    let out = nestcv(&["worker", "--connect", "not an address"]);
    assert_eq!(out.status.code(), Some(1));
}

fn arb_spec() -> impl Strategy<Value = JobSpec> {
    let name = "[a-z][a-z0-9_-]{0,10}";
    (
        (name, prop::bool::ANY, 3usize..12, 1usize..20, 1u32..50),
        (prop::sample::select(vec!["item", "group", "supergroup"]), prop::bool::ANY, 0u32..4),
        (any::<u64>(), any::<u64>(), any::<u64>()),
        prop::option::of(prop::collection::vec(("[a-z_]{1,8}", prop::collection::vec("[a-z0-9.]{1,6}", 1..4)), 1..4)),
        (0usize..3, prop::option::of(1u64..1000), prop::option::of(0.5f64..60.0)),
    )
        .prop_map(|((run_id, dachos, k, n, epochs), (level, stratify, retries), seeds, axes, (kind, delay, hb))| {
            let kind = [BackendKind::Mock, BackendKind::Tiny, BackendKind::Exec][kind];
            JobSpec {
                version: 1,
                run_id,
                algorithm: if dachos { Algorithm::Dachos } else { Algorithm::Nachos },
                manifest: "data/manifest.csv".into(),
                k,
                level: level.parse::<PartitionLevel>().unwrap(),
                stratify,
                n,
                epochs,
                store: "/var/store".into(),
                workers: "local:4".into(),
                listen: None,
                retries,
                heartbeat_secs: hb,
                seeds: Seeds { partition: seeds.0, sampling: seeds.1, trainer: seeds.2 },
                space: match axes {
                    Some(axes) => SpaceSpec {
                        axes: Some(axes.into_iter().map(|(name, choices)| AxisSpec { name, choices }).collect()),
                        ..SpaceSpec::default()
                    },
                    None => SpaceSpec { preset: Some("table1".into()), ..SpaceSpec::default() },
                },
                backend: BackendSpec {
                    kind,
                    command: if kind == BackendKind::Exec { vec!["python3".into(), "t.py".into()] } else { vec![] },
                    timeout_secs: delay,
                    epoch_delay_ms: delay.filter(|_| kind == BackendKind::Mock),
                },
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn job_spec_round_trips_through_toml(spec in arb_spec()) {
        let text = spec.to_toml();
        let back = JobSpec::parse(&text).unwrap();
        prop_assert_eq!(back, spec);
    }
}
