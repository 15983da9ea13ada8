//! The `bench` binary: exit codes, report files and seeded determinism.

use std::path::Path;
use std::process::Command;

use fabric::bench::report::{read_tasks, Summary};

const SMOKE: &str = r#"
name = "smoke"
experiment = "run"
seed = 1

[workload]
function = "noop"
count = 10

[topology]
nodes = 1
workers_per_node = 1
"#;

fn bench(plan: &Path, out: &Path, seed: Option<u64>) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bench"));
    cmd.arg("run").arg("--plan").arg(plan).arg("--out").arg(out);
    if let Some(s) = seed {
        cmd.arg("--seed").arg(s.to_string());
    }
    cmd.output().unwrap()
}

fn summaries(path: &Path) -> Vec<Summary> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap()
}

#[test]
fn ten_task_run_writes_ten_rows() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("smoke.toml");
    std::fs::write(&plan, SMOKE).unwrap();
    let out = dir.path().join("out");
    let o = bench(&plan, &out, None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");

    let text = std::fs::read_to_string(out.join("run/tasks.csv")).unwrap();
    assert_eq!(text.lines().count(), 11);
    let rows = read_tasks(&out.join("run/tasks.csv")).unwrap();
    assert!(rows.iter().all(|r| r.state == fabric_core::TaskState::Succeeded));
    let mut ids: Vec<_> = rows.iter().map(|r| r.task_id).collect();
    let sorted = {
        let mut s = ids.clone();
        s.sort();
        s
    };
    assert_eq!(ids, sorted, "rows are ordered by task id");
    ids.dedup();
    assert_eq!(ids.len(), 10);

    let s = &summaries(&out.join("run/summary.csv"))[0];
    assert_eq!((s.count, s.succeeded, s.lost), (10, 10, 0));
    assert!(out.join("checks.csv").exists() && out.join("plan.toml").exists());
}

#[test]
fn unwritable_output_fails() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("smoke.toml");
    std::fs::write(&plan, SMOKE).unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let o = bench(&plan, &blocker.join("out"), None);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("file"), "error names the path");
}

#[test]
fn invalid_plan_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("bad.toml");
    std::fs::write(&plan, SMOKE.replace("count = 10", "count = 0")).unwrap();
    let o = bench(&plan, &dir.path().join("out"), None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seeded_simulated_provider_reruns_identically() {
    // local provider with seeded queue delays; only wall-clock fields may differ
    let plan_text = r#"
name = "determinism"
experiment = "run"

[workload]
function = "sleep_ms(20)"
count = 30

[topology]
provider = "local"
nodes = 2
workers_per_node = 2
queue_delay_ms = 100
queue_jitter_ms = 200
"#;
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("det.toml");
    std::fs::write(&plan, plan_text).unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        let o = bench(&plan, &out, Some(42));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
        let s = summaries(&out.join("run/summary.csv")).remove(0);
        let plan_echo = std::fs::read_to_string(out.join("plan.toml")).unwrap();
        runs.push((s, plan_echo));
    }
    let key = |s: &Summary| {
        (
            s.experiment.clone(),
            s.point.clone(),
            s.count,
            s.items,
            s.succeeded,
            s.failed,
            s.lost,
            s.duplicates,
            s.partial,
        )
    };
    assert_eq!(key(&runs[0].0), key(&runs[1].0));
    assert_eq!(runs[0].1, runs[1].1);
    assert!(runs[0].1.contains("seed = 42"));
}
