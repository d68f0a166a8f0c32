use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_hetzero");

fn device(name: &str, c1: f64) -> String {
    format!(
        r#"{{"name": "{name}", "total_mem": 17179869184, "act_mem_per_batch": 536870912, "compute_fixed": 0.02, "compute_per_batch": {c1}, "optimizer_time": 0.01}}"#
    )
}

fn spec(c1: [f64; 4], params: u64) -> String {
    let devices: Vec<String> = c1
        .iter()
        .enumerate()
        .map(|(i, &c)| device(&format!("gpu{i}"), c))
        .collect();
    format!(
        r#"{{
  "cluster": {{
    "devices": [{}],
    "link_bandwidths": [1e10, 1e10, 1e10, 1e10],
    "link_latency": 1e-5
  }},
  "model": {{"param_count": {params}, "hidden_size": 1024, "num_layers": 24}},
  "gbs": 256,
  "iterations": 3
}}"#,
        devices.join(",\n      ")
    )
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json report")
}

#[test]
fn compare_reports_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(
        dir.path(),
        "b.json",
        &spec([0.05, 0.05, 0.1, 0.1], 350_000_000),
    );
    let v = json(&run(&["compare", "--spec", &s]));
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert!(r["speedup"].as_f64().unwrap() >= 1.0, "{r}");
    }
    let v = json(&run(&["compare", "--spec", &s, "--stage", "3"]));
    assert_eq!(v["rows"].as_array().unwrap().len(), 1);
}

#[test]
fn homogeneous_plan_is_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(dir.path(), "h.json", &spec([0.05; 4], 350_000_000));
    let v = json(&run(&["plan", "--spec", &s, "--stage", "0"]));
    let devices = v["plan"]["devices"].as_array().unwrap();
    let b: Vec<u64> = devices
        .iter()
        .map(|d| d["micro_batch"].as_u64().unwrap())
        .collect();
    assert!(b.iter().all(|&x| x == b[0]), "{b:?}");
    assert_eq!(v["plan"]["objective"].as_f64().unwrap(), 0.0);
}

#[test]
fn plan_file_feeds_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(
        dir.path(),
        "b.json",
        &spec([0.05, 0.05, 0.1, 0.1], 350_000_000),
    );
    let plan_path = dir.path().join("plan.json").to_string_lossy().into_owned();
    assert!(
        run(&["plan", "--spec", &s, "--stage", "2", "--out", &plan_path])
            .status
            .success()
    );
    let split = json(&run(&["simulate", "--spec", &s, "--plan", &plan_path]));
    let fused = json(&run(&["compare", "--spec", &s, "--stage", "2"]));
    assert_eq!(
        split["planned"]["mean_throughput"],
        fused["rows"][0]["planned_throughput"]
    );
    assert_eq!(
        split["baseline"]["mean_throughput"],
        fused["rows"][0]["baseline_throughput"]
    );

    // The plan's own stage takes precedence over --stage; a gbs mismatch does not.
    let restaged = json(&run(&[
        "simulate", "--spec", &s, "--stage", "0", "--plan", &plan_path,
    ]));
    assert_eq!(restaged["planned"], split["planned"]);
    let other = write(
        dir.path(),
        "other.json",
        &spec([0.05, 0.05, 0.1, 0.1], 350_000_000).replace("256", "200"),
    );
    let bad = run(&["simulate", "--spec", &other, "--plan", &plan_path]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(
        dir.path(),
        "b.json",
        &spec([0.05, 0.05, 0.1, 0.1], 350_000_000),
    );
    for fmt in ["obj", "table"] {
        let a = dir
            .path()
            .join(format!("a.{fmt}"))
            .to_string_lossy()
            .into_owned();
        let b = dir
            .path()
            .join(format!("b.{fmt}"))
            .to_string_lossy()
            .into_owned();
        for out in [&a, &b] {
            let o = run(&[
                "simulate", "--spec", &s, "--seed", "5", "--format", fmt, "--out", out,
            ]);
            assert!(o.status.success());
        }
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn table_format_is_csv() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(
        dir.path(),
        "b.json",
        &spec([0.05, 0.05, 0.1, 0.1], 350_000_000),
    );
    let o = run(&["profile", "--spec", &s, "--format", "table"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("device_id,mbs,probes,batch,seconds\n"));
    assert!(text.lines().count() > 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.json",
        &spec([0.05; 4], 1).replacen("17179869184", "-4", 1),
    );
    let o = run(&["plan", "--spec", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("total_mem"));

    // 40B parameters cannot fit four 16 GiB devices even fully sharded.
    let huge = write(dir.path(), "huge.json", &spec([0.05; 4], 40_000_000_000));
    assert_eq!(run(&["plan", "--spec", &huge]).status.code(), Some(2));

    assert_eq!(run(&["check", "--iterations", "50"]).status.code(), Some(0));
    assert_eq!(run(&["plan"]).status.code(), Some(1));
    assert_eq!(run(&["nonsense"]).status.code(), Some(1));
    let ok = write(dir.path(), "ok.json", &spec([0.05; 4], 1));
    assert_eq!(
        run(&["plan", "--spec", &ok, "--gbs", "0"]).status.code(),
        Some(1)
    );
}
