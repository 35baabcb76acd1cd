mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn expertq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_expertq")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn run(cmd: &str, cfg: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    expertq(&args)
}

#[test]
fn capacity_modes() {
    let dir = tempfile::tempdir().unwrap();
    let inst = serde_json::to_value(common::diverse(3, 0.5)).unwrap();
    let cfg = write(dir.path(), "c.json", &json!({ "instance": inst, "mode": "multi-dual" }));
    let out = dir.path().join("dual");
    let o = run("capacity", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&out.join("capacity.json"));
    assert!((doc["lambda_star"].as_f64().unwrap() - 3.0).abs() < 1e-9);
    assert!((doc["per_expert_lambda_star"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(doc["duality_gap"].as_f64().unwrap() <= 0.03);
    assert_eq!(doc["certificate"]["kind"], "routing");

    let single = serde_json::to_value(common::two_topic(0.5)).unwrap();
    let lam = |mode: &str, extra: Value| {
        let mut c = json!({ "instance": single, "mode": mode });
        if let Value::Object(m) = extra {
            c.as_object_mut().unwrap().extend(m);
        }
        let cfg = write(dir.path(), &format!("{mode}.json"), &c);
        let out = dir.path().join(mode);
        assert_eq!(run("capacity", &cfg, &out, &[]).status.code(), Some(0));
        read_json(&out.join("capacity.json"))["lambda_star"].to_string()
    };
    let s = lam("single", json!({}));
    assert_eq!(s, lam("loss", json!({ "epsilon": 0.0 })));
    assert_eq!(s.parse::<f64>().unwrap().to_bits(), expertq::capacity::single_capacity(&[0.5, 0.5], &[1.0, 0.5]).lambda_star.to_bits());
}

#[test]
fn malformed_and_invalid_configs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = dir.path().join("o");
    let o = run("capacity", bad.to_str().unwrap(), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("capacity.json").exists());

    let mut inst = serde_json::to_value(common::two_topic(0.5)).unwrap();
    inst["pmf"] = json!([[0.7, 0.7]]);
    inst["experts"][0]["T"] = json!([0.5, 2.0]);
    let cfg = write(dir.path(), "inv.json", &json!({ "instance": inst, "mode": "single" }));
    let o = run("capacity", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("pmf") && err.contains("[topic 0]"), "{err}");
    assert!(!out.join("capacity.json").exists());
}

fn sim_cfg(inst: &Value, scheduler: Value, horizon: u64, seed: u64) -> Value {
    json!({ "instance": inst, "scheduler": scheduler, "horizon": horizon, "seed": seed })
}

#[test]
fn simulate_outputs_and_overwrite_guard() {
    let dir = tempfile::tempdir().unwrap();
    let inst = serde_json::to_value(common::two_topic(0.6)).unwrap();
    let cfg = write(dir.path(), "s.json", &sim_cfg(&inst, json!({ "kind": "work_conserving" }), 20_000, 4));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run("simulate", &cfg, &a, &[]).status.code(), Some(0));
    assert_eq!(run("simulate", &cfg, &b, &[]).status.code(), Some(0));
    let trace = fs::read(a.join("trace.csv")).unwrap();
    assert_eq!(trace, fs::read(b.join("trace.csv")).unwrap());
    assert!(trace.starts_with(b"t,total_queue,cum_loss,cum_departures\n"));
    let summary = read_json(&a.join("summary.json"));
    for key in ["mean_queue", "loss_rate", "throughput"] {
        assert!(!summary["summary"][key].is_null(), "{key}");
    }
    assert_eq!(summary["stability"]["verdict"], "stable");

    // Existing files are not replaced without --force.
    assert_eq!(run("simulate", &cfg, &a, &[]).status.code(), Some(2));
    assert_eq!(run("simulate", &cfg, &a, &["--force"]).status.code(), Some(0));
    assert_eq!(fs::read(a.join("trace.csv")).unwrap(), trace);
    assert_eq!(run("simulate", &cfg, &a, &["--force", "--seed-override", "99"]).status.code(), Some(0));
    assert_ne!(fs::read(a.join("trace.csv")).unwrap(), trace);
}

#[test]
fn simulate_zero_load_and_loss_budget() {
    let dir = tempfile::tempdir().unwrap();
    let idle = serde_json::to_value(common::two_topic(0.0)).unwrap();
    let cfg = write(dir.path(), "z.json", &sim_cfg(&idle, json!({ "kind": "work_conserving" }), 5_000, 1));
    let out = dir.path().join("z");
    assert_eq!(run("simulate", &cfg, &out, &[]).status.code(), Some(0));
    let text = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(1) == Some("0")));

    let eps = 0.5;
    let x0 = serde_json::to_value(common::unanswerable_topic(0.95)).unwrap();
    let cfg = write(dir.path(), "l.json", &sim_cfg(&x0, json!({ "kind": "loss", "epsilon": eps }), 100_000, 2));
    let out = dir.path().join("l");
    assert_eq!(run("simulate", &cfg, &out, &[]).status.code(), Some(0));
    let summary = read_json(&out.join("summary.json"));
    let loss = summary["summary"]["loss_rate"][0].as_f64().unwrap();
    assert!(loss <= eps + 0.01, "loss rate {loss}");
}

#[test]
fn missing_certificate_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let inst = serde_json::to_value(common::two_topic(0.5)).unwrap();
    let cfg = write(dir.path(), "m.json", &sim_cfg(&inst, json!({ "kind": "loss" }), 1_000, 1));
    let out = dir.path().join("m");
    assert_eq!(run("simulate", &cfg, &out, &[]).status.code(), Some(3));
    assert!(!out.join("trace.csv").exists());

    let bad = serde_json::to_value(common::unanswerable_topic(0.5)).unwrap();
    let cfg = write(dir.path(), "r.json", &sim_cfg(&bad, json!({ "kind": "routing" }), 1_000, 1));
    assert_eq!(run("simulate", &cfg, &out, &[]).status.code(), Some(3));
}

fn sweep(dir: &Path, name: &str, inst: Value, scheduler: Value, grid: Value, horizon: u64) -> Value {
    let cfg = json!({ "instance": inst, "scheduler": scheduler, "horizon": horizon, "grid": grid, "seeds": [1, 2, 3] });
    let cfg = write(dir, &format!("{name}.json"), &cfg);
    let out = dir.join(name);
    let o = run("sweep", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("lambda,seed,verdict,slope,final_quarter_mean"));
    read_json(&out.join("bracket.json"))
}

#[test]
fn sweep_brackets_single_expert_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let inst = serde_json::to_value(common::two_topic(0.5)).unwrap();
    let grid = json!({ "start": 0.5, "stop": 1.5, "step": 0.05, "relative": true });
    let b = sweep(dir.path(), "single", inst, json!({ "kind": "work_conserving" }), grid, 200_000);
    assert!((b["analytic_lambda_star"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(b["contains_analytic"], true, "{b}");
    assert!(b["lambda_lo"].as_f64().unwrap() <= 2.0 / 3.0);
    assert!(b["lambda_hi"].as_f64().unwrap() >= 2.0 / 3.0);
}

#[test]
fn sweep_brackets_per_expert_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let inst = serde_json::to_value(common::diverse(3, 0.5)).unwrap();
    let grid = json!({ "start": 0.5, "stop": 1.5, "step": 0.1, "relative": true });
    let b = sweep(dir.path(), "div", inst, json!({ "kind": "routing" }), grid, 100_000);
    assert!((b["analytic_lambda_star"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(b["contains_analytic"], true, "{b}");
}

#[test]
fn single_point_sweep_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let inst = serde_json::to_value(common::two_topic(0.5)).unwrap();
    let grid = json!({ "start": 0.3, "stop": 0.3, "step": 0.1 });
    let b = sweep(dir.path(), "one", inst, json!({ "kind": "work_conserving" }), grid, 20_000);
    assert_eq!(b["lambda_lo"].as_f64(), Some(0.3));
    assert!(b["lambda_hi"].is_null());
}

fn verify(dir: &Path, name: &str, cfg: Value) -> (Option<i32>, Value) {
    let cfg = write(dir, &format!("{name}.json"), &cfg);
    let out = dir.join(name);
    let o = run("verify", &cfg, &out, &[]);
    (o.status.code(), read_json(&out.join("report.json")))
}

fn check<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["checks"].as_array().unwrap().iter().find(|c| c["name"] == name).unwrap()
}

#[test]
fn verify_diversity_instance() {
    let dir = tempfile::tempdir().unwrap();
    let inst = serde_json::to_value(common::diverse(3, 0.5)).unwrap();
    let (code, report) = verify(dir.path(), "div", json!({ "instance": inst, "horizon": 50_000 }));
    assert_eq!(code, Some(0), "{report}");
    assert!(check(&report, "duality_gap")["detail"]["gap"].as_f64().unwrap() <= 0.03);
}

#[test]
fn verify_single_expert_drift() {
    let dir = tempfile::tempdir().unwrap();
    let inst = serde_json::to_value(common::two_topic(0.5)).unwrap();
    let (code, report) = verify(dir.path(), "one", json!({ "instance": inst, "horizon": 100_000 }));
    assert_eq!(code, Some(0), "{report}");
    assert_eq!(check(&report, "drift")["passed"], true);
    assert_eq!(check(&report, "corollary1")["passed"], true);
}

#[test]
fn verify_rejects_corrupted_routing() {
    let dir = tempfile::tempdir().unwrap();
    let inst = serde_json::to_value(common::identical(2, 0.4)).unwrap();
    let s = json!([[0.9, 0.1], [0.1, 0.9]]);
    let (code, report) = verify(dir.path(), "bad", json!({ "instance": inst, "horizon": 50_000, "s": s }));
    assert_eq!(code, Some(1));
    assert_eq!(check(&report, "routing_frequency")["passed"], false);
    assert!(check(&report, "routing_frequency")["detail"]["max_z"].as_f64().unwrap() > 4.0);
}
