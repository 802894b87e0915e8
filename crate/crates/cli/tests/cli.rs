use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn run(cmd: &str, config: &Value, dir: &Path, extra: &[&str]) -> (Output, PathBuf) {
    let cfg_path = dir.join(format!("{cmd}.json"));
    std::fs::write(&cfg_path, serde_json::to_string(config).unwrap()).unwrap();
    let out = dir.join(format!("out-{cmd}"));
    let output = Command::new(env!("CARGO_BIN_EXE_di4c-lab"))
        .arg(cmd)
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .env("DI4C_THREADS", "2")
        .output()
        .unwrap();
    (output, out)
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn converge_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "converge": { "delta": 0.1, "expect_slope": [-1.25, -0.85] }
    });
    let (o, out) = run("converge", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out.join("convergence.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("N,tv,n_times_tv"));
    assert_eq!(lines.count(), 7);
    assert!(csv.contains("e-"));
    let meta: Value = serde_json::from_str(&read(&out.join("metadata.json"))).unwrap();
    assert_eq!(meta["threads"], 2);
}

#[test]
fn converge_one_dimension_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "forward": { "kind": "homogeneous", "preset": "uniform" },
        "data": { "preset": "random", "states": 3, "dims": 1, "seed": 4 },
        "converge": { "steps": [1, 2, 4, 8], "expect_max_tv": 1e-9 }
    });
    let (o, out) = run("converge", &cfg, dir.path(), &["--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["passed"], true);
    for row in summary["report"]["rows"].as_array().unwrap() {
        assert!(row["tv"].as_f64().unwrap() < 1e-9);
    }
    assert!(out.join("convergence.json").exists());
}

#[test]
fn failed_assertion_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({ "converge": { "delta": 0.1, "expect_max_tv": 1e-6 } });
    let (o, _) = run("converge", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ \"grid\": { \"steps\": 4, }").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_di4c-lab"))
        .args(["converge", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    let (o, _) = run("converge", &json!({ "unknown": 1 }), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn distill_zero_iterations_keeps_init() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({ "grid": { "steps": 4 }, "model": { "components": 2 }, "train": { "iterations": 0 } });
    let (o, out) = run("distill", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let student: Value = serde_json::from_str(&read(&out.join("student.json"))).unwrap();
    let teacher: Value = serde_json::from_str(&read(&out.join("teacher.json"))).unwrap();
    let logits = student["logits"].as_array().unwrap();
    let init_noise_free: Vec<&Value> = logits.iter().take(teacher["logits"].as_array().unwrap().len()).collect();
    assert_eq!(init_noise_free, teacher["logits"].as_array().unwrap().iter().collect::<Vec<_>>());
}

#[test]
fn distill_is_deterministic_and_improves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "grid": { "steps": 8 },
        "model": { "components": 4 },
        "train": { "learning_rate": 5.0, "iterations": 4000, "eval_every": 1000 }
    });
    let (o, out) = run("distill", &cfg, dir.path(), &["--seed", "3", "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["student_beats_teacher_one_step"], true);
    let first = (read(&out.join("trace.csv")), std::fs::read(out.join("student.bin")).unwrap());
    let (o, out) = run("distill", &cfg, dir.path(), &["--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(first.0, read(&out.join("trace.csv")));
    assert_eq!(first.1, std::fs::read(out.join("student.bin")).unwrap());
    assert!(first.0.starts_with("iteration,total,distil,consis,corr,marginal,grad_norm"));

    // The checkpoint feeds the sampler.
    let sample_cfg = json!({
        "grid": { "steps": 1 },
        "sample": { "model": { "checkpoint": out.join("student.bin") }, "dense": true }
    });
    let (o, sout) = run("sample", &sample_cfg, dir.path(), &["--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s: Value = serde_json::from_slice(&o.stdout).unwrap();
    let tv = s["tv_to_data"].as_f64().unwrap();
    assert!((tv - summary["student_one_step_tv"].as_f64().unwrap()).abs() < 1e-12);
    assert!(sout.join("distribution.csv").exists());
}

#[test]
fn verify_default_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({ "grid": { "steps": 4 }, "verify": { "suite": { "trials": 200 } } });
    let (o, out) = run("verify", &cfg, dir.path(), &["--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["passed"], true);
    let names: Vec<&str> = summary["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    for n in ["pinsker", "closed_forms_two_path", "estimator_unbiased", "tv_bound_audit"] {
        assert!(names.contains(&n), "{n} missing");
    }
    assert!(out.join("verify.json").exists());
}

#[test]
fn corrupted_student_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let bad_col = [0.7, 0.7, 0.0, 0.0];
    let good_col = [0.25, 0.25, 0.25, 0.25];
    let kernel = json!([bad_col, good_col, good_col, good_col]);
    let cfg = json!({
        "grid": { "steps": 2 },
        "verify": { "suite": { "trials": 10 }, "student_kernels": [kernel, kernel] }
    });
    let (o, _) = run("verify", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sample_modes() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run("sample", &json!({ "sample": { "count": 0 } }), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(read(&out.join("samples.csv")), "chain,x0,x1\n");

    let masked = json!({
        "forward": { "kind": "masked", "schedule": "cosine" },
        "data": { "preset": "explicit", "states": 3, "dims": 2, "probs": [0.4, 0.1, 0.0, 0.1, 0.4, 0.0, 0.0, 0.0, 0.0] },
        "grid": { "steps": 2 },
        "sample": { "sampler": "confidence", "model": "teacher", "count": 200, "mask_schedule": "cosine" }
    });
    let (o, out) = run("sample", &masked, dir.path(), &["--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out.join("samples.csv"));
    assert_eq!(csv.lines().count(), 201);
    assert!(csv.lines().skip(1).all(|l| !l.split(',').skip(1).any(|c| c == "2")));

    let tau = json!({ "grid": { "steps": 16, "delta": 0.05 }, "sample": { "sampler": "tau-leap", "dense": true } });
    let (o, out) = run("sample", &tau, dir.path(), &["--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let law = read(&out.join("distribution.csv"));
    assert!(law.starts_with("x0,x1,prob\n"));
    let total: f64 = law.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}
