use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tracksim"))
        .args(args)
        .current_dir(dir)
        .env_remove("TRACKSIM_THREADS")
        .env_remove("TRACKSIM_PRECISION")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_line(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {text}");
    serde_json::from_str(lines[0]).unwrap()
}

#[test]
fn flat_rest_stays_put() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--scenario", "flat-rest", "--out", "o"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(&dir.path().join("o/summary.json"));
    assert!(s["displacement_m"].as_f64().unwrap() <= 1e-3);
    let csv = std::fs::read_to_string(dir.path().join("o/trajectory.csv")).unwrap();
    assert!(csv.starts_with("t_s,x_m,y_m,z_m"));
    assert_eq!(csv.lines().count(), 502);
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_line(&o)["error"], "validation");
    assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"));
}

#[test]
fn invalid_input_exits_one_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--dt", "0"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let e = stderr_line(&o);
    assert!(e["message"].as_str().unwrap().contains("dt"));

    let o = run(&["simulate", "--scenario", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    stderr_line(&o);
}

#[test]
fn gradcheck_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--out", "g"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("g/gradcheck.json"));
    assert!(r["max_rel_error"].as_f64().unwrap() <= 1e-4);
    assert_eq!(r["entries"].as_array().unwrap().len(), 40);
    assert_eq!(r["passed"], true);
}

#[test]
fn unmet_gradcheck_tolerance_is_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["gradcheck", "--horizon", "0.3", "--tolerance", "1e-30", "--out", "g"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_line(&o)["error"], "numerical");
}

#[test]
fn reproducible_outputs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = run(
            &["shoot", "--horizon", "1", "--seed", "5", "--reproducible", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["candidates.csv", "selection.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let sel = json(&dir.path().join("a/selection.json"));
    assert!(sel.get("created_unix_s").is_none());
}

#[test]
fn threads_do_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    for (out, threads) in [("one", "1"), ("three", "3")] {
        let o = run(
            &["shoot", "--horizon", "1", "--threads", threads, "--reproducible", "--out", out],
            dir.path(),
        );
        assert!(o.status.success());
    }
    let a = std::fs::read(dir.path().join("one/candidates.csv")).unwrap();
    let b = std::fs::read(dir.path().join("three/candidates.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn precision_flag_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--precision", "f16"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = run(
        &["simulate", "--precision", "f32", "--horizon", "1", "--out", "o"],
        dir.path(),
    );
    assert!(o.status.success());
    assert_eq!(json(&dir.path().join("o/summary.json"))["precision"], "f32");
}

#[test]
fn identify_writes_grid_history_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["identify", "--horizon", "0.5", "--iterations", "4", "--out", "i"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = dir.path().join("i");
    let hist = std::fs::read_to_string(d.join("loss_history.csv")).unwrap();
    assert!(hist.starts_with("iteration,loss_m2"));
    assert_eq!(hist.lines().count(), 5);
    let s = json(&d.join("identify.json"));
    assert!(s["best_loss_m2"].as_f64().unwrap() <= s["initial_loss_m2"].as_f64().unwrap());
    assert!(d.join("grid.json").is_file());
    assert!(d.join("grid.geometric.f32").is_file());
}

#[test]
fn evaluate_prints_all_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["evaluate", "--horizon", "0.5", "--reproducible", "--out", "e"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&dir.path().join("e/metrics.json"));
    for k in ["dx", "dR", "H_g_err", "H_t_err"] {
        assert!(m[k].as_f64().unwrap() >= 0.0, "{k}");
    }
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, m);
}

#[test]
fn navigate_log_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = r#"{
        "world": {"generate": {"shape": {"kind": "flat"}}},
        "initial": {"xy": [-1.0, 0.0]},
        "waypoints": [[0.0, 0.0, 0.0]],
        "shooting": {"candidates": 8, "horizon": 2.0}
    }"#;
    std::fs::write(dir.path().join("nav.json"), scenario).unwrap();
    let o = run(&["navigate", "--scenario", "nav.json", "--out", "n"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("n/navigation.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.len() >= 2);
    assert!(lines[..lines.len() - 1].iter().all(|l| l["event"] == "replan"));
    let end = lines.last().unwrap();
    assert_eq!(end["event"], "end");
    assert_eq!(end["success"], true);
}

#[test]
fn splat_cloud_to_heightmap() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cloud.csv"),
        "x,y,z\n0.05,0.05,0.2\n0.05,0.05,0.4\n0.15,0.05,0.1\n",
    )
    .unwrap();
    let o = run(
        &["splat", "--cloud", "cloud.csv", "--aggregate", "max", "--grid-size", "8", "--out", "s"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(&dir.path().join("s/splat.json"));
    assert_eq!(s["valid_cells"], 2);
    let header = json(&dir.path().join("s/heightmap.json"));
    assert_eq!(header["format"], "tracksim-grid");
    let o = run(&["splat", "--out", "s"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
