use std::f64::consts::TAU;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn torus_sync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_torus-sync")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn criterion_defaults_to_full_circle() {
    let out = torus_sync(&["criterion", "--kernel", "sa:2", "--json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    assert!((doc["summary"]["M"].as_f64().unwrap() - TAU).abs() < 1e-15);
    assert_eq!(doc["summary"]["verdict"], "holds");
    assert_eq!(doc["config"]["command"]["kernel"], "sa:2");
    assert_eq!(doc["rows"][0]["verdict"], "holds");

    let out = torus_sync(&["criterion", "--kernel", "sa:-1", "--m-semicircle", "--json"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout_json(&out)["summary"]["verdict"], "fails");
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        vec!["criterion", "--kernel", "sa:abc"],
        vec!["criterion", "--kernel", "sa:1", "--no-such-flag"],
        vec!["criterion"],
        vec!["sweep", "--beta-min", "1", "--beta-max", "0"],
        vec!["simulate", "--kernel", "sa:1", "--init", "uniform"],
        vec!["simulate", "--kernel", "sa:1", "--n", "4", "--init", "bogus"],
        vec!["analyze", "--kernel", "sa:1", "--state-file", "/nonexistent/state.csv"],
        vec!["mc", "--kernel", "sa:1", "--n", "4", "--trials", "0"],
        vec!["frobnicate"],
    ] {
        let out = torus_sync(&args);
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn numerical_errors_exit_3() {
    let out = torus_sync(&["counterexample", "--beta", "-1", "--n", "10"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn failed_experiment_exits_1() {
    let out = torus_sync(&["mc", "--kernel", "sa:-1", "--n", "9", "--trials", "30", "--seed", "1", "--t-max", "1e4"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    let out = torus_sync(&["mc", "--kernel", "sa:0", "--n", "8", "--trials", "4", "--seed", "1"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn sweep_writes_csv_sidecar_and_svg() {
    let dir = TempDir::new().unwrap();
    let csv_path = dir.path().join("ratio.csv");
    let svg_path = dir.path().join("ratio.svg");
    let out = torus_sync(&[
        "sweep",
        "--beta-min",
        "-1",
        "--beta-max",
        "10",
        "--steps",
        "40",
        "--m-semicircle",
        "--out",
        path_str(&csv_path),
        "--svg",
        path_str(&svg_path),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["beta", "tau", "integral", "lhs", "rhs", "ratio", "verdict"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 40);
    assert_eq!(rows[0][0].parse::<f64>().unwrap(), -1.0);

    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ratio.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["command"]["points"], 40);
    let boundary = meta["summary"]["boundary"].as_f64().unwrap();
    assert!(boundary > -0.30 && boundary < -0.20);

    let svg = std::fs::read_to_string(&svg_path).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("well-formed SVG");
    let root = doc.root_element();
    assert_eq!(root.tag_name().name(), "svg");
    assert_eq!(root.attribute("viewBox"), Some("0 0 800 600"));
    assert!(doc.descendants().any(|n| n.tag_name().name() == "polyline"));
    assert!(doc.descendants().filter(|n| n.tag_name().name() == "text").count() >= 4);
}

#[test]
fn dump_angles_round_trip() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("first.csv");
    let out = torus_sync(&[
        "simulate",
        "--kernel",
        "sa:4",
        "--n",
        "12",
        "--seed",
        "7",
        "--t-max",
        "3",
        "--dump-angles",
        "--out",
        path_str(&first),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&first).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("t,diameter,energy,cluster_count,x_0,"));
    let last = text.lines().last().unwrap().to_string();

    let second = dir.path().join("second.csv");
    let init = format!("file:{}", path_str(&first));
    let out = torus_sync(&[
        "simulate",
        "--kernel",
        "sa:4",
        "--init",
        &init,
        "--t-max",
        "1",
        "--dump-angles",
        "--out",
        path_str(&second),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text2 = std::fs::read_to_string(&second).unwrap();
    let row0 = text2.lines().nth(1).unwrap();
    let angles = |row: &str| row.split(',').skip(4).map(String::from).collect::<Vec<_>>();
    assert_eq!(angles(&last), angles(row0));
}

#[test]
fn counterexample_state_file_analyzes_as_stable() {
    let dir = TempDir::new().unwrap();
    let ce = dir.path().join("ce.csv");
    let out = torus_sync(&["counterexample", "--beta", "-1", "--n", "9", "--analyze", "--out", path_str(&ce)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = torus_sync(&["analyze", "--kernel", "sa:-1", "--state-file", path_str(&ce), "--json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    assert_eq!(doc["summary"]["classification"], "stable_nonsynchronized");
    assert_eq!(doc["summary"]["decomposition"]["multiplicities"], serde_json::json!([3, 3, 3]));

    let out = torus_sync(&["analyze", "--kernel", "sa:-1", "--state-file", path_str(&ce), "--normalized", "--json"]);
    assert_eq!(stdout_json(&out)["summary"]["classification"], "stable_nonsynchronized");

    // A random state is not stationary: numerical error.
    let st = dir.path().join("random.txt");
    std::fs::write(&st, "0.1\n1.3\n2.0\n").unwrap();
    let out = torus_sync(&["analyze", "--kernel", "sa:1", "--state-file", path_str(&st)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn weights_files_are_read() {
    let dir = TempDir::new().unwrap();
    let w = dir.path().join("w.txt");
    std::fs::write(&w, "1\n2\n0.5\n1.5\n").unwrap();
    let out =
        torus_sync(&["simulate", "--kernel", "sa:1", "--n", "4", "--t-max", "50", "--weights-file", path_str(&w), "--json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = torus_sync(&["simulate", "--kernel", "sa:1", "--n", "5", "--weights-file", path_str(&w)]);
    assert_eq!(code(&out), 2);
    std::fs::write(&w, "1\n-2\n0.5\n1.5\n").unwrap();
    let out = torus_sync(&["simulate", "--kernel", "sa:1", "--n", "4", "--weights-file", path_str(&w)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn seeded_runs_are_reproducible() {
    let args = ["mc", "--kernel", "sa:1", "--n", "10", "--trials", "6", "--seed", "3", "--t-max", "500", "--json"];
    let a = torus_sync(&args);
    let b = torus_sync(&args);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let single = Command::new(env!("CARGO_BIN_EXE_torus-sync")).args(args).env("TORUS_SYNC_THREADS", "1").output().unwrap();
    assert_eq!(a.stdout, single.stdout);
    let bad = Command::new(env!("CARGO_BIN_EXE_torus-sync")).args(args).env("TORUS_SYNC_THREADS", "zero").output().unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn audit_and_metastability_commands() {
    let out = torus_sync(&["audit", "--suite", "tau", "--points", "50", "--json"]);
    assert_eq!(code(&out), 0);
    let doc = stdout_json(&out);
    assert_eq!(doc["summary"]["pass"], true);
    assert!((doc["summary"]["sqrt_beta_tau_at_1e4"].as_f64().unwrap() - 1.0).abs() < 0.01);

    let out = torus_sync(&["audit", "--suite", "appendix", "--points", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 31);

    let out = torus_sync(&["metastability", "--beta", "25", "--n", "40", "--seed", "3", "--times", "0,1,5", "--json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = stdout_json(&out);
    assert_eq!(doc["rows"].as_array().unwrap().len(), 3);
    assert!(doc["rows"][0]["cluster_count"].as_u64().unwrap() >= 1);
}

#[test]
fn csv_meta_goes_to_stderr_without_out() {
    let out = torus_sync(&["criterion", "--kernel", "kuramoto"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("kernel,tau,"));
    let meta: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(meta["summary"]["verdict"], "holds");
}
