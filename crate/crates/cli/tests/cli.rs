use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spectempo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectempo")).args(args).current_dir(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_k2(dir: &Path) {
    fs::write(dir.join("k2.json"), r#"{"n":2,"edges":[[0,1,1.0]]}"#).unwrap();
}

#[test]
fn k2_infers_unit_edge() {
    let dir = tempfile::tempdir().unwrap();
    write_k2(dir.path());
    let o = spectempo(
        &["infer", "--templates", "exact", "--graph", "k2.json", "--set", "adjacency", "--formulation", "noiseless"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>(), ["0,1,1.0"]);
}

#[test]
fn infer_writes_estimate_and_edges() {
    let dir = tempfile::tempdir().unwrap();
    write_k2(dir.path());
    let o = spectempo(&["infer", "--graph", "k2.json", "-o", "est"], dir.path());
    assert!(o.status.success());
    let est: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("est.json")).unwrap()).unwrap();
    assert!(est.get("S").is_some());
    assert!(fs::read_to_string(dir.path().join("est.csv")).unwrap().contains("0,1,1.0"));
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["generate", "--model", "er", "--n", "20", "--p", "0.2", "--seed", "7", "-o", out];
    assert!(spectempo(&args("a.json"), dir.path()).status.success());
    assert!(spectempo(&args("b.json"), dir.path()).status.success());
    let a = fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.json")).unwrap());
    let other = spectempo(&["generate", "--n", "20", "--p", "0.2", "--seed", "8"], dir.path());
    assert_ne!(other.stdout, a);
}

#[test]
fn exit_codes_follow_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(spectempo(&["infer", "--graph", "missing.json"], dir.path()).status.code(), Some(1));
    assert_eq!(spectempo(&["generate", "--n", "5", "--p", "1.5"], dir.path()).status.code(), Some(3));
    // node 0 has no edges, so its column cannot sum to one
    fs::write(dir.path().join("iso.json"), r#"{"n":3,"edges":[[1,2,1.0]]}"#).unwrap();
    assert_eq!(spectempo(&["infer", "--graph", "iso.json"], dir.path()).status.code(), Some(2));
}

#[test]
fn json_errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let o = spectempo(&["--json", "generate", "--n", "5", "--p=-1"], dir.path());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).expect("stderr is JSON");
    assert_eq!(err["error"]["code"], 3);
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn dumped_problem_replays() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p3.json"), r#"{"n":3,"edges":[[0,1,1.0],[1,2,1.0]]}"#).unwrap();
    let o = spectempo(&["infer", "--graph", "p3.json", "--dump-problem", "problem.json"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = spectempo(&["infer", "--replay", "problem.json"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sol: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    // half-vector (0,0),(1,0),(2,0),(1,1),(2,1),(2,2) of the path adjacency
    let s: Vec<f64> = serde_json::from_value(sol["s"].clone()).unwrap();
    let want = [0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    assert!(s.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-6), "{s:?}");
}

#[test]
fn certify_reports_rank_condition() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p3.json"), r#"{"n":3,"edges":[[0,1,1.0],[1,2,1.0]]}"#).unwrap();
    let o = spectempo(&["certify", "--graph", "p3.json"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cert: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(cert["rank_condition_holds"].is_boolean());
    assert!(cert["psi_or_eta"].is_number());
}

#[test]
fn diffuse_then_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(spectempo(&["generate", "--n", "8", "--p", "0.4", "--connected", "-o", "g.json"], d).status.success());
    let o = spectempo(&["diffuse", "--graph", "g.json", "--samples", "500", "--seed", "3", "-o", "x.csv"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = spectempo(&["baseline", "--signals", "x.csv", "--threshold", "0.05", "--truth", "g.json"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let score: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((0.0..=1.0).contains(&score["f_measure"].as_f64().unwrap()));
}

#[test]
fn deconvolve_scores_top_k() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("truth.json"), r#"{"n":3,"edges":[[0,1,1.0],[1,2,1.0]]}"#).unwrap();
    // T = S (I - S)^{-1} for S = path adjacency / 4
    fs::write(d.join("dense.csv"), "0.07142857142857142,0.2857142857142857,0.07142857142857142\n0.2857142857142857,0.14285714285714285,0.2857142857142857\n0.07142857142857142,0.2857142857142857,0.07142857142857142\n").unwrap();
    let o = spectempo(&["deconvolve", "--in", "dense.csv", "--eps", "1.0", "--top-k", "2", "--truth", "truth.json"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "method,k,fraction");
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().any(|l| *l == "deconvolution,2,1.0"), "{out}");
}

#[test]
fn benchmark_writes_reproducible_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |out: &str| {
        let args =
            ["benchmark", "--experiment", "fig1-feasibility", "--n", "6", "--p", "0.5", "--instances", "4", "-o", out];
        let o = spectempo(&args, d);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(d.join(out).join("fig1-feasibility_rows.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert_eq!(a.lines().count(), 5);
    assert!(a.lines().next().unwrap().starts_with("experiment,config_hash,method"));
    assert!(d.join("a/fig1-feasibility_summary.csv").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), r#"{"experiment":"noisy-sweep","n":[12],"seed":5}"#).unwrap();
    let o = spectempo(&["benchmark", "--config", "cfg.json", "--seed", "9", "--print-config"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg["n"], serde_json::json!([12]));
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["samples"], serde_json::json!([100, 1000, 10000, 100000]));
    fs::write(d.join("bad.json"), r#"{"experiment":"noisy-sweep","bogus":1}"#).unwrap();
    assert_eq!(spectempo(&["benchmark", "--config", "bad.json"], d).status.code(), Some(3));
}
