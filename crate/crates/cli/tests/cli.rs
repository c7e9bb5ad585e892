use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn fleet() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fleet"));
    c.env_remove("FLEET_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    fleet().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn sha(path: &Path) -> String {
    hex(&Sha256::digest(std::fs::read(path).unwrap()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn read_json(path: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_config(systems: usize, tags: &[usize]) -> Value {
    json!({
        "systems": systems,
        "observations": 40,
        "dim": 2,
        "noise_variance": 0.25,
        "nominal_mean": [1.0, -0.5],
        "nominal_cov": [[0.0, 0.0], [0.0, 0.0]],
        "anomal_mean": [4.0, 2.0],
        "anomal_cov": [[0.0, 0.0], [0.0, 0.0]],
        "regressor_mean": [0.0, 0.0],
        "regressor_cov": [[1.0, 0.0], [0.0, 1.0]],
        "anomaly_tags": tags,
        "seed": 11
    })
}

/// Writes a config and generates the fleet, returning the dataset path.
fn small_fleet(dir: &TempDir, systems: usize, tags: &[usize]) -> String {
    let cfg = p(dir, "small.json");
    std::fs::write(&cfg, small_config(systems, tags).to_string()).unwrap();
    let out = p(dir, "small.bin");
    let o = run(&["gen", "--config", &cfg, "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn aircraft_fleet(dir: &TempDir) -> String {
    let out = p(dir, "aircraft.bin");
    let o = run(&["gen", "--paper-defaults", "--seed", "1", "--out", &out]);
    assert_eq!(code(&o), 0);
    out
}

fn assert_schema_valid(report: &Value) {
    let schema: Value =
        serde_json::from_str(&std::fs::read_to_string(repo_root().join("schemas/report.schema.json")).unwrap())
            .unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn gen_is_deterministic_and_matches_checked_in_config() {
    let dir = TempDir::new().unwrap();
    let a = aircraft_fleet(&dir);
    let o = run(&["gen", "--paper-defaults", "--seed", "1", "--out", &p(&dir, "again.bin")]);
    assert!(stdout(&o).contains("200 systems"));
    assert!(stdout(&o).contains("anomalies [27, 161, 183]"));
    assert!(stdout(&o).contains("config hash "));
    assert_eq!(sha(Path::new(&a)), sha(&dir.path().join("again.bin")));

    let cfg = repo_root().join("configs/aircraft.json");
    let o = run(&["gen", "--config", cfg.to_str().unwrap(), "--out", &p(&dir, "file.bin")]);
    assert_eq!(code(&o), 0);
    assert_eq!(sha(Path::new(&a)), sha(&dir.path().join("file.bin")));
}

#[test]
fn gen_rejects_bad_configs() {
    let dir = TempDir::new().unwrap();
    let o = run(&["gen", "--config", &p(&dir, "missing.json"), "--out", &p(&dir, "x.bin")]);
    assert_eq!(code(&o), 2);

    let bad = p(&dir, "bad.json");
    let mut cfg = small_config(5, &[1]);
    cfg["noise_variance"] = json!(-1.0);
    std::fs::write(&bad, cfg.to_string()).unwrap();
    assert_eq!(code(&run(&["gen", "--config", &bad, "--out", &p(&dir, "x.bin")])), 2);

    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&run(&["gen", "--config", &bad, "--out", &p(&dir, "x.bin")])), 2);

    // Neither source given.
    assert_eq!(code(&run(&["gen", "--out", &p(&dir, "x.bin")])), 2);
}

#[test]
fn gen_exports_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = p(&dir, "c.json");
    std::fs::write(&cfg, small_config(3, &[]).to_string()).unwrap();
    let csv = dir.path().join("csv");
    let o = run(&["gen", "--config", &cfg, "--out", &p(&dir, "f.bin"), "--csv-dir", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::read_dir(&csv).unwrap().count() >= 3);
}

#[test]
fn detect_central_tuned_on_aircraft_fleet() {
    let dir = TempDir::new().unwrap();
    let data = aircraft_fleet(&dir);
    let (rep, csv) = (p(&dir, "r.json"), p(&dir, "d.csv"));
    let o = run(&["detect", &data, "--method", "central", "--k", "3", "--out-report", &rep, "--out-csv", &csv]);
    assert_eq!(code(&o), 0);
    let r = read_json(&rep);
    assert_schema_valid(&r);
    assert_eq!(r["flagged"].as_array().unwrap().len(), 3);
    assert_eq!(r["dataset"]["systems"], 200);
    assert_eq!(r["dataset"]["seed"], 1);
    assert!(r["kkt_residual"].as_f64().unwrap() <= 1e-6);
    assert_eq!(r["margin"]["unbounded"], true);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 201);
    assert_eq!(text.lines().filter(|l| l.ends_with(",1")).count(), 3);

    // Same flags, same bytes.
    let again = p(&dir, "r2.json");
    run(&["detect", &data, "--method", "central", "--k", "3", "--out-report", &again]);
    assert_eq!(sha(Path::new(&rep)), sha(Path::new(&again)));
}

#[test]
fn detect_oracle_refuses_above_cap() {
    let dir = TempDir::new().unwrap();
    let data = aircraft_fleet(&dir);
    let o = run(&["detect", &data, "--method", "oracle", "--k", "3"]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("1313400"));
}

#[test]
fn detect_oracle_k0_is_pooled_fit() {
    let dir = TempDir::new().unwrap();
    let data = small_fleet(&dir, 6, &[2]);
    let rep = p(&dir, "r.json");
    let o = run(&["detect", &data, "--method", "oracle", "--k", "0", "--out-report", &rep]);
    assert_eq!(code(&o), 0);
    let r = read_json(&rep);
    assert_schema_valid(&r);
    assert_eq!(r["flagged"], json!([]));
    let nominal = &r["nominal"];
    for row in r["per_system"].as_array().unwrap() {
        assert_eq!(row, nominal);
    }
}

#[test]
fn detect_oracle_finds_planted_anomaly_and_writes_ranking() {
    let dir = TempDir::new().unwrap();
    let data = small_fleet(&dir, 6, &[2]);
    let rank = p(&dir, "rank.json");
    let o = run(&["detect", &data, "--method", "oracle", "--k", "1", "--out-trace", &rank, "--top", "3"]);
    assert_eq!(code(&o), 0);
    let r = read_json(&rank);
    assert_eq!(r["best"], json!([2]));
    assert_eq!(r["hypotheses"], 6);
    assert_eq!(r["ranking"].as_array().unwrap().len(), 3);
}

#[test]
fn detect_central_lambda_zero_flags_everyone() {
    let dir = TempDir::new().unwrap();
    let data = small_fleet(&dir, 5, &[1]);
    let rep = p(&dir, "r.json");
    let o = run(&["detect", &data, "--lambda", "0", "--out-report", &rep]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_json(&rep)["flagged"], json!([1, 2, 3, 4, 5]));
}

#[test]
fn detect_requires_method_parameters() {
    let dir = TempDir::new().unwrap();
    let data = small_fleet(&dir, 5, &[1]);
    assert_eq!(code(&run(&["detect", &data])), 2);
    assert_eq!(code(&run(&["detect", &data, "--method", "oracle"])), 2);
    assert_eq!(code(&run(&["detect", &data, "--method", "tikhonov"])), 2);
    assert_eq!(code(&run(&["detect", &data, "--lambda", "-1"])), 2);
    assert_eq!(code(&run(&["detect", &data, "--lambda", "1", "--p", "3"])), 2);
    assert_eq!(code(&run(&["detect", &p(&dir, "nope.bin"), "--lambda", "1"])), 2);
}

#[test]
fn detect_admm_transports_agree() {
    let dir = TempDir::new().unwrap();
    let data = small_fleet(&dir, 6, &[4]);
    let mut reports = Vec::new();
    for (transport, threads) in [("bus", "1"), ("bus", "4"), ("socket", "2")] {
        let rep = p(&dir, &format!("{transport}{threads}.json"));
        let trace = p(&dir, &format!("{transport}{threads}.csv"));
        let o = run(&[
            "--threads", threads, "detect", &data, "--method", "admm", "--k", "1", "--transport", transport,
            "--out-report", &rep, "--out-trace", &trace,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("messages sent"));
        let r = read_json(&rep);
        assert_schema_valid(&r);
        assert_eq!(r["flagged"], json!([4]));
        assert!(std::fs::read_to_string(&trace).unwrap().starts_with("iteration,primal,dual,rho"));
        reports.push(sha(Path::new(&rep)));
    }
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn detect_admm_nonconvergence_exits_3_with_report() {
    let dir = TempDir::new().unwrap();
    let data = small_fleet(&dir, 6, &[4]);
    let rep = p(&dir, "r.json");
    let o = run(&["detect", &data, "--method", "admm", "--lambda", "5", "--max-iterations", "2", "--out-report", &rep]);
    assert_eq!(code(&o), 3);
    let r = read_json(&rep);
    assert_eq!(r["converged"], false);
    assert_eq!(r["iterations"], 2);
}

#[test]
fn detect_tikhonov_reports_margin() {
    let dir = TempDir::new().unwrap();
    let data = small_fleet(&dir, 6, &[4]);
    let rep = p(&dir, "r.json");
    let o = run(&["detect", &data, "--method", "tikhonov", "--lambda", "100", "--out-report", &rep]);
    assert_eq!(code(&o), 0);
    let r = read_json(&rep);
    assert_schema_valid(&r);
    assert_eq!(r["flagged"].as_array().unwrap().len(), 6);
    assert_eq!(r["margin"]["threshold"], 1e-8);
}

#[test]
fn compare_contrasts_sparse_and_ridge() {
    let dir = TempDir::new().unwrap();
    let data = aircraft_fleet(&dir);
    let out = dir.path().join("cmp");
    let o = run(&["compare", &data, "--lambdas", "10,100,400", "--k", "3", "--svg", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[0][0], "group-lasso-tuned");
    assert_eq!(rows[0][2], "3");
    for r in rows.iter().filter(|r| r[0] == "tikhonov") {
        assert_eq!(r[2], "200", "{r:?}");
    }
    for name in ["tikhonov_lambda_10", "tikhonov_lambda_400", "group-lasso_lambda_100"] {
        assert!(out.join(format!("{name}.csv")).exists());
        let svg = std::fs::read_to_string(out.join(format!("{name}.svg"))).unwrap();
        assert_eq!(svg.matches("<rect x=").count(), 200);
    }
}

#[test]
fn compare_needs_weights() {
    let dir = TempDir::new().unwrap();
    let data = small_fleet(&dir, 4, &[]);
    assert_eq!(code(&run(&["compare", &data, "--out-dir", &p(&dir, "c")])), 2);
}

#[test]
fn compare_single_system() {
    let dir = TempDir::new().unwrap();
    let data = small_fleet(&dir, 1, &[]);
    let out = dir.path().join("c");
    let o = run(&["compare", &data, "--lambdas", "1", "--svg", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(out.join("tikhonov_lambda_1.svg")).unwrap();
    assert_eq!(svg.matches("<rect x=").count(), 1);
    let csv = std::fs::read_to_string(out.join("group-lasso_lambda_1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn tune_by_count_and_bic() {
    let dir = TempDir::new().unwrap();
    let data = small_fleet(&dir, 8, &[3, 6]);
    let (rep, csv) = (p(&dir, "r.json"), p(&dir, "t.csv"));
    let o = run(&["tune", &data, "--k", "2", "--out-report", &rep, "--out-csv", &csv]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_json(&rep)["flagged"], json!([3, 6]));
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("lambda,k\n"));

    let o = run(&["tune", &data, "--bic", "--points", "25", "--out-report", &rep, "--out-csv", &csv]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_json(&rep)["flagged"], json!([3, 6]));
    let table = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().count(), 26);

    assert_eq!(code(&run(&["tune", &data])), 2);
}

#[test]
fn thread_settings() {
    let dir = TempDir::new().unwrap();
    let data = small_fleet(&dir, 4, &[]);
    assert_eq!(code(&run(&["--threads", "0", "detect", &data, "--lambda", "1"])), 2);
    let o = fleet()
        .env("FLEET_THREADS", "2")
        .args(["detect", &data, "--lambda", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}
