use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

use pmtkg::rng::content_hash;

const BIN: &str = env!("CARGO_BIN_EXE_pmtkg");

fn pmtkg(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN).arg("--out").arg(out).args(args).output().expect("binary runs")
}

/// Run, require `code`, and return the run directory printed on stdout.
fn run_ok(out: &Path, args: &[&str]) -> PathBuf {
    let o = pmtkg(out, args);
    assert_eq!(o.status.code(), Some(0), "{args:?}\n{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(out: &Path, n: usize, seed: u64) -> PathBuf {
    run_ok(out, &["synth", "--n", &n.to_string(), "--seed", &seed.to_string()]).join("records.csv")
}

#[test]
fn help_exits_zero() {
    for args in [&["--help"][..], &["benchmark", "--help"], &["graph", "query", "--help"], &["--version"]] {
        let o = Command::new(BIN).args(args).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["synth", "--bogus"][..],
        &["frobnicate"],
        &["simulate", "--mechanism", "S9"],
        &["benchmark", "--seeds", "5..1"],
        &["impute"],
        &[],
    ] {
        let o = pmtkg(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(o.stdout.is_empty(), "{args:?}");
        assert!(stderr(&o).starts_with("error:"), "{args:?}");
    }
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none(), "usage errors write nothing");
}

#[test]
fn synth_rerun_is_byte_identical_and_manifested() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_ok(dir.path(), &["synth", "--n", "120", "--seed", "3"]);
    let first: Vec<(String, Vec<u8>)> = ["records.csv", "generator_config.json", "manifest.json"]
        .iter()
        .map(|f| (f.to_string(), std::fs::read(a.join(f)).unwrap()))
        .collect();
    let b = run_ok(dir.path(), &["synth", "--n", "120", "--seed", "3"]);
    assert_eq!(a, b);
    for (f, bytes) in &first {
        assert_eq!(&std::fs::read(b.join(f)).unwrap(), bytes, "{f}");
    }

    let m = json(&a.join("manifest.json"));
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seeds"], serde_json::json!([3]));
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["outputs"], serde_json::json!(["generator_config.json", "records.csv"]));
    assert_eq!(m["inputs"][0]["source"], "builtin:codebook.json");
    assert_eq!(m["inputs"][0]["sha256"], content_hash(pmtkg::resources::CODEBOOK.as_bytes()));
    assert_eq!(m["config"]["n"], 120);
    let cfg = json(&a.join("generator_config.json"));
    assert_eq!(cfg, m["config"]);

    let c = run_ok(dir.path(), &["synth", "--n", "120", "--seed", "4"]);
    assert_ne!(a, c, "different seed, different run directory");
    let name = a.file_name().unwrap().to_str().unwrap();
    let manifest: pmtkg_cli::RunManifest = serde_json::from_value(m).unwrap();
    let id = manifest.id();
    let id = &id[..16];
    assert_eq!(name, format!("synth-{id}"));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"synth": {"n": 50, "seed": 9, "vulnerable_shift": {"Prep_Stress": -0.6}}}"#).unwrap();
    let rows = |p: &Path| std::fs::read_to_string(p.join("records.csv")).unwrap().lines().count() - 1;

    let from_file = run_ok(dir.path(), &["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(rows(&from_file), 50);
    let g = json(&from_file.join("generator_config.json"));
    assert_eq!(g["seed"], 9);
    assert_eq!(g["vulnerable_shift"]["Prep_Stress"], -0.6);

    let flag_wins = run_ok(dir.path(), &["--config", cfg.to_str().unwrap(), "synth", "--n", "40"]);
    assert_eq!(rows(&flag_wins), 40);
    assert_eq!(json(&flag_wins.join("generator_config.json"))["seed"], 9);

    std::fs::write(&cfg, r#"{"synth": {"n": 50, "typo": 1}}"#).unwrap();
    assert_eq!(pmtkg(dir.path(), &["--config", cfg.to_str().unwrap(), "synth"]).status.code(), Some(1));
}

#[test]
fn pipeline_leaves_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let records = synth(dir.path(), 200, 11);
    let before = std::fs::read(&records).unwrap();

    let g = run_ok(dir.path(), &["graph", "build", "--records", records.to_str().unwrap()]);
    let graph = g.join("graph.json");
    let stats = json(&g.join("stats.json"));
    assert_eq!(stats["built_from_n"], 200);
    assert_eq!(stats["variant"], "pmt");
    let s = run_ok(dir.path(), &["graph", "stats", "--graph", graph.to_str().unwrap()]);
    assert_eq!(json(&s.join("stats.json")), stats);

    let q = run_ok(
        dir.path(),
        &["graph", "query", "--graph", graph.to_str().unwrap(), "--target", "Prep_Stress", "--given", "Flex_Work=Not flexible", "--given", "Time_Sleep=2"],
    );
    let q = json(&q.join("query.json"));
    let p: f64 = q["distribution"]["probabilities"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((p - 1.0).abs() < 1e-9);
    let used = q["distribution"]["sources"].as_array().unwrap().len();
    let ignored = q["distribution"]["ignored"].as_array().map_or(0, Vec::len);
    assert_eq!(used + ignored, 2);
    let bad = pmtkg(dir.path(), &["graph", "query", "--graph", graph.to_str().unwrap(), "--target", "Prep_Stress", "--given", "Flex_Work=Sometimes"]);
    assert_eq!(bad.status.code(), Some(1));

    let v = run_ok(dir.path(), &["graph", "build", "--records", records.to_str().unwrap(), "--variant", "validated"]);
    assert_eq!(json(&v.join("stats.json"))["variant"], "validated");

    let m = run_ok(dir.path(), &["simulate", "--records", records.to_str().unwrap(), "--mechanism", "S4", "--seed", "42"]);
    let summary = json(&m.join("summary.json"));
    assert_eq!(summary["mechanism"], "S4");
    assert_eq!(summary["block_b_rate"], 0.0);
    let csv = std::fs::read_to_string(m.join("mask.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("respondent,field,deleted"));
    let deleted = csv.lines().skip(1).filter(|l| l.ends_with(",1")).count();
    assert_eq!(deleted as u64, summary["deleted_cells"].as_u64().unwrap());

    let mask = m.join("mask.json");
    let mask_before = std::fs::read(&mask).unwrap();
    for (method, copies) in [("mean", 1), ("mice", 5), ("missforest", 1), ("ipwmi", 5)] {
        let i = run_ok(dir.path(), &["impute", "--records", records.to_str().unwrap(), "--mask", mask.to_str().unwrap(), "--method", method]);
        let s = json(&i.join("summary.json"));
        assert_eq!(s["m"], copies, "{method}");
        assert_eq!(s["out_of_range"], 0, "{method}");
        assert_eq!(s["observed_preserved"], true, "{method}");
        assert_eq!(s["imputed_cells"], summary["deleted_cells"], "{method}");
        for k in 1..=copies {
            assert!(i.join(format!("completed_{k}.csv")).exists(), "{method} {k}");
        }
        assert_eq!(i.join("weights.json").exists(), method == "ipwmi");
    }
    assert_eq!(std::fs::read(&records).unwrap(), before);
    assert_eq!(std::fs::read(&mask).unwrap(), mask_before);
}

#[test]
fn impute_rejects_a_mask_for_other_records() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 60, 1);
    let b = synth(dir.path(), 61, 1);
    let m = run_ok(dir.path(), &["simulate", "--records", a.to_str().unwrap()]);
    let o = pmtkg(dir.path(), &["impute", "--records", b.to_str().unwrap(), "--mask", m.join("mask.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mask respondents differ"), "{}", stderr(&o));
}

#[test]
fn unreadable_input_is_a_failure_not_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmtkg(dir.path(), &["graph", "build", "--records", "/nonexistent/records.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/records.csv"));
}

#[test]
fn gate_failure_exits_one_and_names_the_check() {
    let dir = tempfile::tempdir().unwrap();
    let records = synth(dir.path(), 150, 2);
    let args = ["benchmark", "--records", records.to_str().unwrap(), "--methods", "mice", "--mechanisms", "S1", "--seeds", "1", "--no-ablation"];
    let o = pmtkg(dir.path(), &args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("check 4"), "{}", stderr(&o));
    let run = PathBuf::from(String::from_utf8(o.stdout).unwrap().trim());
    let gate = json(&run.join("gate.json"));
    assert_eq!(gate["checks"][3]["status"], "not-run");
    assert!(!run.join("tables.txt").exists());
    assert_eq!(json(&run.join("manifest.json"))["outputs"], serde_json::json!(["gate.json"]));

    let mut forced = args.to_vec();
    forced.push("--force");
    let run = run_ok(dir.path(), &forced);
    let tables = std::fs::read_to_string(run.join("tables.txt")).unwrap();
    assert!(tables.contains("MICE+PMM") && tables.contains("Sanity gate"));
    assert!(run.join("metrics.csv").exists());
}

#[test]
fn benchmark_tables_have_fixed_structure_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let records = synth(dir.path(), 200, 5);
    let args = ["benchmark", "--records", records.to_str().unwrap(), "--methods", "mean,marginal", "--seeds", "1", "--no-ablation", "--force"];
    let a = run_ok(dir.path(), &args);
    let first = std::fs::read(a.join("metrics.csv")).unwrap();
    let tables = std::fs::read_to_string(a.join("tables.txt")).unwrap();
    for h in ["Block B imputation", "Block C imputation", "S1 RMSE", "S4 Bias", "Marginal-TLM", "Mean"] {
        assert!(tables.contains(h), "{h}");
    }
    for f in ["plot_rmse_by_scenario.csv", "plot_bias_rmse_frontier.csv", "plot_subgroup_bias.csv", "metrics.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let b = run_ok(dir.path(), &args);
    assert_eq!(a, b);
    assert_eq!(std::fs::read(b.join("metrics.csv")).unwrap(), first);
}

#[test]
fn benchmark_stub_five_seeds_exits_zero_with_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmtkg(dir.path(), &["-q", "benchmark", "--provider", "stub", "--seeds", "1..5"]);
    let run = PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().trim());
    assert!(run.join("manifest.json").exists());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run.join("tables.txt").exists());
}

#[test]
fn ablation_writes_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let records = synth(dir.path(), 200, 6);
    let run = run_ok(dir.path(), &["ablation", "--records", records.to_str().unwrap(), "--mechanisms", "S4", "--seeds", "1"]);
    let rows = json(&run.join("ablation.json"));
    assert_eq!(rows.as_array().unwrap().len(), 4);
    let table = std::fs::read_to_string(run.join("ablation.txt")).unwrap();
    for v in ["Marginal-TLM (baseline)", "+ Peer examples only", "+ Vulnerability cue only", "+ Both signals (A-TLM)"] {
        assert!(table.contains(v), "{v}");
    }
}

#[test]
fn predict_and_evaluate_with_stub() {
    let dir = tempfile::tempdir().unwrap();
    let p = run_ok(dir.path(), &["predict", "--method", "marginal", "--provider", "stub"]);
    let s = json(&p.join("summary.json"));
    assert_eq!(s["predicted"], 189);
    assert_eq!(s["provider"], "stub");
    let csv = std::fs::read_to_string(p.join("predictions.csv")).unwrap();
    let ids: std::collections::BTreeSet<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids.len(), 189);

    let e = run_ok(dir.path(), &["evaluate", "--methods", "marginal,atlm"]);
    let mae = std::fs::read_to_string(e.join("stage3_mae.txt")).unwrap();
    assert!(mae.contains("Marginal-TLM") && mae.contains("A-TLM"));

    let replay = dir.path().join("empty-cache");
    std::fs::create_dir_all(&replay).unwrap();
    let o = pmtkg(dir.path(), &["predict", "--provider", "replay", "--replay-dir", replay.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("respondents failed"));
}

#[test]
fn audit_default_and_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_ok(dir.path(), &["audit"]);
    let a = json(&run.join("audit.json"));
    let rc = a["constructs"].as_array().unwrap().iter().find(|c| c["construct"].as_str().unwrap().starts_with("Response Cost")).unwrap();
    assert_eq!(rc["score"], 4);
    assert_eq!(rc["items"].as_array().unwrap().len(), 7);
    assert_eq!(a["constructs"].as_array().unwrap().len(), 9);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, pmtkg::resources::AUDIT_CANNED_RESPONSE.replace("\"score\": 4", "\"score\": 7")).unwrap();
    let o = pmtkg(dir.path(), &["audit", "--response", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("audit response rejected"), "{}", stderr(&o));
}

#[test]
fn coverage_default_tables() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_ok(dir.path(), &["coverage"]);
    let g = json(&run.join("gap_report.json"));
    let hisp = g["rows"].as_array().unwrap().iter().find(|r| r["subgroup"] == "Hispanic").unwrap();
    assert_eq!(hisp["gap"], 15.2);
    assert_eq!(hisp["empirical_rank"], 1.0);
    assert!((g["spearman_rho"].as_f64().unwrap() - 0.12).abs() <= 0.005);
    assert_eq!(g["validated"], false);
    let table = std::fs::read_to_string(run.join("gap_table.txt")).unwrap();
    assert!(table.contains("+15.2") && table.contains("-14.7"));

    let records = synth(dir.path(), 300, 8);
    let from_records = run_ok(dir.path(), &["coverage", "--records", records.to_str().unwrap()]);
    assert_eq!(json(&from_records.join("gap_report.json"))["rows"].as_array().unwrap().len(), 8);
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    Some(buf)
}

#[test]
fn serve_answers_health() {
    let dir = tempfile::tempdir().unwrap();
    let g = run_ok(dir.path(), &["graph", "build"]);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(BIN)
        .args(["serve", "--graph", g.join("graph.json").to_str().unwrap(), "--bind", &format!("127.0.0.1:{port}")])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let mut reply = None;
    while start.elapsed() < Duration::from_secs(20) {
        if let Some(r) = http_get(port, "/health") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    let _ = child.kill();
    let _ = child.wait();
    let reply = reply.expect("service came up");
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    let hash = json(&g.join("stats.json"))["graph_hash"].as_str().unwrap().to_string();
    assert!(reply.contains(&hash));
}
