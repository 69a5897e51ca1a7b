use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn clickprep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clickprep"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = clickprep(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn small_synth(dir: &TempDir) -> PathBuf {
    let out = p(dir, "synth.jsonl");
    ok(&[
        "synth",
        "--set",
        "customers=800",
        "--set",
        "days=5",
        "--seed",
        "3",
        "--out",
        s(&out),
        "--truth",
        s(&p(dir, "truth.json")),
    ]);
    out
}

#[test]
fn stage_commands_chain() {
    let dir = TempDir::new().unwrap();
    let raw = small_synth(&dir);
    let truth = json(&p(&dir, "truth.json"));
    assert_eq!(truth["customers"].as_object().unwrap().len(), 800);

    let rates = p(&dir, "rates.json");
    fs::write(&rates, r#"{"EUR": 1.1, "GBP": 1.25}"#).unwrap();
    let (ing, res, cl, jr) = (
        p(&dir, "ing.jsonl"),
        p(&dir, "res.jsonl"),
        p(&dir, "cl.jsonl"),
        p(&dir, "jr.jsonl"),
    );
    ok(&[
        "ingest",
        "--in",
        s(&raw),
        "--rates",
        s(&rates),
        "--base",
        "USD",
        "--out",
        s(&ing),
        "--report",
        s(&p(&dir, "ingest.json")),
    ]);
    let report = json(&p(&dir, "ingest.json"));
    assert_eq!(report["rejected"], 0);
    assert!(report["dedup"].is_object());
    assert!(!fs::read_to_string(&ing).unwrap().contains("\"EUR\""));

    ok(&[
        "identity",
        "--in",
        s(&ing),
        "--out",
        s(&res),
        "--report",
        s(&p(&dir, "id.json")),
    ]);
    ok(&[
        "clean",
        "--in",
        s(&res),
        "--out",
        s(&cl),
        "--rules",
        "bots,bounce",
        "--report",
        s(&p(&dir, "clean.json")),
    ]);
    let clean = json(&p(&dir, "clean.json"));
    assert_eq!(clean["clean"]["flags"].as_array().unwrap().len(), 2);
    ok(&[
        "journey",
        "--in",
        s(&cl),
        "--out",
        s(&jr),
        "--report",
        s(&p(&dir, "journey.json")),
    ]);

    let m = p(&dir, "metrics.json");
    let csv = p(&dir, "metrics.csv");
    ok(&[
        "metrics",
        "--in",
        s(&jr),
        "--windows",
        "300,1800,86400",
        "--report",
        s(&m),
        "--csv",
        s(&csv),
    ]);
    assert!(json(&m)["metrics"]["totals"]["ctr"].as_f64().unwrap() > 0.0);
    assert!(fs::read_to_string(&csv).unwrap().starts_with("day,page_type"));

    let aa = p(&dir, "aa.json");
    ok(&["aa", "--in", s(&jr), "--days", "5", "--verdict", s(&aa)]);
    assert_eq!(json(&aa)["days"].as_array().unwrap().len(), 5);

    let hist = p(&dir, "hist.json");
    let dec = p(&dir, "dec.json");
    ok(&[
        "outliers",
        "--in",
        s(&jr),
        "--metric",
        "views",
        "--iters",
        "2000",
        "--decision",
        s(&dec),
        "--hist",
        s(&hist),
    ]);
    let h = json(&hist);
    assert_eq!(h["after"]["histogram"]["bins"].as_array().unwrap().len(), 200);
    assert!(h["normality"]["qq"].is_array());
    assert_eq!(json(&dec)["source"], "automated");
}

#[test]
fn bad_input_exits_one() {
    let dir = TempDir::new().unwrap();
    let out = clickprep(&[
        "run",
        "--in",
        s(&p(&dir, "missing.jsonl")),
        "--report",
        s(&p(&dir, "r.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = clickprep(&["run", "--in", "x", "--report", "y", "--set", "clean.b2b.nope=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(clickprep(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn alarm_halts_with_status_two() {
    let dir = TempDir::new().unwrap();
    let input = p(&dir, "alarm.jsonl");
    let mut lines = String::new();
    for i in 0..20 {
        lines.push_str(&format!(
            r#"{{"event_id":"h{i}","event_type":"HIT","timestamp_utc":{t},"cookie_id":"c{i}","page_type":"HOME","recommended_products":[{{"product_id":"p","slot_index":0}}]}}
{{"event_id":"a{i}","event_type":"ATC","timestamp_utc":{t2},"cookie_id":"c{i}","page_type":"PDP","product_id":"p"}}
"#,
            t = 1_000_000 + i * 60_000,
            t2 = 1_000_000 + i * 60_000 + 5_000
        ));
    }
    fs::write(&input, lines).unwrap();
    let report = p(&dir, "run.json");
    let out = clickprep(&[
        "run",
        "--in",
        s(&input),
        "--report",
        s(&report),
        "--out",
        s(&p(&dir, "o.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let r = json(&report);
    assert_eq!(r["status"], "HALTED");
    assert!(r["metrics"].is_null());
    assert!(!p(&dir, "o.jsonl").exists());

    let out = clickprep(&["journey", "--in", s(&input), "--out", s(&p(&dir, "j.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    ok(&[
        "journey",
        "--in",
        s(&input),
        "--out",
        s(&p(&dir, "j.jsonl")),
        "--quick-buy",
        "true",
    ]);
}

#[test]
fn run_is_byte_identical_across_runs_and_modes() {
    let dir = TempDir::new().unwrap();
    let raw = small_synth(&dir);
    let cfg = p(&dir, "cfg.json");
    fs::write(&cfg, r#"{"outliers": {"enabled": false}, "aa": {"assign_seed": 5}}"#).unwrap();
    let mut reports = Vec::new();
    for (i, mode) in ["", "--sequential", ""].iter().enumerate() {
        let report = p(&dir, &format!("r{i}.json"));
        let out = p(&dir, &format!("o{i}.jsonl"));
        let mut args = vec![
            "run",
            "--config",
            s(&cfg),
            "--in",
            s(&raw),
            "--report",
            s(&report),
            "--out",
            s(&out),
        ];
        if !mode.is_empty() {
            args.insert(0, mode);
        }
        ok(&args);
        reports.push((fs::read(&report).unwrap(), fs::read(&out).unwrap()));
    }
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
    let r: Value = serde_json::from_slice(&reports[0].0).unwrap();
    assert_eq!(r["status"], "COMPLETED");
    assert!(r["outliers"].is_null());
}

#[test]
fn print_config_applies_overrides() {
    let out = ok(&["run", "--set", "clean.b2b.m=10", "--print-config"]);
    let cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["clean"]["b2b"]["m"], 10.0);
}
