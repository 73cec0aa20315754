use std::path::Path;
use std::process::Command;

use guidewave::io::{Metadata, RunConfig, Table};

fn guidewave(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_guidewave"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixture_file(dir: &Path, name: &str) -> String {
    let out = guidewave(dir, &["geometry", "fixture", name]);
    assert!(out.status.success());
    let file = format!("{name}.json");
    std::fs::write(dir.join(&file), &out.stdout).unwrap();
    file
}

#[test]
fn free_strip_has_no_resonances() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixture_file(dir.path(), "free-strip");
    let out = guidewave(dir.path(), &["resonances", "--geometry", &g, "--box", "1.5,3.5,-1,1", "--sheet", "1", "--out", "res.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = Table::from_csv(&std::fs::read_to_string(dir.path().join("res.csv")).unwrap()).unwrap();
    assert_eq!(t.columns, ["re_k", "im_k", "lambda", "multiplicity", "residual", "n_lead"]);
    assert!(t.rows.is_empty());
}

#[test]
fn metadata_config_replays_to_the_same_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = guidewave(dir.path(), &["det", "--geometry", "cavity", "--sheet", "1", "--box", "2.5,3.5,-0.5,0.5", "--samples", "4,3", "--out", "a/det.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = std::fs::read(dir.path().join("a/det.csv")).unwrap();
    let meta: Metadata = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/det.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta.schema_version, 1);
    assert_eq!(meta.command, "det");

    let mut cfg: RunConfig = meta.config;
    cfg.output_dir = "b".into();
    std::fs::write(dir.path().join("replay.json"), cfg.to_json()).unwrap();
    let out = guidewave(dir.path(), &["run", "--config", "replay.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(dir.path().join("b/det.csv")).unwrap(), first);
    assert_eq!(Table::from_csv(std::str::from_utf8(&first).unwrap()).unwrap().rows.len(), 12);
}

#[test]
fn count_report_has_a_sheet_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let g = fixture_file(dir.path(), "cavity");
    let out = guidewave(dir.path(), &["count", "--geometry", &g, "--r", "6", "--out", "count.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("count.json")).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    let report = &v["report"];
    let per: u64 = report["per_sheet"].as_array().unwrap().iter().map(|s| s["count"].as_u64().unwrap()).sum();
    assert_eq!(per, report["count"].as_u64().unwrap());
    assert!(per > 0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("future.json"), r#"{"schema_version": 9, "output_dir": ".", "task": {}}"#).unwrap();
    assert_eq!(guidewave(dir.path(), &["run", "--config", "future.json"]).status.code(), Some(2));
    assert_eq!(guidewave(dir.path(), &["resonances", "--geometry", "cavity", "--box", "1,0,0,1"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.json"), r#"{"bc": "dirichlet", "segments": [{"length": 1, "width": 1}]}"#).unwrap();
    assert_eq!(guidewave(dir.path(), &["geometry", "validate", "--geometry", "bad.json"]).status.code(), Some(1));

    // k on a threshold is a numerical failure with a report.
    let out = guidewave(dir.path(), &["green", "--k", "1", "--source", "0,1", "--xs", "0.5,1,2", "--ys", "1,2,2", "--out", "g.csv"]);
    assert_eq!(out.status.code(), Some(3));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("g.csv.error.json")).unwrap()).unwrap();
    assert_eq!(report["command"], "green");
    assert!(report["error"].as_str().unwrap().contains("branch point"));
    assert!(!dir.path().join("g.csv").exists());
}

#[test]
fn quasimode_seeds_feed_track() {
    let dir = tempfile::tempdir().unwrap();
    let out = guidewave(dir.path(), &["quasimode", "--d", "1", "--r1", "4", "--r2", "4", "--pmax", "2", "--out", "seeds.csv"]);
    assert!(out.status.success());
    let seeds = Table::from_csv(&std::fs::read_to_string(dir.path().join("seeds.csv")).unwrap()).unwrap();
    assert_eq!(seeds.rows.len(), 2);
    let out = guidewave(dir.path(), &["track", "--geometry", "staircase", "--seeds", "seeds.csv", "--nlead", "12", "--out", "track.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = Table::from_csv(&std::fs::read_to_string(dir.path().join("track.csv")).unwrap()).unwrap();
    assert_eq!(t.reals("seed").unwrap(), seeds.reals("lambda").unwrap());
}
