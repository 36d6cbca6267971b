use std::path::Path;
use std::process::{Command, Output};

fn mcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcp"))
        .args(args)
        .env("MCP_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_stream(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.mcpe");
    let out = mcp(&[
        "synth", "--out", p(&path), "--classes", "3", "--dim", "8", "--samples", "60", "--views", "4", "--seed", "4",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn synth_then_run_writes_summary_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let stream = small_stream(dir.path());
    let summary = dir.path().join("summary.json");
    let out = mcp(&["run", "--stream", p(&stream), "--mode", "mcp++", "--out", p(&summary)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(json["samples"], 60);
    assert_eq!(json["completed"], true);
    assert_eq!(json["mode"], "mcp++");
    let log = std::fs::read_to_string(summary.with_extension("jsonl")).unwrap();
    assert_eq!(log.lines().count(), 60);
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn gradcheck_passes_and_fails_on_impossible_tolerance() {
    let ok = mcp(&["gradcheck", "--instances", "9"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let strict = mcp(&["gradcheck", "--instances", "9", "--tolerance", "1e-15"]);
    assert_eq!(strict.status.code(), Some(4));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "mode = mcp\nno_such_key = 1\n").unwrap();
    let out = mcp(&["run", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = mcp(&["run", "--config", p(&dir.path().join("missing.cfg"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn truncated_stream_exits_3_with_partial_summary() {
    let dir = tempfile::tempdir().unwrap();
    let stream = small_stream(dir.path());
    let bytes = std::fs::read(&stream).unwrap();
    let cut = dir.path().join("cut.mcpe");
    std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let summary = dir.path().join("summary.json");
    let out = mcp(&["run", "--stream", p(&cut), "--out", p(&summary)]);
    assert_eq!(out.status.code(), Some(3));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(json["completed"], false);
    assert_eq!(json["samples"], 59);
    assert!(json["error"].as_str().unwrap().contains("at byte"));
}

#[test]
fn snapshot_round_trip_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let stream = small_stream(dir.path());
    let snap = dir.path().join("bank.mcps");
    let out = mcp(&["snapshot", "--stream", p(&stream), "--out", p(&snap)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = mcp(&["snapshot", "--inspect", p(&snap)]);
    assert_eq!(out.status.code(), Some(0));
    let summary = dir.path().join("resumed.json");
    let out = mcp(&["run", "--stream", p(&stream), "--restore", p(&snap), "--out", p(&summary)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pearson_prints_coefficient() {
    let out = mcp(&["pearson", "--xs", "1,2,3,4,5", "--ys", "2,4,5,4,5"]);
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((json["r"].as_f64().unwrap() - 0.7745966692414834).abs() < 1e-12);
}
