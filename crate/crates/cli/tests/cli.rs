use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 12] = ["--workers", "1", "--maps", "3", "--cases-per-map", "5", "--robots", "3", "--width", "8", "--height", "8"];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapf-gnn")).args(args).current_dir(dir).env_remove("MAPF_GNN_CONFIG").output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

fn csv_field(line: &str, header: &str, name: &str) -> String {
    let col = header.split(',').position(|h| h == name).unwrap();
    // The config column is quoted JSON; parse properly.
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(line.as_bytes());
    rdr.records().next().unwrap().unwrap()[col].to_string()
}

#[test]
fn build_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with_small(&["build-dataset", "--out", "data"]));
    for f in ["maps.jsonl", "cases.jsonl", "dataset.train.jsonl", "dataset.valid.jsonl", "dataset.test.jsonl"] {
        let text = std::fs::read_to_string(d.join("data").join(f)).unwrap();
        let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(header["schema"].as_str().unwrap().starts_with("mapf-gnn/"));
        assert_eq!(header["config"]["robots"], 3);
    }

    ok(d, &with_small(&["train", "--data", "data", "--out", "run", "--epochs", "2", "--lr", "1e-3", "--lr-min", "1e-6", "--batch", "64", "--l2", "1e-5", "--oe-interval", "1", "--oe-cases", "2", "--k", "2"]));
    let log = std::fs::read_to_string(d.join("run/log.csv")).unwrap();
    let mut lines = log.lines();
    assert!(lines.next().unwrap().starts_with("# {"));
    let header = lines.next().unwrap();
    let first = lines.next().unwrap();
    assert_eq!(csv_field(first, header, "epoch"), "1");
    assert_eq!(csv_field(first, header, "lr").parse::<f64>().unwrap(), 1e-3);
    assert_eq!(log.lines().count(), 4);
    assert!(d.join("run/model.json").exists() && d.join("run/optimizer.json").exists());

    let stdout = ok(d, &with_small(&["eval", "--data", "data", "--split", "valid", "--policy", "expert", "--out", "ev"]));
    assert!(stdout.contains("alpha 1.0"), "{stdout}");
    let report = std::fs::read_to_string(d.join("ev/report.csv")).unwrap();
    let mut lines = report.lines();
    let header = lines.next().unwrap();
    let row = lines.next().unwrap();
    assert_eq!(csv_field(row, header, "alpha"), "1.0");
    assert_eq!(csv_field(row, header, "delta_ft"), "0.0");
    let config: serde_json::Value = serde_json::from_str(&csv_field(row, header, "config")).unwrap();
    assert_eq!(config["k"], 3);

    ok(d, &with_small(&["eval", "--data", "data", "--policy", "gnn", "--model", "run/model.json", "--out", "ev2"]));
    ok(d, &with_small(&["rollout", "--data", "data", "--case", "0", "--policy", "expert", "--out", "trace.json"]));
    let trace: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["success"], true);
    assert_eq!(trace["schema"], "mapf-gnn/trace/1");

    let out = ok(d, &["report", "--input", "ev/report.csv", "ev/hist.csv", "run/log.csv", "--out", "long.csv"]);
    assert!(out.starts_with("rows: "));
    let long = std::fs::read_to_string(d.join("long.csv")).unwrap();
    assert!(long.lines().nth(1).unwrap() == "source,row,key,variable,value");
    assert!(long.contains("report.csv,0,expert,alpha,1.0"));
}

#[test]
fn staged_generation_matches_pipeline_pools() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with_small(&["gen-maps", "--out", "maps.jsonl"]));
    ok(d, &with_small(&["gen-cases", "--map-file", "maps.jsonl", "--out", "cases.jsonl"]));
    ok(d, &with_small(&["expert", "--map-file", "maps.jsonl", "--case-file", "cases.jsonl", "--out", "solved.jsonl"]));
    ok(d, &with_small(&["build-dataset", "--out", "data"]));
    assert_eq!(std::fs::read(d.join("maps.jsonl")).unwrap(), std::fs::read(d.join("data/maps.jsonl")).unwrap());
    let solved = std::fs::read_to_string(d.join("solved.jsonl")).unwrap();
    assert!(solved.lines().skip(1).all(|l| l.contains("\"solved\"")));
}

#[test]
fn oracle_check_reports_no_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["oracle-check", "--instances", "200", "--max-robots", "3", "--max-size", "4"]);
    assert!(out.lines().any(|l| l == "mismatches: 0"), "{out}");
}

fn error_json(out: &Output) -> serde_json::Value {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    serde_json::from_str(err.trim_end()).unwrap()
}

#[test]
fn errors_are_single_line_json_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(d, &["train", "--density", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "config");

    let out = run(d, &["eval", "--data", "missing", "--policy", "idle"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_json(&out)["exit_code"], 4);

    std::fs::write(d.join("bad.json"), "{\"robotz\": 3}").unwrap();
    let out = run(d, &["gen-maps", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(d, &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    error_json(&out);
}

#[test]
fn config_file_from_env_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), r#"{"maps": 2, "width": 6, "height": 6, "seed": 5}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mapf-gnn"))
        .args(["gen-maps", "--out", "m.jsonl", "--width", "7"])
        .current_dir(d)
        .env("MAPF_GNN_CONFIG", "c.json")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(d.join("m.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!((header["config"]["maps"].as_u64(), header["config"]["width"].as_u64(), header["config"]["height"].as_u64()), (Some(2), Some(7), Some(6)));
    assert_eq!(text.lines().count(), 3);
}
