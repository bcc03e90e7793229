use std::path::Path;
use std::process::{Command, Output};

use contingen_core::cases;

fn contingen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contingen"))
        .args(args)
        .env_remove("CONTINGEN_OUT_DIR")
        .output()
        .expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn case_info_reports_counts() {
    let o = contingen(&["case-info", "ieee30"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().any(|l| l == "30 buses, 41 branches"), "{}", stdout(&o));
}

#[test]
fn case_info_json_mode() {
    let o = contingen(&["case-info", "ieee14", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["buses"], 14);
    assert_eq!(v["branches"], 20);
    assert_eq!(v["generators"], 5);
    assert_eq!(v["slack_bus"], 1);
    assert_eq!(v["connected"], true);
}

#[test]
fn case_info_reads_matpower_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("case6.m");
    std::fs::write(&path, cases::IEEE6_TEXT).unwrap();
    let o = contingen(&["case-info", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("6 buses, 11 branches"));
}

#[test]
fn malformed_case_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.m");
    let text = cases::IEEE6_TEXT.replacen("\t1\t3\t", "\t1\tx\t", 1);
    std::fs::write(&path, text).unwrap();
    let o = contingen(&["case-info", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
    assert_eq!(contingen(&["case-info", "no-such-case"]).status.code(), Some(2));
}

#[test]
fn power_flow_converges_and_overload_fails_numerically() {
    let o = contingen(&["pf", "ieee14", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["converged"], true);
    assert!(v["max_mismatch"].as_f64().unwrap() <= 1e-8);

    let mut heavy = cases::ieee14();
    for b in &mut heavy.buses {
        b.pd *= 20.0;
        b.qd *= 20.0;
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heavy.m");
    std::fs::write(&path, heavy.to_matpower()).unwrap();
    assert_eq!(contingen(&["pf", path.to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(contingen(&["rank", path.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn islanding_outage_is_rejected() {
    let case = cases::ieee14();
    let k = case.branches.iter().position(|b| (b.from, b.to) == (7, 8)).unwrap();
    let o = contingen(&["pf", "ieee14", "--outage", &k.to_string()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(contingen(&["pf", "ieee6", "--outage", "99"]).status.code(), Some(2));
}

#[test]
fn cpf_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let o = contingen(&["cpf", "ieee6", "--json", "--trace", trace.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["max_lambda"].as_f64().unwrap() - 1.2552).abs() < 1e-3);
    let csv = std::fs::read_to_string(trace).unwrap();
    assert!(csv.starts_with("step,lambda,dlambda,vm_min_bus,vm_min\n"));
    assert_eq!(contingen(&["cpf", "ieee6", "--target-scale", "0.5"]).status.code(), Some(2));
}

#[test]
fn rank_table_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_eq!(contingen(&["rank", "ieee6", "--out", a.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(
        contingen(&["--jobs", "8", "rank", "ieee6", "--out", b.to_str().unwrap()]).status.code(),
        Some(0)
    );
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text, stdout(&contingen(&["rank", "ieee6"])));
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 11);
    let margins: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(margins.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(rows[0][3], "1");
}

#[test]
fn bad_jobs_flag_is_rejected() {
    assert_eq!(contingen(&["--jobs", "0", "rank", "ieee6"]).status.code(), Some(2));
}

const TINY: &str = r#"{
  "case": "ieee6",
  "out_dir": "unused",
  "master_seed": 3,
  "dataset": {"attempts": 60},
  "model": {"base_width": 8, "depth": 1, "time_embed_dim": 8, "groups": 2},
  "training": {"t_max": 10, "epochs": 3, "batch": 4},
  "eval": {"n_eval_samples": 4, "chunk": 2}
}"#;

fn stage_cmd(args: &[&str], config: &Path, out_dir: &Path) -> Output {
    let mut full: Vec<&str> = args.to_vec();
    full.extend(["--config", config.to_str().unwrap()]);
    Command::new(env!("CARGO_BIN_EXE_contingen"))
        .args(&full)
        .env("CONTINGEN_OUT_DIR", out_dir)
        .output()
        .expect("spawn")
}

#[test]
fn pipeline_resumes_and_reruns_downstream_of_changes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("out");
    std::fs::write(&cfg, TINY).unwrap();

    let first = stage_cmd(&["pipeline"], &cfg, &out);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(stdout(&first).starts_with("score "));
    for f in ["dataset.jsonl", "model.ckpt", "loss.csv", "samples.jsonl", "summary.json", "report.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(!dir.path().join("unused").exists());
    let summary = std::fs::read(out.join("summary.json")).unwrap();
    let echoed: serde_json::Value = serde_json::from_slice(&summary).unwrap();
    assert_eq!(echoed["config"]["out_dir"], out.to_str().unwrap());
    assert_eq!(echoed["config"]["training"]["lr"], 1e-3);

    let again = stage_cmd(&["pipeline"], &cfg, &out);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(stderr(&again).matches("up to date").count(), 4, "{}", stderr(&again));
    assert_eq!(std::fs::read(out.join("summary.json")).unwrap(), summary);

    std::fs::write(&cfg, TINY.replace("\"epochs\": 3", "\"epochs\": 4")).unwrap();
    let changed = stage_cmd(&["pipeline"], &cfg, &out);
    assert_eq!(changed.status.code(), Some(0));
    let log = stderr(&changed);
    assert!(log.contains("gen-data: up to date"), "{log}");
    for s in ["train", "sample", "eval"] {
        assert!(log.contains(&format!("{s}: running")), "{log}");
    }
}

#[test]
fn stages_run_individually_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("out");
    std::fs::write(&cfg, TINY).unwrap();
    let o = stage_cmd(&["sample"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("train"));
    for s in ["gen-data", "train", "sample", "eval"] {
        let o = stage_cmd(&[s], &cfg, &out);
        assert_eq!(o.status.code(), Some(0), "{s}: {}", stderr(&o));
    }
    assert!(out.join("summary.json").is_file());
    let o = stage_cmd(&["pipeline"], &cfg, &out);
    assert_eq!(stderr(&o).matches("up to date").count(), 4, "{}", stderr(&o));
}

#[test]
fn config_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = dir.path().join("out");
    assert_eq!(stage_cmd(&["pipeline"], &missing, &out).status.code(), Some(4));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(stage_cmd(&["pipeline"], &bad, &out).status.code(), Some(2));
    let unknown_case = dir.path().join("case.json");
    std::fs::write(&unknown_case, r#"{"case": "ieee999"}"#).unwrap();
    assert_eq!(stage_cmd(&["gen-data"], &unknown_case, &out).status.code(), Some(2));
}
