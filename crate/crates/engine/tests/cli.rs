mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use surveyor_engine::mock::{Match, MockScript, MockServer, Step};

fn surveyor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surveyor")).args(args).output().unwrap()
}

fn write_config(dir: &Path, base_url: &str, extra: &str) -> String {
    let personas = first_personas(dir, 2);
    let toml = anes_toml(base_url, &dir.join("out"), r#"["battery"]"#, "[1]", extra)
        .replace("personas = \"personas.csv\"", &format!("personas = \"{}\"", personas.display()))
        .replace("questionnaire = \"questionnaire.csv\"", &format!("questionnaire = \"{}\"", anes_dir().join("questionnaire.csv").display()))
        .replace("user_file = \"user_prompt.txt\"", &format!("user_file = \"{}\"", anes_dir().join("user_prompt.txt").display()));
    let path = dir.join("experiment.toml");
    std::fs::write(&path, toml).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_and_config_errors() {
    assert_eq!(surveyor(&["run"]).status.code(), Some(2));
    assert_eq!(surveyor(&["frobnicate"]).status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nbogus = 1\n").unwrap();
    assert_eq!(surveyor(&["plan", bad.to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(surveyor(&["plan", "/nonexistent/experiment.toml"]).status.code(), Some(3));
}

#[test]
fn plan_and_preview_print_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "http://127.0.0.1:9/v1", RESTRICTED_JSON);
    let out = surveyor(&["plan", &cfg, "--units"]);
    assert_eq!(out.status.code(), Some(0));
    let plan: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(plan["units"], serde_json::json!(2));
    assert_eq!(plan["unit_ids"].as_array().unwrap().len(), 2);

    let out = surveyor(&["preview", &cfg, "--persona", "r01", "--mode", "battery", "--method", "restricted_choice+json"]);
    assert_eq!(out.status.code(), Some(0));
    let p: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(p["first_request"]["model"], serde_json::json!("mock"));

    let out = surveyor(&["preview", &cfg, "--persona", "nobody", "--mode", "battery", "--method", "restricted_choice+json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_score_and_exit_statuses() {
    let server = MockServer::start(MockScript::default()).await.unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &server.base_url(), RESTRICTED_JSON);

    let c = cfg.clone();
    let out = tokio::task::spawn_blocking(move || surveyor(&["run", &c])).await.unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["state"], serde_json::json!("completed"));

    // A second run refuses to touch existing output, a resume is a no-op.
    let c = cfg.clone();
    let out = tokio::task::spawn_blocking(move || surveyor(&["run", &c])).await.unwrap();
    assert_eq!(out.status.code(), Some(3));
    let c = cfg.clone();
    let out = tokio::task::spawn_blocking(move || surveyor(&["run", &c, "--resume"])).await.unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(server.transcript().len(), 2);

    let results = tmp.path().join("out/results.jsonl");
    let reference = anes_dir().join("reference.csv");
    let out = surveyor(&[
        "score",
        results.to_str().unwrap(),
        reference.to_str().unwrap(),
        "--stratify",
        "gender",
        "--format",
        "csv",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).lines().count() >= 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn provider_failures_map_to_exit_statuses() {
    let partial = MockServer::start(MockScript::default().rule(
        Match {
            unit_id_prefix: Some("r02/".into()),
            ..Match::default()
        },
        vec![Step::fail(500)],
    ))
    .await
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &partial.base_url(), RESTRICTED_JSON);
    let out = tokio::task::spawn_blocking(move || surveyor(&["run", &cfg])).await.unwrap();
    assert_eq!(out.status.code(), Some(5));

    let denied = MockServer::start(MockScript::default().rule(Match::default(), vec![Step::fail(403)]))
        .await
        .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &denied.base_url(), RESTRICTED_JSON);
    let out = tokio::task::spawn_blocking(move || surveyor(&["run", &cfg])).await.unwrap();
    assert_eq!(out.status.code(), Some(4));
}
