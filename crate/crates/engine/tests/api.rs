mod common;

use std::time::Duration;

use common::*;
use serde_json::{json, Value};
use surveyor_engine::api::{router, ApiState};
use surveyor_engine::mock::{MockScript, MockServer};

async fn start_api() -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router(ApiState::new(anes_dir()))).await.unwrap();
    });
    format!("http://{addr}")
}

async fn wait_until_settled(http: &reqwest::Client, api: &str, id: &str) -> Value {
    for _ in 0..400 {
        let body: Value = http.get(format!("{api}/experiments/{id}?units=false")).send().await.unwrap().json().await.unwrap();
        if body["running"] == json!(false) && body["state"] != json!("running") {
            return body;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("experiment {id} did not finish");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn experiment_lifecycle() {
    let mock = MockServer::start(MockScript::default()).await.unwrap();
    let api = start_api().await;
    let http = reqwest::Client::new();
    let tmp = tempfile::tempdir().unwrap();
    let personas = first_personas(tmp.path(), 2);
    let toml = anes_toml(&mock.base_url(), &tmp.path().join("out"), r#"["battery", "single_item"]"#, "[1]", RESTRICTED_JSON)
        .replace("personas = \"personas.csv\"", &format!("personas = \"{}\"", personas.display()));

    let resp = http.post(format!("{api}/experiments")).json(&json!({"config_toml": toml})).send().await.unwrap();
    assert_eq!(resp.status(), 201);
    let created: Value = resp.json().await.unwrap();
    assert_eq!(created["units"], json!(34));
    let id = created["id"].as_str().unwrap().to_string();

    // Registering the same config again is idempotent.
    let again = http.post(format!("{api}/experiments")).json(&json!({"config_toml": toml})).send().await.unwrap();
    assert_eq!(again.status(), 200);

    let before: Value = http.get(format!("{api}/experiments/{id}")).send().await.unwrap().json().await.unwrap();
    assert_eq!(before["state"], json!("planned"));
    assert_eq!(before["manifest"]["units"].as_array().unwrap().len(), 34);

    let started = http.post(format!("{api}/experiments/{id}/start")).send().await.unwrap();
    assert_eq!(started.status(), 202);
    let done = wait_until_settled(&http, &api, &id).await;
    assert_eq!(done["state"], json!("completed"));
    assert_eq!(done["counts"]["done"], json!(34));
    assert!(done.get("manifest").is_none());

    let mut seen = Vec::new();
    let mut cursor = 0;
    loop {
        let page: Value = http
            .get(format!("{api}/experiments/{id}/results?cursor={cursor}&limit=10"))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(page["total"], json!(34));
        for item in page["items"].as_array().unwrap() {
            seen.push(format!("{}|{}", item["unit_id"], item["variant"]));
        }
        match page["next_cursor"].as_u64() {
            Some(n) => cursor = n,
            None => break,
        }
    }
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 34);

    let qs: Value = http.get(format!("{api}/questionnaires")).send().await.unwrap().json().await.unwrap();
    assert_eq!(qs["questionnaires"][0]["questions"], json!(16));

    let preview: Value = http
        .post(format!("{api}/preview"))
        .json(&json!({"experiment": id, "persona": "r02", "mode": "battery", "method": "restricted_choice+json"}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(preview["first_request"]["model"], json!("mock"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn error_statuses() {
    let api = start_api().await;
    let http = reqwest::Client::new();

    let missing = http.get(format!("{api}/experiments/nope")).send().await.unwrap();
    assert_eq!(missing.status(), 404);
    let body: Value = missing.json().await.unwrap();
    assert!(body["error"].is_string());

    assert_eq!(http.post(format!("{api}/experiments/nope/start")).send().await.unwrap().status(), 404);

    let neither = http.post(format!("{api}/experiments")).json(&json!({})).send().await.unwrap();
    assert_eq!(neither.status(), 400);

    let bad = http
        .post(format!("{api}/experiments"))
        .json(&json!({"config_toml": "name = 3"}))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), 400);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn inline_preview_and_upload_check() {
    let api = start_api().await;
    let http = reqwest::Client::new();
    let tmp = tempfile::tempdir().unwrap();
    let toml = anes_toml("http://127.0.0.1:9/v1", tmp.path(), r#"["sequential"]"#, "[1]", RESTRICTED_JSON);
    let preview: Value = http
        .post(format!("{api}/preview"))
        .json(&json!({"config_toml": toml, "persona": "r01", "mode": "sequential", "method": "restricted_choice+json"}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(preview["first_request"]["messages"].as_array().unwrap().len(), 2);

    let unknown = http
        .post(format!("{api}/preview"))
        .json(&json!({"config_toml": toml, "persona": "zz", "mode": "sequential", "method": "restricted_choice+json"}))
        .send()
        .await
        .unwrap();
    assert_eq!(unknown.status(), 400);

    let csv = std::fs::read_to_string(anes_dir().join("questionnaire.csv")).unwrap();
    let ok: Value = http
        .post(format!("{api}/questionnaires"))
        .json(&json!({"content": csv, "format": "csv", "id": "anes"}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(ok["valid"], json!(true));
    assert_eq!(ok["questionnaire"]["questions"].as_array().unwrap().len(), 16);

    let broken: Value = http
        .post(format!("{api}/questionnaires"))
        .json(&json!({"content": "question_id,question_text,scale_kind\nq1,,nominal\n", "format": "csv"}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(broken["valid"], json!(false));
}
