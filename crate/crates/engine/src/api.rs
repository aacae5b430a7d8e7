//! HTTP API used by the browser front end.
//!
//! | Method | Path | Purpose |
//! |---|---|---|
//! | POST | `/experiments` | register a config, returns its id and plan |
//! | POST | `/experiments/{id}/start` | start (or resume) the run in the background |
//! | GET | `/experiments/{id}` | manifest with live progress |
//! | GET | `/experiments/{id}/results?cursor=&limit=` | completed records, paginated |
//! | POST | `/preview` | rendered prompts and wire requests, no provider calls |
//! | GET | `/questionnaires` | questionnaires of registered experiments |
//! | POST | `/questionnaires` | validate an uploaded questionnaire |
//!
//! Configs are posted as JSON (`config`) or TOML text (`config_toml`);
//! relative paths resolve against `base_dir`, defaulting to the server's
//! base directory.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use surveyor_core::survey::{read_questionnaire, validate, Diagnostic, LoadError, Questionnaire, SourceFormat};

use crate::config::{ConfigError, ExperimentConfig};
use crate::orchestrator::{plan_run, preview, run, PreviewError, PreviewRequest, RunOptions};
use crate::store::{read_jsonl, OutputDir, RunManifest, RunState, UnitRecord};

pub const DEFAULT_PAGE: usize = 100;
pub const MAX_PAGE: usize = 1000;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("no experiment {0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        ApiError::BadRequest(e.to_string())
    }
}

impl From<PreviewError> for ApiError {
    fn from(e: PreviewError) -> Self {
        ApiError::BadRequest(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({"error": self.to_string()}))).into_response()
    }
}

struct Experiment {
    config: ExperimentConfig,
    questionnaire: Questionnaire,
    live: Arc<Mutex<RunManifest>>,
    running: bool,
    error: Option<String>,
}

pub struct ApiState {
    base_dir: PathBuf,
    experiments: Mutex<BTreeMap<String, Experiment>>,
}

impl ApiState {
    pub fn new(base_dir: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            base_dir: base_dir.into(),
            experiments: Mutex::new(BTreeMap::new()),
        })
    }
}

pub fn router(state: Arc<ApiState>) -> Router {
    Router::new()
        .route("/experiments", post(create_experiment))
        .route("/experiments/{id}", get(get_experiment))
        .route("/experiments/{id}/start", post(start_experiment))
        .route("/experiments/{id}/results", get(get_results))
        .route("/preview", post(post_preview))
        .route("/questionnaires", get(list_questionnaires).post(check_questionnaire))
        .with_state(state)
}

/// A config in either accepted encoding.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
pub struct ConfigBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_toml: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_dir: Option<PathBuf>,
}

impl ConfigBody {
    fn load(&self, default_dir: &std::path::Path) -> Result<ExperimentConfig, ApiError> {
        let dir = self.base_dir.clone().unwrap_or_else(|| default_dir.to_path_buf());
        match (&self.config, &self.config_toml) {
            (Some(v), None) => Ok(ExperimentConfig::from_json(&v.to_string(), dir)?),
            (None, Some(t)) => Ok(ExperimentConfig::from_toml(t, dir)?),
            _ => Err(ApiError::BadRequest("send exactly one of config or config_toml".into())),
        }
    }
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    id: &'a str,
    name: &'a str,
    state: RunState,
    running: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    config_digest: &'a str,
    counts: crate::store::StatusCounts,
    totals: crate::store::Totals,
}

async fn create_experiment(State(st): State<Arc<ApiState>>, Json(body): Json<ConfigBody>) -> Result<Response, ApiError> {
    let cfg = body.load(&st.base_dir)?;
    let plan = plan_run(&cfg)?;
    let id = plan.manifest.run_id.clone();
    let mut exps = st.experiments.lock().expect("experiments lock");
    let created = !exps.contains_key(&id);
    if created {
        exps.insert(
            id.clone(),
            Experiment {
                config: cfg,
                questionnaire: plan.inputs.questionnaire.clone(),
                live: Arc::new(Mutex::new(plan.manifest.clone())),
                running: false,
                error: None,
            },
        );
    }
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    let m = &plan.manifest;
    Ok((
        status,
        Json(json!({
            "id": id,
            "config_digest": m.config_digest,
            "inventory_digest": m.inventory_digest,
            "units": m.units.len(),
            "variants": m.variants,
        })),
    )
        .into_response())
}

async fn start_experiment(State(st): State<Arc<ApiState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let (cfg, live) = {
        let mut exps = st.experiments.lock().expect("experiments lock");
        let exp = exps.get_mut(&id).ok_or_else(|| ApiError::NotFound(id.clone()))?;
        if exp.running {
            return Err(ApiError::Conflict(format!("experiment {id} is already running")));
        }
        exp.running = true;
        exp.error = None;
        exp.live.lock().expect("live manifest lock").state = RunState::Running;
        (exp.config.clone(), exp.live.clone())
    };
    let st2 = st.clone();
    let id2 = id.clone();
    tokio::spawn(async move {
        let result = run(
            &cfg,
            RunOptions {
                resume: true,
                live: Some(live),
            },
        )
        .await;
        let mut exps = st2.experiments.lock().expect("experiments lock");
        if let Some(exp) = exps.get_mut(&id2) {
            exp.running = false;
            if let Err(e) = result {
                exp.error = Some(e.to_string());
                let mut m = exp.live.lock().expect("live manifest lock");
                if m.state == RunState::Running {
                    m.state = RunState::Aborted;
                }
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({"id": id, "state": RunState::Running}))).into_response())
}

#[derive(Debug, Deserialize)]
struct ManifestQuery {
    #[serde(default)]
    units: Option<bool>,
}

async fn get_experiment(
    State(st): State<Arc<ApiState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ManifestQuery>,
) -> Result<Json<Value>, ApiError> {
    let exps = st.experiments.lock().expect("experiments lock");
    let exp = exps.get(&id).ok_or_else(|| ApiError::NotFound(id.clone()))?;
    let m = exp.live.lock().expect("live manifest lock");
    let summary = Summary {
        id: &id,
        name: &m.name,
        state: m.state,
        running: exp.running,
        error: exp.error.as_deref(),
        config_digest: &m.config_digest,
        counts: m.counts,
        totals: m.totals,
    };
    let mut body = serde_json::to_value(summary).expect("summary serializes");
    if q.units.unwrap_or(true) {
        body["manifest"] = serde_json::to_value(&*m).expect("manifest serializes");
    }
    Ok(Json(body))
}

#[derive(Debug, Deserialize)]
struct Page {
    #[serde(default)]
    cursor: usize,
    #[serde(default)]
    limit: Option<usize>,
}

async fn get_results(
    State(st): State<Arc<ApiState>>,
    UrlPath(id): UrlPath<String>,
    Query(page): Query<Page>,
) -> Result<Json<Value>, ApiError> {
    let (out, running) = {
        let exps = st.experiments.lock().expect("experiments lock");
        let exp = exps.get(&id).ok_or_else(|| ApiError::NotFound(id.clone()))?;
        (OutputDir::new(exp.config.output_path()), exp.running)
    };
    let limit = page.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
    // The journal only grows, so a cursor is a stable line offset.
    let records: Vec<UnitRecord> = read_jsonl(&out.records()).map_err(|e| ApiError::Internal(e.to_string()))?;
    let items: Vec<&UnitRecord> = records.iter().skip(page.cursor).take(limit).collect();
    let next = page.cursor + items.len();
    Ok(Json(json!({
        "items": items,
        "cursor": page.cursor,
        "next_cursor": (next < records.len() || running).then_some(next),
        "total": records.len(),
    })))
}

#[derive(Debug, Deserialize)]
struct PreviewBody {
    #[serde(flatten)]
    source: ConfigBody,
    /// Preview against a registered experiment instead of an inline config.
    #[serde(default)]
    experiment: Option<String>,
    #[serde(flatten)]
    request: PreviewRequest,
}

async fn post_preview(State(st): State<Arc<ApiState>>, Json(body): Json<PreviewBody>) -> Result<Json<Value>, ApiError> {
    let cfg = match &body.experiment {
        Some(id) => {
            let exps = st.experiments.lock().expect("experiments lock");
            exps.get(id).ok_or_else(|| ApiError::NotFound(id.clone()))?.config.clone()
        }
        None => body.source.load(&st.base_dir)?,
    };
    let inputs = cfg.load_inputs()?;
    let p = preview(&cfg, &inputs, &body.request)?;
    Ok(Json(serde_json::to_value(p).expect("preview serializes")))
}

async fn list_questionnaires(State(st): State<Arc<ApiState>>) -> Json<Value> {
    let exps = st.experiments.lock().expect("experiments lock");
    let list: Vec<Value> = exps
        .iter()
        .map(|(id, e)| {
            json!({
                "experiment": id,
                "id": e.questionnaire.id,
                "questions": e.questionnaire.questions.len(),
                "questionnaire": e.questionnaire,
            })
        })
        .collect();
    Json(json!({"questionnaires": list}))
}

#[derive(Debug, Deserialize)]
struct Upload {
    content: String,
    #[serde(default = "csv_format")]
    format: SourceFormat,
    #[serde(default)]
    id: Option<String>,
}

fn csv_format() -> SourceFormat {
    SourceFormat::Csv
}

#[derive(Debug, Serialize)]
struct UploadCheck {
    valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    questionnaire: Option<Questionnaire>,
    diagnostics: Vec<Diagnostic>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

async fn check_questionnaire(Json(up): Json<Upload>) -> Json<UploadCheck> {
    let id = up.id.unwrap_or_else(|| "upload".into());
    let check = match read_questionnaire(up.content.as_bytes(), up.format, &id) {
        Ok(q) => UploadCheck {
            valid: true,
            diagnostics: validate(&q),
            questionnaire: Some(q),
            error: None,
        },
        Err(LoadError::Invalid(diagnostics)) => UploadCheck {
            valid: false,
            questionnaire: None,
            diagnostics,
            error: None,
        },
        Err(e) => UploadCheck {
            valid: false,
            questionnaire: None,
            diagnostics: Vec::new(),
            error: Some(e.to_string()),
        },
    };
    Json(check)
}

/// Serves the API until the process is interrupted.
pub async fn serve(addr: std::net::SocketAddr, base_dir: PathBuf) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(ApiState::new(base_dir)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
