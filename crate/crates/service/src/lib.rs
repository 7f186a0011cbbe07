//! HTTP API over the module registry, the training protocol and the run
//! directories it writes.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/v1/modules` | library taxonomy, variants, assemblies |
//! | POST | `/api/v1/models` | validate a module selection |
//! | POST, GET | `/api/v1/jobs` | submit or list jobs |
//! | GET | `/api/v1/jobs/{id}` | job status |
//! | GET | `/api/v1/jobs/{id}/metrics?since=n` | metric events from cursor `n` |
//! | GET | `/api/v1/reports/{run-id}` | evaluation report as JSON or CSV |
//!
//! Jobs run one at a time on the blocking pool. A training job is refused
//! with 409 while another one is queued or running.

mod jobs;
mod selection;

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use mml_core::metrics::EvalReport;
use mml_core::mml::{MetricEvent, RunDir};
use mml_core::model::SceneSetup;
use mml_core::registry::{Registry, RegistryExport};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

pub use jobs::{Job, JobConfig, JobKind, JobRequest, JobState};
use jobs::{Outcome, Plan};
use selection::ModelRequest;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Directory holding one sub-directory per run.
    pub run_root: PathBuf,
    /// Static files served at `/`, typically the built studio UI.
    pub ui_dir: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

struct Inner {
    registry: Registry,
    run_root: PathBuf,
    jobs: Mutex<Vec<Job>>,
    /// Serializes job execution.
    worker: Mutex<()>,
}

impl AppState {
    pub fn new(run_root: PathBuf) -> Self {
        AppState(Arc::new(Inner {
            registry: Registry::toy(SceneSetup::toy().dims()),
            run_root,
            jobs: Mutex::new(Vec::new()),
            worker: Mutex::new(()),
        }))
    }

    fn jobs(&self) -> std::sync::MutexGuard<'_, Vec<Job>> {
        // a panicking job must not take the API down with it
        self.0.jobs.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn update(&self, idx: usize, f: impl FnOnce(&mut Job)) {
        f(&mut self.jobs()[idx]);
    }
}

/// Error body `{"error": ..., "field": ...}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    field: Option<String>,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, field: Option<&str>, message: impl ToString) -> Self {
        Self {
            status,
            field: field.map(str::to_string),
            message: message.to_string(),
        }
    }
    pub(crate) fn unprocessable(field: Option<&str>, message: impl ToString) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, field, message)
    }
    pub(crate) fn internal(message: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, None, message)
    }
    fn not_found(message: impl ToString) -> Self {
        Self::new(StatusCode::NOT_FOUND, None, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message, "field": self.field}))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let text = r.body_text();
        let field = rejected_field(&text);
        ApiError::new(r.status(), field.as_deref(), text)
    }
}

/// Best-effort field name from a JSON deserialization message: the path
/// reported for nested errors, else the first backquoted name.
fn rejected_field(text: &str) -> Option<String> {
    let detail = text.split_once("target type: ").map(|x| x.1).unwrap_or(text);
    let path = detail
        .split_once(": ")
        .map(|x| x.0)
        .filter(|p| !p.contains(' ') && *p != ".");
    path.or_else(|| detail.split('`').nth(1).filter(|s| !s.is_empty()))
        .map(str::to_string)
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/v1/modules", get(modules))
        .route("/api/v1/models", axum::routing::post(create_model))
        .route("/api/v1/jobs", get(list_jobs).post(create_job))
        .route("/api/v1/jobs/{id}", get(get_job))
        .route("/api/v1/jobs/{id}/metrics", get(job_metrics))
        .route("/api/v1/reports/{run_id}", get(get_report))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, cfg: ServiceConfig) -> std::io::Result<()> {
    let app = router(AppState::new(cfg.run_root), cfg.ui_dir);
    axum::serve(listener, app).await
}

#[derive(Serialize)]
struct ModulesResponse {
    #[serde(flatten)]
    export: RegistryExport,
    assemblies: Vec<String>,
}

async fn modules(State(s): State<AppState>) -> Result<Json<ModulesResponse>, ApiError> {
    let reg = &s.0.registry;
    let assemblies = reg.enumerate_assemblies().map_err(ApiError::internal)?;
    Ok(Json(ModulesResponse {
        export: reg.export(),
        assemblies: assemblies.iter().map(|a| a.id()).collect(),
    }))
}

async fn create_model(
    State(s): State<AppState>,
    body: Result<Json<ModelRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let Json(req) = body?;
    let a = s
        .0
        .registry
        .assemble_selection(&req.selection.0)
        .map_err(|e| ApiError::unprocessable(Some(&format!("selection.{}", e.field)), e.message))?;
    Ok((StatusCode::CREATED, Json(json!({"assembly-id": a.id()}))))
}

async fn list_jobs(State(s): State<AppState>) -> Json<Vec<Job>> {
    Json(s.jobs().clone())
}

async fn create_job(
    State(s): State<AppState>,
    body: Result<Json<JobRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<Job>), ApiError> {
    let Json(req) = body?;
    let (plan, run_id, assembly_ids) = jobs::plan(&req, &s.0.registry, &s.0.run_root)?;
    let (idx, job) = {
        let mut table = s.jobs();
        if req.kind.trains() {
            if let Some(j) = table.iter().find(|j| j.kind.trains() && j.state.active()) {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    None,
                    format!("training job {} is still {}", j.job_id, if j.state == JobState::Queued { "queued" } else { "running" }),
                ));
            }
        }
        let job = Job {
            job_id: format!("job-{}", table.len() + 1),
            kind: req.kind,
            state: JobState::Queued,
            run_id,
            assembly_ids,
            config: req.config,
            error_kind: None,
            error: None,
            report: None,
            metric_count: 0,
            metrics: Vec::new(),
        };
        table.push(job.clone());
        (table.len() - 1, job)
    };
    let worker = s.clone();
    tokio::task::spawn_blocking(move || run_job(&worker, idx, &plan));
    Ok((StatusCode::ACCEPTED, Json(job)))
}

fn run_job(s: &AppState, idx: usize, plan: &Plan) {
    let _turn = s.0.worker.lock().unwrap_or_else(|e| e.into_inner());
    s.update(idx, |j| j.state = JobState::Running);
    let mut on_event = |e: &MetricEvent| {
        s.update(idx, |j| {
            j.metrics.push(e.clone());
            j.metric_count = j.metrics.len();
        })
    };
    let result = jobs::execute(plan, &s.0.run_root, &mut on_event);
    s.update(idx, |j| match result {
        Ok(outcome) => {
            if let Outcome::Report(r) = outcome {
                j.report = Some(r);
            }
            j.state = JobState::Finished;
        }
        Err(e) => {
            j.error_kind = Some(if e.is_divergence() { "divergence" } else { "failed" });
            j.error = Some(e.to_string());
            j.state = JobState::Failed;
        }
    });
}

fn find_job(s: &AppState, id: &str) -> Result<Job, ApiError> {
    s.jobs()
        .iter()
        .find(|j| j.job_id == id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<Job>, ApiError> {
    find_job(&s, &id).map(Json)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsQuery {
    #[serde(default)]
    since: usize,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct MetricsPage {
    events: Vec<MetricEvent>,
    /// Cursor for the next request.
    next: usize,
    done: bool,
}

async fn job_metrics(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<MetricsQuery>,
) -> Result<Json<MetricsPage>, ApiError> {
    let table = s.jobs();
    let job = table
        .iter()
        .find(|j| j.job_id == id)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))?;
    let from = q.since.min(job.metrics.len());
    Ok(Json(MetricsPage {
        events: job.metrics[from..].to_vec(),
        next: job.metrics.len(),
        done: !job.state.active(),
    }))
}

#[derive(Clone, Copy, Default, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum ReportFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Clone, Copy, Default, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Stage {
    #[default]
    Finetuned,
    Pretrained,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportQuery {
    #[serde(default)]
    format: ReportFormat,
    fraction: Option<f64>,
    #[serde(default)]
    stage: Stage,
}

async fn get_report(
    State(s): State<AppState>,
    Path(run_id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> Result<Response, ApiError> {
    if !jobs::valid_run_id(&run_id) {
        return Err(ApiError::not_found(format!("unknown run {run_id}")));
    }
    let rd = RunDir(s.0.run_root.join(&run_id));
    if !rd.manifest().exists() {
        return Err(ApiError::not_found(format!("unknown run {run_id}")));
    }
    let fraction = q.fraction.unwrap_or(0.1);
    let dir = match q.stage {
        Stage::Finetuned => rd.eval(fraction),
        Stage::Pretrained => rd.eval_pretrained(fraction),
    };
    let path = dir.join("report.json");
    let text = tokio::fs::read_to_string(&path)
        .await
        .map_err(|_| ApiError::not_found(format!("run {run_id} has no report for fraction {fraction}")))?;
    let report: EvalReport = serde_json::from_str(&text).map_err(ApiError::internal)?;
    Ok(match q.format {
        ReportFormat::Json => Json(report).into_response(),
        ReportFormat::Csv => ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], report.to_csv()).into_response(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_from_rejection_text() {
        let t = "Failed to deserialize the JSON body into the target type: config.train.lrr: unknown field `lrr`, expected one of `rounds` at line 1 column 30";
        assert_eq!(rejected_field(t).as_deref(), Some("config.train.lrr"));
        let t = "Failed to deserialize the JSON body into the target type: missing field `kind` at line 1 column 2";
        assert_eq!(rejected_field(t).as_deref(), Some("kind"));
        let t = "Failed to deserialize the JSON body into the target type: config.train.lr: invalid type: string \"x\", expected f64 at line 1 column 9";
        assert_eq!(rejected_field(t).as_deref(), Some("config.train.lr"));
    }
}
