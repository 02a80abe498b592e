//! HTTP review service: corpora, background scans, verdicts, reviewer
//! decisions and effective reports. Optionally serves static UI assets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sentinel_core::gateway::Transport;
use sentinel_core::pipeline::{Pipeline, RunManifest, ScanOutput};
use sentinel_core::taxonomy::SensitivityLevel;

use crate::config::SentinelConfig;
use crate::error::{AppError, AppResult};
use crate::review::{effective_report, model_columns, EffectiveColumn, ReviewAction, ReviewDecision, ReviewLog};
use crate::scan::{execute_scan, load_corpus, ScanRequest};

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(serde_json::json!({ "error": self.body() }))).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanJob {
    pub id: String,
    /// Corpus name from the service configuration.
    pub corpus: String,
    pub manifest: PathBuf,
    pub pipeline: Pipeline,
    /// `--backend`-style bindings applied over the configured ones.
    pub backends: Vec<String>,
    pub status: JobStatus,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<crate::error::ErrorBody>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_manifest: Option<RunManifest>,
}

impl ScanJob {
    /// Moves the job forward; backward transitions are ignored.
    fn advance(&mut self, status: JobStatus) {
        if status > self.status {
            self.status = status;
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub struct AppState {
    config: SentinelConfig,
    transport: Arc<dyn Transport>,
    jobs: RwLock<BTreeMap<String, ScanJob>>,
    reviews: ReviewLog,
}

impl AppState {
    /// Opens the data directory, reloading jobs from earlier runs. Jobs that
    /// were still pending or running are marked failed.
    pub fn open(config: SentinelConfig, transport: Arc<dyn Transport>) -> AppResult<Self> {
        let data_dir = config.service.data_dir.clone();
        let scans = data_dir.join("scans");
        std::fs::create_dir_all(&scans).map_err(|e| AppError::Invalid(format!("creating {}: {e}", scans.display())))?;
        let mut jobs = BTreeMap::new();
        let entries = std::fs::read_dir(&scans).map_err(|e| AppError::Invalid(format!("reading {}: {e}", scans.display())))?;
        for entry in entries.flatten() {
            let path = entry.path().join("job.json");
            let Ok(text) = std::fs::read_to_string(&path) else { continue };
            match serde_json::from_str::<ScanJob>(&text) {
                Ok(mut job) => {
                    if job.status < JobStatus::Done {
                        job.advance(JobStatus::Failed);
                        job.error = Some(AppError::Invalid("service stopped before the scan finished".into()).body());
                        persist_job(&data_dir, &job)?;
                    }
                    jobs.insert(job.id.clone(), job);
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        Ok(AppState {
            reviews: ReviewLog::new(data_dir.join("reviews.jsonl")),
            config,
            transport,
            jobs: RwLock::new(jobs),
        })
    }

    fn data_dir(&self) -> &Path {
        &self.config.service.data_dir
    }

    fn scan_dir(&self, id: &str) -> PathBuf {
        self.data_dir().join("scans").join(id)
    }

    pub fn job(&self, id: &str) -> AppResult<ScanJob> {
        self.jobs
            .read()
            .expect("jobs lock")
            .get(id)
            .cloned()
            .ok_or_else(|| AppError::NotFound(format!("unknown scan {id:?}")))
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut ScanJob)) -> AppResult<()> {
        let snapshot = {
            let mut jobs = self.jobs.write().expect("jobs lock");
            let job = jobs.get_mut(id).ok_or_else(|| AppError::NotFound(format!("unknown scan {id:?}")))?;
            f(job);
            job.clone()
        };
        persist_job(self.data_dir(), &snapshot)
    }

    fn finished(&self, id: &str) -> AppResult<ScanJob> {
        let job = self.job(id)?;
        match job.status {
            JobStatus::Done => Ok(job),
            JobStatus::Failed => Err(AppError::Conflict(format!("scan {id} failed"))),
            _ => Err(AppError::Conflict(format!("scan {id} is still {:?}", job.status).to_lowercase())),
        }
    }

    fn load_scan(&self, id: &str) -> AppResult<(ScanJob, RunManifest, ScanOutput)> {
        let job = self.finished(id)?;
        let (manifest, output) = ScanOutput::load(&self.scan_dir(id))?;
        Ok((job, manifest, output))
    }

    /// Runs a job to completion on the calling thread.
    pub fn run_job(&self, id: &str) {
        let job = match self.job(id) {
            Ok(j) => j,
            Err(_) => return,
        };
        let _ = self.update(id, |j| j.advance(JobStatus::Running));
        let out = self.scan_dir(id);
        let req = ScanRequest {
            manifest: &job.manifest,
            pipeline: job.pipeline,
            backends: &job.backends,
            out: &out,
            config: &self.config,
        };
        let result = execute_scan(&req, self.transport.clone());
        let _ = self.update(id, |j| {
            j.finished_at = Some(now());
            match result {
                Ok(m) => {
                    j.run_manifest = Some(m);
                    j.advance(JobStatus::Done);
                }
                Err(e) => {
                    log::error!("scan {id}: {e}");
                    j.error = Some(e.body());
                    j.advance(JobStatus::Failed);
                }
            }
        });
    }
}

fn persist_job(data_dir: &Path, job: &ScanJob) -> AppResult<()> {
    let dir = data_dir.join("scans").join(&job.id);
    std::fs::create_dir_all(&dir).map_err(|e| AppError::Invalid(format!("creating {}: {e}", dir.display())))?;
    let tmp = dir.join("job.json.tmp");
    let body = serde_json::to_string_pretty(job).expect("job serializes");
    std::fs::write(&tmp, body)
        .and_then(|_| std::fs::rename(&tmp, dir.join("job.json")))
        .map_err(|e| AppError::Invalid(format!("writing job {}: {e}", job.id)))
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/tables", get(list_tables))
        .route("/api/scans", get(list_scans).post(create_scan))
        .route("/api/scans/{id}", get(get_scan))
        .route("/api/scans/{id}/verdicts", get(get_verdicts))
        .route("/api/scans/{id}/report", get(get_report))
        .route("/api/reviews", post(create_review))
        .fallback(|| async { AppError::NotFound("no such endpoint".into()) });
    let api = match &state.config.service.ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    };
    api.with_state(state)
}

#[derive(Debug, Deserialize)]
struct TablesQuery {
    corpus: Option<String>,
}

#[derive(Debug, Serialize)]
struct ColumnInfo {
    index: usize,
    header: String,
    sample: Vec<String>,
}

#[derive(Debug, Serialize)]
struct TableInfo {
    corpus: String,
    id: String,
    title: String,
    description: String,
    country: Option<String>,
    row_count: usize,
    columns: Vec<ColumnInfo>,
}

async fn list_tables(State(state): State<Arc<AppState>>, Query(q): Query<TablesQuery>) -> AppResult<Json<Vec<TableInfo>>> {
    let corpora = &state.config.service.corpora;
    if let Some(name) = &q.corpus {
        if !corpora.contains_key(name) {
            return Err(AppError::NotFound(format!("unknown corpus {name:?}")));
        }
    }
    let state = state.clone();
    let corpus = q.corpus.clone();
    tokio::task::spawn_blocking(move || {
        let mut out = Vec::new();
        for (name, path) in &state.config.service.corpora {
            if corpus.as_ref().is_some_and(|c| c != name) {
                continue;
            }
            let (_, tables) = load_corpus(path, &state.config)?;
            out.extend(tables.into_iter().map(|t| TableInfo {
                corpus: name.clone(),
                id: t.id.clone(),
                title: t.title.clone(),
                description: t.description.clone(),
                country: t.country.clone(),
                row_count: t.row_count,
                columns: t
                    .columns
                    .iter()
                    .map(|c| ColumnInfo {
                        index: c.index,
                        header: c.header.clone(),
                        sample: c.sample.clone(),
                    })
                    .collect(),
            }));
        }
        Ok(Json(out))
    })
    .await
    .map_err(|e| AppError::Invalid(format!("table listing task failed: {e}")))?
}

async fn list_scans(State(state): State<Arc<AppState>>) -> Json<Vec<ScanJob>> {
    let mut jobs: Vec<ScanJob> = state.jobs.read().expect("jobs lock").values().cloned().collect();
    jobs.sort_by(|a, b| (&a.created_at, &a.id).cmp(&(&b.created_at, &b.id)));
    Json(jobs)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateScan {
    pub pipeline: String,
    pub corpus: String,
    #[serde(default)]
    pub backends: Vec<String>,
}

async fn create_scan(State(state): State<Arc<AppState>>, body: Option<Json<CreateScan>>) -> AppResult<(StatusCode, Json<ScanJob>)> {
    let Json(body) = body.ok_or_else(|| AppError::Invalid("expected a JSON body {pipeline, corpus}".into()))?;
    let pipeline: Pipeline = body.pipeline.parse().map_err(|e: sentinel_core::Error| AppError::Invalid(e.to_string()))?;
    let manifest = state
        .config
        .service
        .corpora
        .get(&body.corpus)
        .cloned()
        .ok_or_else(|| AppError::NotFound(format!("unknown corpus {:?}", body.corpus)))?;
    for b in &body.backends {
        crate::backends::parse_binding(b).map_err(|e| AppError::Invalid(e.to_string()))?;
    }
    let job = ScanJob {
        id: uuid::Uuid::new_v4().to_string(),
        corpus: body.corpus,
        manifest,
        pipeline,
        backends: body.backends,
        status: JobStatus::Pending,
        created_at: now(),
        finished_at: None,
        error: None,
        run_manifest: None,
    };
    persist_job(state.data_dir(), &job)?;
    state.jobs.write().expect("jobs lock").insert(job.id.clone(), job.clone());
    let worker = state.clone();
    let id = job.id.clone();
    tokio::task::spawn_blocking(move || worker.run_job(&id));
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_scan(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> AppResult<Json<ScanJob>> {
    Ok(Json(state.job(&id)?))
}

#[derive(Debug, Serialize)]
struct VerdictsBody {
    scan_id: String,
    run_manifest: RunManifest,
    #[serde(flatten)]
    verdicts: ScanOutput,
    /// Per-column view with the latest review state applied.
    columns: Vec<EffectiveColumn>,
}

async fn get_verdicts(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> AppResult<Json<VerdictsBody>> {
    let (_, manifest, output) = state.load_scan(&id)?;
    let decisions = state.reviews.for_scan(&id)?;
    let report = effective_report(&id, &manifest, &output, &decisions)?;
    Ok(Json(VerdictsBody {
        scan_id: id,
        run_manifest: manifest,
        verdicts: output,
        columns: report.columns,
    }))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    format: Option<String>,
}

async fn get_report(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ReportQuery>,
) -> AppResult<Response> {
    let (_, manifest, output) = state.load_scan(&id)?;
    let decisions = state.reviews.for_scan(&id)?;
    let report = effective_report(&id, &manifest, &output, &decisions)?;
    match q.format.as_deref().unwrap_or("structured") {
        "structured" | "json" => Ok(Json(report).into_response()),
        "text" => Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], report.render_text()).into_response()),
        other => Err(AppError::Invalid(format!("unknown report format {other:?} (structured or text)"))),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateReview {
    pub scan_id: String,
    pub table_id: String,
    pub column_index: usize,
    pub reviewer: String,
    pub action: ReviewAction,
    #[serde(default)]
    pub override_level: Option<SensitivityLevel>,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Serialize)]
struct ReviewCreated {
    decision: ReviewDecision,
    column: EffectiveColumn,
}

async fn create_review(State(state): State<Arc<AppState>>, body: Option<Json<CreateReview>>) -> AppResult<(StatusCode, Json<ReviewCreated>)> {
    let Json(body) = body.ok_or_else(|| AppError::Invalid("expected a JSON review body".into()))?;
    let (_, manifest, output) = state.load_scan(&body.scan_id)?;
    if !model_columns(&output)
        .iter()
        .any(|c| c.table_id == body.table_id && c.column_index == body.column_index)
    {
        return Err(AppError::NotFound(format!(
            "scan {} has no column {} in table {:?}",
            body.scan_id, body.column_index, body.table_id
        )));
    }
    let decision = ReviewDecision {
        scan_id: body.scan_id,
        table_id: body.table_id,
        column_index: body.column_index,
        reviewer: body.reviewer,
        action: body.action,
        override_level: body.override_level,
        note: body.note,
        timestamp: now(),
    };
    state.reviews.append(&decision)?;
    let decisions = state.reviews.for_scan(&decision.scan_id)?;
    let report = effective_report(&decision.scan_id, &manifest, &output, &decisions)?;
    let column = report
        .columns
        .into_iter()
        .find(|c| c.table_id == decision.table_id && c.column_index == decision.column_index)
        .expect("column checked above");
    Ok((StatusCode::CREATED, Json(ReviewCreated { decision, column })))
}

/// Binds the configured address and serves until interrupted.
pub async fn serve(config: SentinelConfig, transport: Arc<dyn Transport>) -> AppResult<()> {
    let bind = config.service.bind.clone();
    let state = Arc::new(AppState::open(config, transport)?);
    let listener = tokio::net::TcpListener::bind(&bind)
        .await
        .map_err(|e| AppError::Usage(format!("cannot bind {bind}: {e}")))?;
    log::info!("listening on http://{bind}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| AppError::Invalid(format!("server error: {e}")))
}
