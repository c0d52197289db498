//! `/v1` HTTP API over a finished run.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use monoprobe_core::corpus::CorpusStore;
use monoprobe_core::featurize::{FeatureCache, PaperFeatureVector, SaeConfig};
use monoprobe_core::interpret::{top_exemplars, token_saliency, FeatureFinding, InterpretError, ReportBundle, ReportJson};
use monoprobe_core::journal::{export_annotated_table, Annotation, AnnotationJournal, AnnotationKey, JournalError};
use monoprobe_core::pipeline::RunConfig;

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("no report bundle at {path}: {message} (run `monoprobe report` first)")]
    MissingBundle { path: String, message: String },
    #[error("corpus: {0}")]
    Corpus(#[from] monoprobe_core::corpus::CorpusError),
    #[error("feature cache: {0}")]
    Features(#[from] monoprobe_core::featurize::FeatureError),
    #[error("{0}")]
    Journal(#[from] JournalError),
}

/// Read-only run artifacts plus the writable journal.
pub struct AppState {
    report: ReportJson,
    corpus: CorpusStore,
    cache: FeatureCache,
    spaces: BTreeMap<String, SaeConfig>,
    vectors: BTreeMap<String, Vec<PaperFeatureVector>>,
    journal: AnnotationJournal,
    default_k: usize,
}

impl AppState {
    pub fn load(config: &RunConfig) -> Result<Self, StartupError> {
        let report_dir = config.report_dir();
        let report = ReportBundle::load_report(&report_dir)
            .map_err(|e| StartupError::MissingBundle { path: report_dir.display().to_string(), message: e.to_string() })?;
        let corpus = CorpusStore::from_paths(&config.papers, &config.venues)?;
        let cache = FeatureCache::open(config.feature_cache_dir())?;
        let mut spaces = BTreeMap::new();
        let mut vectors = BTreeMap::new();
        for setting in report.tasks.iter().flat_map(|t| t.settings.iter()) {
            if spaces.contains_key(&setting.sae.sae_id) {
                continue;
            }
            let mut loaded = Vec::new();
            for entry in corpus.entries() {
                if let Some(v) = cache.load_vector(&setting.sae, &entry.paper.paper_id)? {
                    loaded.push(v);
                }
            }
            spaces.insert(setting.sae.sae_id.clone(), setting.sae.clone());
            vectors.insert(setting.sae.sae_id.clone(), loaded);
        }
        let journal = AnnotationJournal::open(config.journal_path())?;
        Ok(Self { report, corpus, cache, spaces, vectors, journal, default_k: config.exemplar_k })
    }

    pub fn journal(&self) -> &AnnotationJournal {
        &self.journal
    }

    pub fn export_csv(&self, task_id: &str) -> Option<String> {
        self.report.task(task_id)?;
        Some(export_annotated_table(&self.report, &self.journal.current_map(), task_id))
    }

    fn space(&self, sae_id: &str) -> Result<&SaeConfig, ApiError> {
        self.spaces.get(sae_id).ok_or_else(|| ApiError::NotFound(format!("unknown sae `{sae_id}`")))
    }
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self {
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

impl From<InterpretError> for ApiError {
    fn from(e: InterpretError) -> Self {
        match e {
            InterpretError::MissingTokenCache(_) | InterpretError::MissingVector(_) => Self::NotFound(e.to_string()),
            InterpretError::IndexOutOfRange { .. } | InterpretError::ZeroK => Self::BadRequest(e.to_string()),
            _ => Self::Internal(e.to_string()),
        }
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/v1/tasks", get(list_tasks))
        .route("/v1/tasks/{task}/features", get(task_features))
        .route("/v1/tasks/{task}/export", get(export_task))
        .route("/v1/features/{sae}/{idx}/exemplars", get(exemplars))
        .route("/v1/features/{sae}/{idx}/saliency/{paper_id}", get(saliency))
        .route("/v1/features/{sae}/{idx}/annotation", put(annotate))
        .with_state(state)
}

#[derive(Serialize)]
struct SettingView {
    setting_id: String,
    setting_number: usize,
    sae: SaeConfig,
    accuracy: f64,
    n_test: usize,
    leaf_count: usize,
    feature_count: usize,
}

#[derive(Serialize)]
struct TaskView {
    task_id: String,
    task_number: usize,
    settings: Vec<SettingView>,
}

async fn list_tasks(State(state): State<Shared>) -> Json<Vec<TaskView>> {
    Json(
        state
            .report
            .tasks
            .iter()
            .map(|t| TaskView {
                task_id: t.task_id.clone(),
                task_number: t.task_number,
                settings: t
                    .settings
                    .iter()
                    .map(|s| SettingView {
                        setting_id: s.setting_id.clone(),
                        setting_number: s.setting_number,
                        sae: s.sae.clone(),
                        accuracy: s.accuracy,
                        n_test: s.n_test,
                        leaf_count: s.leaf_count,
                        feature_count: s.findings.len(),
                    })
                    .collect(),
            })
            .collect(),
    )
}

/// A finding with its current annotation, if any.
#[derive(Serialize)]
struct FeatureRow {
    #[serde(flatten)]
    finding: FeatureFinding,
    annotation: Option<Annotation>,
}

async fn task_features(State(state): State<Shared>, Path(task): Path<String>) -> Result<Json<Vec<FeatureRow>>, ApiError> {
    if state.report.task(&task).is_none() {
        return Err(ApiError::NotFound(format!("unknown task `{task}`")));
    }
    let current = state.journal.current_map();
    let rows = state
        .report
        .sorted_findings(&task)
        .into_iter()
        .map(|f| {
            let annotation = current.get(&AnnotationKey::new(&f.sae_id, &f.task_id, f.feature_index)).cloned();
            FeatureRow { finding: f, annotation }
        })
        .collect();
    Ok(Json(rows))
}

async fn export_task(State(state): State<Shared>, Path(task): Path<String>) -> Result<Response, ApiError> {
    let csv = state.export_csv(&task).ok_or_else(|| ApiError::NotFound(format!("unknown task `{task}`")))?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

#[derive(Deserialize)]
struct ExemplarQuery {
    k: Option<usize>,
}

async fn exemplars(
    State(state): State<Shared>,
    Path((sae, idx)): Path<(String, usize)>,
    Query(q): Query<ExemplarQuery>,
) -> Result<Response, ApiError> {
    let space = state.space(&sae)?;
    if idx >= space.feature_count {
        return Err(InterpretError::IndexOutOfRange { feature_index: idx, feature_count: space.feature_count }.into());
    }
    let k = q.k.unwrap_or(state.default_k);
    let ex = top_exemplars(idx, &state.corpus, state.vectors[&sae].iter(), k)?;
    Ok(Json(ex).into_response())
}

async fn saliency(
    State(state): State<Shared>,
    Path((sae, idx, paper_id)): Path<(String, usize, String)>,
) -> Result<Response, ApiError> {
    let space = state.space(&sae)?;
    let matrix = state.cache.load_matrix(space, &paper_id).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(token_saliency(idx, matrix.as_ref(), &paper_id)?).into_response())
}

async fn annotate(
    State(state): State<Shared>,
    Path((sae, idx)): Path<(String, usize)>,
    body: Result<Json<Annotation>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<Annotation>, ApiError> {
    let Json(annotation) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let space = state.space(&sae)?;
    if annotation.sae_id != sae || annotation.feature_index != idx {
        return Err(ApiError::BadRequest(format!(
            "body addresses {}/{} but the path addresses {sae}/{idx}",
            annotation.sae_id, annotation.feature_index
        )));
    }
    if idx >= space.feature_count {
        return Err(InterpretError::IndexOutOfRange { feature_index: idx, feature_count: space.feature_count }.into());
    }
    if state.report.task(&annotation.task_id).is_none() {
        return Err(ApiError::BadRequest(format!("unknown task `{}`", annotation.task_id)));
    }
    let writer = state.clone();
    let current = tokio::task::spawn_blocking(move || writer.journal.append(annotation))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| match e {
            JournalError::EmptyLabel => ApiError::Unprocessable(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        })?;
    Ok(Json(current))
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("serving /v1 on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
