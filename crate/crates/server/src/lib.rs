//! HTTP front ends.
//!
//! [`api_router`] serves probe runs to the CLI and the explorer. Every
//! handler runs its store work on the blocking pool, and reads only
//! persisted state, so requests never wait on model calls of a running
//! probe. [`wire_router`] exposes the deterministic mock backend over the
//! wire protocol (`POST /info`, `/predict`, `/encode`).

use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use fwprobe_core::analysis::{AnalysisProfile, EmbeddingSource};
use fwprobe_core::forge::{parse_dataset, Subset};
use fwprobe_core::gateway::wire::ErrorResponse;
use fwprobe_core::gateway::{HttpTransport, Method, MockBackend, Transport, MOCK_ENDPOINT};
use fwprobe_core::service::{ProbeService, RunParams, RunView, ServiceError, PAGE_SIZE};
use fwprobe_core::store::{DatasetEntry, ProfileMode, StoreError};

/// Timeout for one wire exchange with an HTTP backend.
pub const BACKEND_TIMEOUT: Duration = Duration::from_secs(120);

/// Opens a transport for a backend endpoint: `builtin:mock` or a base URL.
pub fn transport_for(endpoint: &str) -> Result<Arc<dyn Transport>, String> {
    if endpoint == MOCK_ENDPOINT {
        return Ok(Arc::new(MockBackend::default()));
    }
    if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
        return Err(format!("endpoint `{endpoint}` is neither {MOCK_ENDPOINT} nor an http(s) URL"));
    }
    HttpTransport::new(endpoint, BACKEND_TIMEOUT)
        .map(|t| Arc::new(t) as Arc<dyn Transport>)
        .map_err(|e| e.to_string())
}

#[derive(Clone)]
pub struct ApiState {
    pub service: Arc<ProbeService>,
    /// Endpoint used when a start request names none.
    pub default_endpoint: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub message: String,
}

struct Failure(StatusCode, ApiError);

impl Failure {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Failure(
            status,
            ApiError {
                error: error.to_string(),
                message: message.into(),
            },
        )
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let (status, class) = match &e {
            ServiceError::UnknownRun(_)
            | ServiceError::UnknownSentence { .. }
            | ServiceError::UnknownReport { .. }
            | ServiceError::Store(StoreError::UnknownRun(_) | StoreError::UnknownDataset(_)) => {
                (StatusCode::NOT_FOUND, "not_found")
            }
            ServiceError::InvalidParams(_) | ServiceError::Dataset(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            ServiceError::NotReady { .. } => (StatusCode::CONFLICT, "not_ready"),
            ServiceError::BackendUnavailable(_) | ServiceError::Analysis(_) => {
                (StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable")
            }
            ServiceError::Store(_) | ServiceError::Metric(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Failure::new(status, class, e.to_string())
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, Failure>;

async fn blocking<T, F>(f: F) -> Result<T, Failure>
where
    F: FnOnce() -> Result<T, Failure> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunList {
    pub runs: Vec<RunView>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetList {
    pub datasets: Vec<DatasetEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProfileList {
    pub run_id: String,
    pub sentence_id: String,
    pub profiles: Vec<AnalysisProfile>,
}

/// Body of `POST /runs`. Datasets are named by registered id; `inline`
/// carries a complete dataset file (manifest line plus items), which is
/// validated and registered first. This is how one-sentence ad-hoc probes
/// are submitted.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRunRequest {
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub datasets: Vec<String>,
    #[serde(default)]
    pub inline: Option<String>,
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub profiles: Option<ProfileMode>,
    #[serde(default)]
    pub source: Option<EmbeddingSource>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StartRunResponse {
    pub run: RunView,
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    subset: Option<String>,
    page: Option<usize>,
}

pub fn api_router(state: ApiState) -> Router {
    Router::new()
        .route("/runs", get(list_runs).post(start_run))
        .route("/runs/:id", get(get_run))
        .route("/runs/:id/report/:dataset", get(get_report))
        .route("/runs/:id/sentences", get(list_sentences))
        .route("/runs/:id/sentences/:sid", get(sentence_view))
        .route("/runs/:id/sentences/:sid/profiles", post(compute_profiles))
        .route("/datasets", get(list_datasets))
        .fallback(|| async { Failure::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

async fn list_runs(State(s): State<ApiState>) -> ApiResult<RunList> {
    blocking(move || Ok(RunList { runs: s.service.list_runs()? })).await.map(Json)
}

async fn list_datasets(State(s): State<ApiState>) -> ApiResult<DatasetList> {
    blocking(move || {
        Ok(DatasetList {
            datasets: s.service.list_datasets(),
        })
    })
    .await
    .map(Json)
}

async fn get_run(State(s): State<ApiState>, Path(id): Path<String>) -> ApiResult<RunView> {
    blocking(move || Ok(s.service.get_run(&id)?)).await.map(Json)
}

async fn get_report(
    State(s): State<ApiState>,
    Path((id, dataset)): Path<(String, String)>,
) -> ApiResult<fwprobe_core::service::RunReport> {
    blocking(move || Ok(s.service.get_report(&id, &dataset)?)).await.map(Json)
}

async fn list_sentences(
    State(s): State<ApiState>,
    Path(id): Path<String>,
    Query(q): Query<PageQuery>,
) -> ApiResult<fwprobe_core::service::SentencePage> {
    let subset = match q.subset.as_deref() {
        None | Some("") => None,
        Some(raw) => Some(
            raw.parse::<Subset>()
                .map_err(|e| Failure::new(StatusCode::BAD_REQUEST, "invalid_request", e))?,
        ),
    };
    let page = q.page.unwrap_or(1);
    blocking(move || Ok(s.service.list_sentences(&id, subset, page, PAGE_SIZE)?)).await.map(Json)
}

async fn sentence_view(
    State(s): State<ApiState>,
    Path((id, sid)): Path<(String, String)>,
) -> ApiResult<fwprobe_core::service::SentenceView> {
    blocking(move || Ok(s.service.get_sentence_view(&id, &sid)?)).await.map(Json)
}

async fn compute_profiles(State(s): State<ApiState>, Path((id, sid)): Path<(String, String)>) -> ApiResult<ProfileList> {
    blocking(move || {
        let profiles = s.service.ensure_profiles(&id, &sid)?;
        Ok(ProfileList {
            run_id: id,
            sentence_id: sid,
            profiles,
        })
    })
    .await
    .map(Json)
}

async fn start_run(State(s): State<ApiState>, body: String) -> Result<(StatusCode, Json<StartRunResponse>), Failure> {
    let req: StartRunRequest = serde_json::from_str(&body)
        .map_err(|e| Failure::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()))?;
    blocking(move || {
        let mut datasets = req.datasets;
        if let Some(text) = &req.inline {
            let dataset = parse_dataset(text).map_err(ServiceError::from)?;
            datasets.push(s.service.register_dataset(&dataset)?.dataset_id);
        }
        let endpoint = req.endpoint.unwrap_or_else(|| s.default_endpoint.clone());
        let transport =
            transport_for(&endpoint).map_err(|e| Failure::new(StatusCode::BAD_REQUEST, "invalid_request", e))?;
        let defaults = RunParams::default();
        let params = RunParams {
            layer: req.layer.unwrap_or(defaults.layer),
            k: req.k.unwrap_or(defaults.k),
            profiles: req.profiles.unwrap_or(defaults.profiles),
            source: req.source.unwrap_or(defaults.source),
            max_in_flight: defaults.max_in_flight,
        };
        let run_id = s.service.start_run(transport, &endpoint, &datasets, params)?;
        Ok((StatusCode::CREATED, Json(StartRunResponse { run: s.service.get_run(&run_id)? })))
    })
    .await
}

/// Serves `backend` over the wire protocol. Error bodies are returned with
/// status 400.
pub fn wire_router(backend: Arc<MockBackend>) -> Router {
    let route = |method: Method| {
        let backend = Arc::clone(&backend);
        post(move |body: String| async move {
            let reply = backend.handle(method, &body);
            let status = if serde_json::from_str::<ErrorResponse>(&reply).is_ok() {
                StatusCode::BAD_REQUEST
            } else {
                StatusCode::OK
            };
            (status, [(header::CONTENT_TYPE, "application/json; charset=utf-8")], reply)
        })
    };
    Router::new()
        .route("/info", route(Method::Info))
        .route("/predict", route(Method::Predict))
        .route("/encode", route(Method::Encode))
}

/// Binds `addr` and serves `router` until the process ends.
pub async fn serve(addr: &str, router: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router).await
}
