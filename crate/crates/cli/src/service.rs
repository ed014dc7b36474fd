//! JSON-over-HTTP API for inspecting predictions and editing intervention plans.
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | GET | `/api/model` | | config, part count, class names |
//! | GET | `/api/samples` | `split`, `page`, `page_size` | sample metadata |
//! | GET | `/api/sample/{id}/image` | `split` | RGB PNG |
//! | GET | `/api/sample/{id}/parts` | `split`, `plan` | indexed PNG part map |
//! | GET | `/api/sample/{id}/predict` | `split`, `plan` | prediction |
//! | POST | `/api/plan/loo` | `{split, metric, plan?, repeated?}` | LOO tables and suggested plan |
//! | POST | `/api/plan/calibrate` | `{q, split?}` | threshold table |
//! | POST | `/api/evaluate` | `{split, plan}` | metrics report |
//! | GET | `/api/status` | | active and last job |
//! | GET | `/api/plans`, `/api/plans/{name}` | | named plans |
//! | PUT | `/api/plans/{name}` | plan | stored plan |
//!
//! `plan` query values are either a JSON plan or the name of a stored plan. Splits default
//! to `test-iid` (`val` for LOO, `train` for calibration). Errors are `{"error": msg}` with
//! 404 for unknown samples or plans, 422 for invalid input, 409 while another job runs.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ifam_core::databench::{class_names, GroupedDataset, Sample, Split};
use ifam_core::interventions::InterventionPlan;
use ifam_core::model::IfamModel;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::commands::final_parts;
use crate::error::CliError;
use crate::pipeline::{self, Metric};
use crate::pngio;

pub const DEFAULT_PORT: u16 = 8173;
const MAX_PAGE_SIZE: usize = 500;

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Unprocessable(String),
    Conflict(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(json!({ "error": msg }))).into_response()
    }
}

impl From<ifam_core::Error> for ApiError {
    fn from(e: ifam_core::Error) -> Self {
        match e {
            ifam_core::Error::InvalidArgument(_) | ifam_core::Error::Config(_) | ifam_core::Error::EmptyDataset(_) => {
                ApiError::Unprocessable(e.to_string())
            }
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Core(c) => c.into(),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, Default, Serialize)]
pub struct JobStatus {
    /// Kind of the running job, if any.
    pub active: Option<String>,
    pub completed: u64,
    pub last: Option<FinishedJob>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinishedJob {
    pub kind: String,
    pub ok: bool,
    pub millis: u128,
}

/// Frozen model and dataset shared by all requests.
pub struct AppState {
    pub model: IfamModel,
    pub data: GroupedDataset,
    plans_dir: Option<PathBuf>,
    busy: AtomicBool,
    status: Mutex<JobStatus>,
}

/// Holds the single job slot; releases it and records the outcome on drop.
pub struct JobGuard {
    state: Arc<AppState>,
    kind: String,
    started: Instant,
    ok: bool,
}

impl Drop for JobGuard {
    fn drop(&mut self) {
        let mut s = self.state.status.lock().unwrap();
        s.active = None;
        s.completed += 1;
        s.last = Some(FinishedJob {
            kind: self.kind.clone(),
            ok: self.ok,
            millis: self.started.elapsed().as_millis(),
        });
        drop(s);
        self.state.busy.store(false, Ordering::Release);
    }
}

impl AppState {
    pub fn new(model: IfamModel, data: GroupedDataset, plans_dir: Option<PathBuf>) -> Result<Arc<Self>, CliError> {
        if let Some(dir) = &plans_dir {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        }
        Ok(Arc::new(Self {
            model,
            data,
            plans_dir,
            busy: AtomicBool::new(false),
            status: Mutex::new(JobStatus::default()),
        }))
    }

    /// Claims the job slot, or fails with 409 when another job holds it.
    pub fn begin_job(self: &Arc<Self>, kind: &str) -> ApiResult<JobGuard> {
        if self.busy.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
            let active = self.status.lock().unwrap().active.clone().unwrap_or_default();
            return Err(ApiError::Conflict(format!("a '{active}' job is already running")));
        }
        self.status.lock().unwrap().active = Some(kind.to_string());
        Ok(JobGuard {
            state: Arc::clone(self),
            kind: kind.to_string(),
            started: Instant::now(),
            ok: false,
        })
    }

    pub fn status(&self) -> JobStatus {
        self.status.lock().unwrap().clone()
    }

    fn split(&self, name: Option<&str>, default: Split) -> ApiResult<Split> {
        name.map_or(Ok(default), |s| s.parse().map_err(|e: ifam_core::Error| ApiError::Unprocessable(e.to_string())))
    }

    fn sample(&self, split: Split, id: usize) -> ApiResult<&Sample> {
        self.data
            .split(split)
            .get(id)
            .ok_or_else(|| ApiError::NotFound(format!("no sample {id} in {split}")))
    }

    fn plan_path(&self, name: &str) -> ApiResult<PathBuf> {
        let dir = self
            .plans_dir
            .as_ref()
            .ok_or_else(|| ApiError::NotFound("the plan store is disabled".into()))?;
        let valid = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid {
            return Err(ApiError::Unprocessable(format!("invalid plan name '{name}'")));
        }
        Ok(dir.join(format!("{name}.json")))
    }

    fn stored_plan(&self, name: &str) -> ApiResult<InterventionPlan> {
        let path = self.plan_path(name)?;
        let text = std::fs::read_to_string(&path).map_err(|_| ApiError::NotFound(format!("no plan named '{name}'")))?;
        pipeline::parse_plan(&text).map_err(ApiError::Internal)
    }

    /// A plan given inline as JSON or by name, validated against the model.
    fn resolve_plan(&self, value: Option<&str>) -> ApiResult<InterventionPlan> {
        let plan = match value.map(str::trim) {
            None | Some("") => InterventionPlan::empty(),
            Some(v) if v.starts_with('{') => pipeline::parse_plan(v).map_err(|e| ApiError::Unprocessable(format!("plan: {e}")))?,
            Some(name) => self.stored_plan(name)?,
        };
        self.check_plan(&plan)?;
        Ok(plan)
    }

    fn check_plan(&self, plan: &InterventionPlan) -> ApiResult<()> {
        if self.model.selector().is_none() {
            if !plan.is_empty() {
                return Err(ApiError::Unprocessable("the dense baseline accepts only the empty plan".into()));
            }
            return Ok(());
        }
        plan.validate(self.model.n_parts())
            .map_err(|e| ApiError::Unprocessable(e.to_string()))
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/model", get(model_info))
        .route("/api/samples", get(samples))
        .route("/api/sample/:id/image", get(sample_image))
        .route("/api/sample/:id/parts", get(sample_parts))
        .route("/api/sample/:id/predict", get(sample_predict))
        .route("/api/plan/loo", post(plan_loo))
        .route("/api/plan/calibrate", post(plan_calibrate))
        .route("/api/evaluate", post(evaluate))
        .route("/api/status", get(status))
        .route("/api/plans", get(list_plans))
        .route("/api/plans/:name", get(get_plan).put(put_plan))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(state: Arc<AppState>, port: u16, static_dir: Option<PathBuf>) -> Result<(), CliError> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::io(format!("binding {addr}"), e))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state, static_dir))
        .await
        .map_err(|e| CliError::io("serving", e))
}

async fn model_info(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "config": s.model.config(),
        "n_parts": s.model.n_parts(),
        "class_names": class_names(s.data.spec.n_classes),
        "n_backgrounds": s.data.spec.n_backgrounds,
        "grid": s.model.model_config().grid(),
        "patch_size": s.model.model_config().patch_size,
        "palette": (0..=s.model.n_parts()).map(pngio::part_colour).collect::<Vec<_>>(),
    }))
}

#[derive(Deserialize)]
struct PageQuery {
    split: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
}

#[derive(Serialize)]
struct SampleMeta {
    id: usize,
    class: usize,
    background: usize,
    group: usize,
}

async fn samples(State(s): State<Arc<AppState>>, Query(q): Query<PageQuery>) -> ApiResult<Json<serde_json::Value>> {
    let split = s.split(q.split.as_deref(), Split::TestIid)?;
    let size = q.page_size.unwrap_or(48).clamp(1, MAX_PAGE_SIZE);
    let page = q.page.unwrap_or(0);
    let all = s.data.split(split);
    let items: Vec<SampleMeta> = all
        .iter()
        .skip(page.saturating_mul(size))
        .take(size)
        .map(|x| SampleMeta {
            id: x.id,
            class: x.label,
            background: x.background,
            group: x.group,
        })
        .collect();
    Ok(Json(json!({
        "split": split,
        "page": page,
        "page_size": size,
        "total": all.len(),
        "samples": items,
    })))
}

#[derive(Deserialize)]
struct SampleQuery {
    split: Option<String>,
    plan: Option<String>,
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn sample_image(State(s): State<Arc<AppState>>, Path(id): Path<usize>, Query(q): Query<SampleQuery>) -> ApiResult<Response> {
    let split = s.split(q.split.as_deref(), Split::TestIid)?;
    Ok(png(pngio::encode_rgb(&s.sample(split, id)?.image)))
}

async fn sample_parts(State(s): State<Arc<AppState>>, Path(id): Path<usize>, Query(q): Query<SampleQuery>) -> ApiResult<Response> {
    let split = s.split(q.split.as_deref(), Split::TestIid)?;
    let sample = s.sample(split, id)?;
    let plan = s.resolve_plan(q.plan.as_deref())?;
    let pred = s.model.predict(&sample.image, &plan)?;
    let parts = final_parts(&pred).ok_or_else(|| ApiError::Unprocessable("the dense baseline has no part maps".into()))?;
    let cfg = s.model.model_config();
    Ok(png(pngio::encode_part_map(&parts, cfg.grid(), cfg.patch_size)))
}

async fn sample_predict(
    State(s): State<Arc<AppState>>,
    Path(id): Path<usize>,
    Query(q): Query<SampleQuery>,
) -> ApiResult<Json<ifam_core::model::Prediction>> {
    let split = s.split(q.split.as_deref(), Split::TestIid)?;
    let sample = s.sample(split, id)?;
    let plan = s.resolve_plan(q.plan.as_deref())?;
    Ok(Json(s.model.predict(&sample.image, &plan)?))
}

/// Runs `work` on the blocking pool while holding the job slot.
async fn job<T: Send + 'static>(
    s: &Arc<AppState>,
    kind: &str,
    work: impl FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let guard = s.begin_job(kind)?;
    let state = Arc::clone(s);
    tokio::task::spawn_blocking(move || {
        let mut guard = guard;
        let out = work(&state);
        guard.ok = out.is_ok();
        out
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LooBody {
    split: Option<String>,
    #[serde(default)]
    metric: Metric,
    #[serde(default)]
    plan: Option<InterventionPlan>,
    #[serde(default)]
    repeated: bool,
}

async fn plan_loo(State(s): State<Arc<AppState>>, Json(b): Json<LooBody>) -> ApiResult<Json<ifam_core::interventions::LooReport>> {
    let split = s.split(b.split.as_deref(), Split::Val)?;
    let base = b.plan.unwrap_or_default();
    s.check_plan(&base)?;
    let report = job(&s, "loo", move |st| Ok(pipeline::loo(&st.model, &st.data, split, b.metric, &base, b.repeated)?)).await?;
    Ok(Json(report))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrateBody {
    q: f64,
    split: Option<String>,
}

async fn plan_calibrate(
    State(s): State<Arc<AppState>>,
    Json(b): Json<CalibrateBody>,
) -> ApiResult<Json<ifam_core::interventions::ThresholdTable>> {
    let split = s.split(b.split.as_deref(), Split::Train)?;
    let table = job(&s, "calibrate", move |st| Ok(pipeline::calibrate(&st.model, &st.data, split, b.q)?)).await?;
    Ok(Json(table))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateBody {
    split: Option<String>,
    #[serde(default)]
    plan: Option<InterventionPlan>,
}

async fn evaluate(State(s): State<Arc<AppState>>, Json(b): Json<EvaluateBody>) -> ApiResult<Json<ifam_core::databench::MetricsReport>> {
    let split = s.split(b.split.as_deref(), Split::TestIid)?;
    let plan = b.plan.unwrap_or_default();
    s.check_plan(&plan)?;
    let report = job(&s, "evaluate", move |st| Ok(pipeline::evaluate(&st.model, &st.data, split, &plan)?)).await?;
    Ok(Json(report))
}

async fn status(State(s): State<Arc<AppState>>) -> Json<JobStatus> {
    Json(s.status())
}

async fn list_plans(State(s): State<Arc<AppState>>) -> ApiResult<Json<Vec<String>>> {
    let Some(dir) = &s.plans_dir else {
        return Ok(Json(Vec::new()));
    };
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".json").map(str::to_string))
        .collect();
    names.sort();
    Ok(Json(names))
}

async fn get_plan(State(s): State<Arc<AppState>>, Path(name): Path<String>) -> ApiResult<Json<InterventionPlan>> {
    Ok(Json(s.stored_plan(&name)?))
}

async fn put_plan(
    State(s): State<Arc<AppState>>,
    Path(name): Path<String>,
    Json(plan): Json<InterventionPlan>,
) -> ApiResult<Json<InterventionPlan>> {
    s.check_plan(&plan)?;
    let path = s.plan_path(&name)?;
    let text = serde_json::to_string_pretty(&plan).expect("plan serializes");
    std::fs::write(&path, text).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(plan))
}
