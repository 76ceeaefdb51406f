//! HTTP inference service. A session holds one case and its multi-sensor
//! representation, computed once at creation; every decode reuses it.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use msl_core::lambda_opt::{self, LambdaOptConfig};
use msl_core::metrics::MetricRow;
use msl_core::model::{LambdaField, MslModel};
use msl_core::physics::ImageGrid;
use msl_core::{MslError, Result};
use msl_tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::workflow::{self, CaseInput, InputSet};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub idle_timeout: Duration,
    pub max_sessions: usize,
    /// Root for `case_id` lookups (`<root>/<id>`, `<root>/heldout/<id>`,
    /// `<root>/train/<id>`).
    pub data_dir: Option<PathBuf>,
    /// Upper bound on optimizer iterations per request.
    pub max_optimize_iters: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            idle_timeout: Duration::from_secs(15 * 60),
            max_sessions: 64,
            data_dir: None,
            max_optimize_iters: 1000,
        }
    }
}

struct Session {
    case: CaseInput,
    rep: Tensor<f32>,
    last_used: Mutex<Instant>,
}

#[derive(Default)]
struct Sessions {
    live: HashMap<String, Arc<Session>>,
    /// Ids of sessions that timed out or were evicted, answered with 409.
    expired: HashSet<String>,
    expired_order: VecDeque<String>,
    counter: u64,
}

const EXPIRED_MEMORY: usize = 4096;

impl Sessions {
    fn retire(&mut self, id: String) {
        self.live.remove(&id);
        if self.expired.insert(id.clone()) {
            self.expired_order.push_back(id);
        }
        while self.expired_order.len() > EXPIRED_MEMORY {
            if let Some(old) = self.expired_order.pop_front() {
                self.expired.remove(&old);
            }
        }
    }

    fn sweep(&mut self, now: Instant, timeout: Duration) {
        let stale: Vec<String> = self
            .live
            .iter()
            .filter(|(_, s)| now.duration_since(*s.last_used.lock().unwrap()) > timeout)
            .map(|(k, _)| k.clone())
            .collect();
        for id in stale {
            self.retire(id);
        }
    }
}

struct Inner {
    model: MslModel,
    checkpoint_hash: String,
    config: ServerConfig,
    sessions: Mutex<Sessions>,
}

/// Shared, read-only model plus the session table.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(model: MslModel, checkpoint_hash: String, config: ServerConfig) -> Self {
        Self(Arc::new(Inner {
            model,
            checkpoint_hash,
            config,
            sessions: Mutex::new(Sessions::default()),
        }))
    }

    pub fn from_checkpoint(path: &Path, config: ServerConfig) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let model = MslModel::from_entries(&msl_core::model::checkpoint::decode_mslc(&bytes)?)?;
        Ok(Self::new(model, workflow::sha256_hex(&bytes), config))
    }

    pub fn model(&self) -> &MslModel {
        &self.0.model
    }

    pub fn session_count(&self) -> usize {
        self.0.sessions.lock().unwrap().live.len()
    }

    fn insert(&self, session: Session) -> String {
        let mut s = self.0.sessions.lock().unwrap();
        let now = Instant::now();
        s.sweep(now, self.0.config.idle_timeout);
        while s.live.len() >= self.0.config.max_sessions.max(1) {
            let lru = s
                .live
                .iter()
                .min_by_key(|(_, v)| *v.last_used.lock().unwrap())
                .map(|(k, _)| k.clone())
                .expect("table is nonempty");
            s.retire(lru);
        }
        s.counter += 1;
        let nanos = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        let seed = format!("{}:{}:{}", s.counter, nanos, self.0.checkpoint_hash);
        let id = workflow::sha256_hex(seed.as_bytes())[..32].to_string();
        s.live.insert(id.clone(), Arc::new(session));
        id
    }

    fn lookup(&self, id: &str) -> std::result::Result<Arc<Session>, ApiError> {
        let mut s = self.0.sessions.lock().unwrap();
        let now = Instant::now();
        s.sweep(now, self.0.config.idle_timeout);
        if let Some(sess) = s.live.get(id) {
            *sess.last_used.lock().unwrap() = now;
            return Ok(sess.clone());
        }
        if s.expired.contains(id) {
            Err(ApiError::new(StatusCode::CONFLICT, format!("session {id} expired")))
        } else {
            Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/session", post(create_session))
        .route("/v1/decode", post(decode))
        .route("/v1/optimize", post(optimize))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<MslError> for ApiError {
    fn from(e: MslError) -> Self {
        let status = match e {
            MslError::MissingModality => StatusCode::UNPROCESSABLE_ENTITY,
            MslError::LambdaOutOfRange(_) | MslError::InvalidInput(_) | MslError::Config(_) => StatusCode::BAD_REQUEST,
            MslError::Format(_) | MslError::Tensor(_) | MslError::NotPowerOfTwo(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// JSON body parsing with every failure mapped to 400.
fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "checkpoint_hash": state.0.checkpoint_hash,
        "sessions": state.session_count(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionRequest {
    case_dir: Option<String>,
    case_id: Option<String>,
    #[serde(default)]
    inputs: InputSet,
}

fn resolve_case(state: &AppState, req: &SessionRequest) -> ApiResult<PathBuf> {
    match (&req.case_dir, &req.case_id) {
        (Some(dir), None) => {
            let p = PathBuf::from(dir);
            if p.is_dir() {
                Ok(p)
            } else {
                Err(ApiError::new(
                    StatusCode::NOT_FOUND,
                    format!("case directory {dir} not found"),
                ))
            }
        }
        (None, Some(id)) => {
            if id.is_empty() || id.contains(['/', '\\']) || id.contains("..") {
                return Err(ApiError::bad_request(format!("invalid case id `{id}`")));
            }
            let root = state
                .0
                .config
                .data_dir
                .as_ref()
                .ok_or_else(|| ApiError::bad_request("server has no data directory; send case_dir"))?;
            [
                root.join(id),
                root.join("heldout").join(id),
                root.join("train").join(id),
            ]
            .into_iter()
            .find(|p| p.is_dir())
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown case id `{id}`")))
        }
        _ => Err(ApiError::bad_request("give exactly one of case_dir and case_id")),
    }
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: SessionRequest = parse_body(&body)?;
    let dir = resolve_case(&state, &req)?;
    let st = state.clone();
    blocking(move || {
        let model = st.model();
        let case = CaseInput::load(&dir, req.inputs, model.config.image_size)?;
        let rep = model.representation(&case.inputs)?;
        let mut inputs = Vec::new();
        if case.inputs.ct.is_some() {
            inputs.push("ct");
        }
        if case.inputs.mri.is_some() {
            inputs.push("mri");
        }
        let has_gt = case.ground_truth().is_some();
        let id = st.insert(Session {
            case,
            rep,
            last_used: Mutex::new(Instant::now()),
        });
        Ok(Json(json!({
            "session_id": id,
            "image_size": model.config.image_size,
            "rep_size": model.rep_size(),
            "inputs": inputs,
            "has_ground_truth": has_gt,
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecodeRequest {
    session_id: String,
    lambda: Option<f64>,
    lambda_map: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ImageFormat {
    Png,
    Mgt,
}

fn image_format(q: &FormatQuery) -> ApiResult<ImageFormat> {
    match q.format.as_deref() {
        None | Some("png") => Ok(ImageFormat::Png),
        Some("mgt") => Ok(ImageFormat::Mgt),
        Some(other) => Err(ApiError::bad_request(format!("unknown format `{other}` (png or mgt)"))),
    }
}

/// Rows of a client map to an image grid; the model accepts it at image or
/// representation resolution.
fn grid_from_rows(rows: &[Vec<f64>]) -> ApiResult<ImageGrid> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(ApiError::bad_request(
            "lambda_map must be a nonempty rectangular 2-D array",
        ));
    }
    let mut values = Vec::with_capacity(h * w);
    for &v in rows.iter().flatten() {
        if !(0.0..=1.0).contains(&v) {
            return Err(ApiError::bad_request(format!("lambda_map entry {v} outside [0, 1]")));
        }
        values.push(v as f32);
    }
    Ok(ImageGrid::new(h, w, values)?)
}

fn rows_from_grid(g: &ImageGrid) -> Vec<Vec<f32>> {
    g.values.chunks(g.width).map(<[f32]>::to_vec).collect()
}

#[derive(Serialize)]
struct Metrics {
    mae_vs_ct: f64,
    ssim_vs_ct: f64,
    mi_vs_ct: f64,
    mae_vs_mri: f64,
    ssim_vs_mri: f64,
    mi_vs_mri: f64,
}

impl From<MetricRow> for Metrics {
    fn from(r: MetricRow) -> Self {
        Self {
            mae_vs_ct: r.mae_vs_ct,
            ssim_vs_ct: r.ssim_vs_ct,
            mi_vs_ct: r.mi_vs_ct,
            mae_vs_mri: r.mae_vs_mri,
            ssim_vs_mri: r.ssim_vs_mri,
            mi_vs_mri: r.mi_vs_mri,
        }
    }
}

async fn decode(State(state): State<AppState>, Query(q): Query<FormatQuery>, body: Bytes) -> ApiResult<Json<Value>> {
    let format = image_format(&q)?;
    let req: DecodeRequest = parse_body(&body)?;
    let lam = match (req.lambda, &req.lambda_map) {
        (Some(l), None) => {
            if !(0.0..=1.0).contains(&l) {
                return Err(ApiError::bad_request(format!("lambda {l} outside [0, 1]")));
            }
            LambdaField::Scalar(l)
        }
        (None, Some(rows)) => LambdaField::from_map(grid_from_rows(rows)?, state.model().rep_size())?,
        _ => return Err(ApiError::bad_request("give exactly one of lambda and lambda_map")),
    };
    let session = state.lookup(&req.session_id)?;
    let st = state.clone();
    blocking(move || {
        let out = workflow::render(st.model(), &session.rep, &lam)?;
        let label = match &lam {
            LambdaField::Scalar(l) => *l,
            LambdaField::Map(m) => workflow::map_mean(m),
        };
        let metrics = workflow::metrics_for(&session.case, label, &out.image)?.map(Metrics::from);
        let (bytes, name) = match format {
            ImageFormat::Png => (out.png, "png"),
            ImageFormat::Mgt => (workflow::image_mgt(&out.image), "mgt"),
        };
        Ok(Json(json!({
            "image": BASE64.encode(bytes),
            "format": name,
            "width": out.image.width,
            "height": out.image.height,
            "metrics": metrics,
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizeRequest {
    session_id: String,
    alpha: Option<f64>,
    iters: Option<usize>,
    step: Option<f64>,
}

async fn optimize(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: OptimizeRequest = parse_body(&body)?;
    let mut cfg = LambdaOptConfig::default();
    if let Some(a) = req.alpha {
        cfg.alpha = a;
    }
    if let Some(n) = req.iters {
        if n > state.0.config.max_optimize_iters {
            return Err(ApiError::bad_request(format!(
                "iters {n} exceeds the limit {}",
                state.0.config.max_optimize_iters
            )));
        }
        cfg.iterations = n;
    }
    if let Some(s) = req.step {
        cfg.step = s;
    }
    cfg.validate()?;
    let session = state.lookup(&req.session_id)?;
    let st = state.clone();
    blocking(move || {
        let res = lambda_opt::optimize_lambda_map(st.model(), &session.rep, &cfg)?;
        let png = msl_core::imageio::encode_png(&res.image)?;
        Ok(Json(json!({
            "lambda_map": rows_from_grid(&res.map),
            "image": BASE64.encode(png),
            "format": "png",
            "objective": res.objective,
            "objective_trace": res.trace,
            "best_iteration": res.best_iteration,
        })))
    })
    .await
}
