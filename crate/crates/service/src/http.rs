use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Map, Value};
use sigmine_core::corpus::SyntheticVolume;
use sigmine_core::store::ShardedStore;
use sigmine_core::{Error, MihIndex, Signature, VoxelCoord};

use crate::config::ServiceConfig;
use crate::patch::{encode_png, render_slice};
use crate::query::{query_response, MatchEntry, QueryTarget, SiteResponse};
use crate::session::{read_log, replay, LabelEntry, Seed, Session, SessionEvent, SessionLog, SessionSettings};

/// Everything a query needs, loaded once.
#[derive(Debug)]
pub struct Dataset {
    pub store: ShardedStore,
    pub index: MihIndex,
    pub volume: Option<SyntheticVolume>,
}

impl Dataset {
    pub fn load(cfg: &ServiceConfig) -> sigmine_core::Result<Self> {
        let store = ShardedStore::load(&cfg.store)?;
        let index = MihIndex::load(&cfg.index, cfg.bucket_count)?;
        let volume = cfg.volume.as_deref().map(SyntheticVolume::load).transpose()?;
        Ok(Dataset { store, index, volume })
    }
}

#[derive(Debug)]
enum LoadState {
    Loading,
    Ready(Arc<Dataset>),
    Failed(String),
}

#[derive(Debug, Default)]
struct Sessions {
    next_id: u64,
    map: BTreeMap<u64, Arc<Mutex<Session>>>,
}

/// Shared server state: the read-only dataset plus the session table.
#[derive(Debug)]
pub struct AppState {
    pub config: ServiceConfig,
    dataset: RwLock<LoadState>,
    sessions: Mutex<Sessions>,
    log: Option<Mutex<SessionLog>>,
}

impl AppState {
    /// Starts without a dataset; sessions are restored from the log.
    pub fn new(config: ServiceConfig) -> sigmine_core::Result<Self> {
        config.validate()?;
        let mut sessions = Sessions::default();
        let log = match &config.session_log {
            Some(path) => {
                let restored = replay(&read_log(path)?)?;
                sessions.next_id = restored.keys().next_back().map_or(0, |id| id + 1);
                sessions.map = restored
                    .into_iter()
                    .map(|(id, s)| (id, Arc::new(Mutex::new(s))))
                    .collect();
                Some(Mutex::new(SessionLog::open(path)?))
            }
            None => None,
        };
        Ok(AppState {
            config,
            dataset: RwLock::new(LoadState::Loading),
            sessions: Mutex::new(sessions),
            log,
        })
    }

    pub fn with_dataset(config: ServiceConfig, dataset: Dataset) -> sigmine_core::Result<Self> {
        let state = Self::new(config)?;
        state.set_dataset(dataset);
        Ok(state)
    }

    pub fn set_dataset(&self, dataset: Dataset) {
        *self.dataset.write().unwrap_or_else(|e| e.into_inner()) = LoadState::Ready(Arc::new(dataset));
    }

    pub fn set_load_failure(&self, message: String) {
        *self.dataset.write().unwrap_or_else(|e| e.into_inner()) = LoadState::Failed(message);
    }

    pub fn dataset(&self) -> Result<Arc<Dataset>, ApiError> {
        match &*self.dataset.read().unwrap_or_else(|e| e.into_inner()) {
            LoadState::Ready(d) => Ok(d.clone()),
            LoadState::Loading => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "unavailable",
                "dataset is loading",
            )),
            LoadState::Failed(m) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "unavailable",
                format!("dataset failed to load: {m}"),
            )),
        }
    }

    /// A copy of a session's current state.
    pub fn session(&self, id: u64) -> Option<Session> {
        let handle = self
            .sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .map
            .get(&id)
            .cloned()?;
        let s = handle.lock().unwrap_or_else(|e| e.into_inner()).clone();
        Some(s)
    }

    fn session_handle(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let unknown = || ApiError::new(StatusCode::NOT_FOUND, "not-found", format!("unknown session {id}"));
        let id: u64 = id.parse().map_err(|_| unknown())?;
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .map
            .get(&id)
            .cloned()
            .ok_or_else(unknown)
    }

    fn log_event(&self, ev: &SessionEvent) -> Result<(), ApiError> {
        if let Some(log) = &self.log {
            log.lock().unwrap_or_else(|e| e.into_inner()).append(ev)?;
        }
        Ok(())
    }
}

/// An error response: status plus a JSON body naming the category and,
/// for validation failures, the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub category: &'static str,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, category: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            category,
            message: message.into(),
            field: None,
        }
    }

    pub fn field(field: &str, message: impl Into<String>) -> Self {
        ApiError {
            field: Some(field.to_string()),
            ..ApiError::new(StatusCode::BAD_REQUEST, "usage", message)
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::OutOfBounds { .. } | Error::Format(_) => StatusCode::BAD_REQUEST,
            Error::NoRecord(_) => StatusCode::NOT_FOUND,
            Error::Contract(_) | Error::Exhausted { .. } => StatusCode::CONFLICT,
            Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.category().as_str(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "category": self.category, "message": self.message });
        if let Some(f) = self.field {
            body["field"] = Value::String(f);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/signature", get(signature))
        .route("/v1/query", post(query))
        .route("/v1/session", post(create_session))
        .route("/v1/session/{id}", get(get_session))
        .route("/v1/session/{id}/label", post(label))
        .route("/v1/session/{id}/next", get(next))
        .route("/v1/patch", get(patch))
        .with_state(state)
}

fn param<T: FromStr>(q: &HashMap<String, String>, name: &str) -> ApiResult<Option<T>> {
    q.get(name)
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| ApiError::field(name, format!("{name} is malformed: {v:?}")))
        })
        .transpose()
}

fn required<T>(v: Option<T>, name: &str) -> ApiResult<T> {
    v.ok_or_else(|| ApiError::field(name, format!("{name} is required")))
}

fn point_param(q: &HashMap<String, String>) -> ApiResult<VoxelCoord> {
    let x = required(param(q, "x")?, "x")?;
    let y = required(param(q, "y")?, "y")?;
    let z = required(param(q, "z")?, "z")?;
    Ok(VoxelCoord::new(x, y, z))
}

fn body_object(body: &Bytes) -> ApiResult<Map<String, Value>> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::field("body", "request body must be a JSON object")),
        Err(e) => Err(ApiError::field("body", format!("request body is not valid JSON: {e}"))),
    }
}

fn get_u64(obj: &Map<String, Value>, name: &str) -> ApiResult<Option<u64>> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| ApiError::field(name, format!("{name} must be a non-negative integer"))),
    }
}

fn get_u32(obj: &Map<String, Value>, name: &str) -> ApiResult<Option<u32>> {
    get_u64(obj, name)?
        .map(|v| u32::try_from(v).map_err(|_| ApiError::field(name, format!("{name} is too large"))))
        .transpose()
}

fn get_f64(obj: &Map<String, Value>, name: &str) -> ApiResult<Option<f64>> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| ApiError::field(name, format!("{name} must be a number"))),
    }
}

fn get_bool(obj: &Map<String, Value>, name: &str) -> ApiResult<Option<bool>> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_bool()
            .map(Some)
            .ok_or_else(|| ApiError::field(name, format!("{name} must be true or false"))),
    }
}

fn get_point(obj: &Map<String, Value>) -> ApiResult<Option<VoxelCoord>> {
    let (x, y, z) = (get_u32(obj, "x")?, get_u32(obj, "y")?, get_u32(obj, "z")?);
    match (x, y, z) {
        (None, None, None) => Ok(None),
        (Some(x), Some(y), Some(z)) => Ok(Some(VoxelCoord::new(x, y, z))),
        _ => {
            let missing = [("x", x), ("y", y), ("z", z)]
                .into_iter()
                .find(|(_, v)| v.is_none())
                .map_or("x", |(n, _)| n);
            Err(ApiError::field(
                missing,
                format!("{missing} is required when a point is given"),
            ))
        }
    }
}

/// Exactly one of a point or `signature_hex`.
fn get_target(obj: &Map<String, Value>) -> ApiResult<QueryTarget> {
    let point = get_point(obj)?;
    let sig = match obj.get("signature_hex") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => {
            Some(Signature::from_str(s).map_err(|e| ApiError::field("signature_hex", format!("signature_hex: {e}")))?)
        }
        Some(_) => return Err(ApiError::field("signature_hex", "signature_hex must be a string")),
    };
    match (point, sig) {
        (Some(p), None) => Ok(QueryTarget::Point(p)),
        (None, Some(s)) => Ok(QueryTarget::Signature(s)),
        (Some(_), Some(_)) => Err(ApiError::field(
            "signature_hex",
            "give either x, y, z or signature_hex, not both",
        )),
        (None, None) => Err(ApiError::field("signature_hex", "give either x, y, z or signature_hex")),
    }
}

fn check_k(k: usize) -> ApiResult<usize> {
    if k == 0 {
        return Err(ApiError::field("k", "k must be at least 1"));
    }
    Ok(k)
}

fn check_t(t: f64) -> ApiResult<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(ApiError::field("t", "t must be a positive number"));
    }
    Ok(t)
}

async fn signature(
    State(state): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<SiteResponse>> {
    let p = point_param(&q)?;
    let data = state.dataset()?;
    Ok(Json(data.store.lookup_signature(p)?.into()))
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let obj = body_object(&body)?;
    let target = get_target(&obj)?;
    let k = check_k(get_u64(&obj, "k")?.map_or(state.config.k, |v| v as usize))?;
    let t = check_t(get_f64(&obj, "t")?.unwrap_or(state.config.t))?;
    let data = state.dataset()?;
    let resp = query_response(&data.store, &data.index, target, k, t)?;
    Ok(Json(resp).into_response())
}

#[derive(Debug, Serialize)]
struct MemberView {
    source: Option<VoxelCoord>,
    signature: Signature,
}

#[derive(Debug, Serialize)]
struct SessionView {
    id: u64,
    settings: SessionSettings,
    query_set: Vec<MemberView>,
    labels: Vec<LabelEntry>,
    labels_used: usize,
    true_labels: usize,
}

impl SessionView {
    fn of(s: &Session) -> Self {
        let query_set = s
            .queries()
            .members()
            .iter()
            .map(|m| MemberView {
                source: m.source,
                signature: match m.repr {
                    sigmine_core::eval::Representation::Signature(sig) => sig,
                    sigmine_core::eval::Representation::Embedding(_) => unreachable!("sessions hold signatures"),
                },
            })
            .collect();
        SessionView {
            id: s.id,
            settings: s.settings,
            query_set,
            labels: s.labels().to_vec(),
            labels_used: s.labels().len(),
            true_labels: s.true_labels(),
        }
    }
}

fn seed_for(data: &Dataset, target: QueryTarget) -> ApiResult<Seed> {
    Ok(match target {
        QueryTarget::Point(p) => {
            let hit = data.store.lookup_signature(p)?;
            Seed {
                source: Some(hit.record.coord),
                signature: hit.record.sig,
            }
        }
        QueryTarget::Signature(s) => Seed {
            source: None,
            signature: s,
        },
    })
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let obj = body_object(&body)?;
    let k = check_k(get_u64(&obj, "k")?.map_or(state.config.k, |v| v as usize))?;
    let t = check_t(get_f64(&obj, "t")?.unwrap_or(state.config.t))?;
    let rank_n = get_u64(&obj, "rank_n")?.map_or(state.config.rank_n, |v| v as usize);
    if rank_n == 0 || rank_n > k {
        return Err(ApiError::field("rank_n", format!("rank_n must be in 1..={k}")));
    }
    let targets = match obj.get("seeds") {
        None | Some(Value::Null) => vec![get_target(&obj)?],
        Some(Value::Array(items)) if !items.is_empty() => {
            if get_point(&obj)?.is_some() || obj.contains_key("signature_hex") {
                return Err(ApiError::field("seeds", "give seeds or a single target, not both"));
            }
            items
                .iter()
                .map(|v| match v {
                    Value::Object(m) => get_target(m),
                    _ => Err(ApiError::field("seeds", "each seed must be an object")),
                })
                .collect::<ApiResult<Vec<_>>>()?
        }
        Some(_) => return Err(ApiError::field("seeds", "seeds must be a non-empty array")),
    };
    let data = state.dataset()?;
    let seeds = targets
        .into_iter()
        .map(|t| seed_for(&data, t))
        .collect::<ApiResult<Vec<_>>>()?;
    let settings = SessionSettings { rank_n, t, k };

    let mut table = state.sessions.lock().unwrap_or_else(|e| e.into_inner());
    let id = table.next_id;
    let session = Session::new(id, settings, &seeds).map_err(|e| match e {
        Error::Contract(m) => ApiError::field("seeds", m),
        other => other.into(),
    })?;
    state.log_event(&SessionEvent::Create {
        session: id,
        settings,
        seeds,
    })?;
    let view = SessionView::of(&session);
    table.map.insert(id, Arc::new(Mutex::new(session)));
    table.next_id += 1;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let handle = state.session_handle(&id)?;
    let s = handle.lock().unwrap_or_else(|e| e.into_inner());
    Ok(Json(SessionView::of(&s)).into_response())
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

async fn label(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let handle = state.session_handle(&id)?;
    let obj = body_object(&body)?;
    let p = get_point(&obj)?.ok_or_else(|| ApiError::field("x", "x, y and z are required"))?;
    let verdict = get_bool(&obj, "label")?.ok_or_else(|| ApiError::field("label", "label is required"))?;
    let data = state.dataset()?;
    let hit = data.store.lookup_signature(p)?;

    let mut s = handle.lock().unwrap_or_else(|e| e.into_inner());
    let site = hit.record.coord;
    if s.is_labeled(site) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "conflict",
            format!("{site} is already labeled"),
        ));
    }
    let entry = LabelEntry {
        coord: site,
        label: verdict,
        timestamp: now_millis(),
    };
    state.log_event(&SessionEvent::Label {
        session: s.id,
        entry,
        signature: hit.record.sig,
    })?;
    s.apply_label(entry, hit.record.sig)
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "conflict", format!("{site} is already labeled")))?;
    Ok(Json(SessionView::of(&s)).into_response())
}

#[derive(Debug, Serialize)]
struct NextView {
    session: u64,
    rank_n: usize,
    prediction: Option<MatchEntry>,
    query_set_size: usize,
    labels_used: usize,
}

async fn next(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let handle = state.session_handle(&id)?;
    let rank_n: Option<usize> = match param(&q, "rank_n")? {
        Some(v) => Some(v),
        None => param(&q, "rankN")?,
    };
    let data = state.dataset()?;
    let mut s = handle.lock().unwrap_or_else(|e| e.into_inner());
    let rank_n = rank_n.unwrap_or(s.settings.rank_n);
    if rank_n == 0 || rank_n > s.settings.k {
        return Err(ApiError::field(
            "rank_n",
            format!("rank_n must be in 1..={}", s.settings.k),
        ));
    }
    let prediction = s
        .next(&data.index, rank_n)?
        .map(|p| MatchEntry::from_prediction(&p, None));
    Ok(Json(NextView {
        session: s.id,
        rank_n,
        prediction,
        query_set_size: s.queries().len(),
        labels_used: s.labels().len(),
    })
    .into_response())
}

async fn patch(State(state): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let p = point_param(&q)?;
    let size: u32 = param(&q, "size")?.unwrap_or(32);
    if size == 0 || size > state.config.max_patch_size {
        return Err(ApiError::field(
            "size",
            format!("size must be in 1..={}", state.config.max_patch_size),
        ));
    }
    let data = state.dataset()?;
    let volume = data
        .volume
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not-found", "no volume is configured"))?;
    let png = encode_png(&render_slice(volume, p, size), size, size)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
