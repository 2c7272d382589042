//! Axum router hosting live sessions.
//!
//! Each session sits behind its own mutex, so requests touching one session
//! run one at a time while distinct sessions proceed in parallel. Mutating
//! requests must carry the actor token issued at creation; reads need none.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use agency_core::geomemory::{MemoryQuery, SpatialFilter};
use agency_core::geometry::BBox;
use agency_core::graph::Budget;
use agency_core::propagation::{Decision, ReviewBatch};
use agency_core::seed;
use agency_core::session::ledger::write_log;
use agency_core::session::{Action, EndReason, Session, SessionSpec, SessionView, Step};
use agency_core::time::{TimeStamp, TimeWindow};
use agency_core::vector::LabelStatus;
use agency_core::Error;
use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokio::sync::oneshot;

use crate::error::ApiError;
use crate::layers::layer_payload;
use crate::{ACTOR_HEADER, SCHEMA_JSON};

type ApiResult<T> = Result<T, ApiError>;

struct Hosted {
    session: Session,
    actor: String,
}

/// Live sessions keyed by id, plus an optional static UI bundle.
#[derive(Default)]
pub struct AppState {
    sessions: Mutex<BTreeMap<String, Arc<Mutex<Hosted>>>>,
    next_id: AtomicU64,
    ui: Option<PathBuf>,
}

impl AppState {
    pub fn new(ui: Option<PathBuf>) -> Self {
        Self { ui, ..Default::default() }
    }

    fn hosted(&self, id: &str) -> ApiResult<Arc<Mutex<Hosted>>> {
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    fn read<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> ApiResult<T>) -> ApiResult<T> {
        let h = self.hosted(id)?;
        let mut h = h.lock().expect("session");
        f(&mut h.session)
    }

    fn write<T>(&self, id: &str, headers: &HeaderMap, f: impl FnOnce(&mut Session) -> ApiResult<T>) -> ApiResult<T> {
        let h = self.hosted(id)?;
        let mut h = h.lock().expect("session");
        let token = headers.get(ACTOR_HEADER).and_then(|v| v.to_str().ok());
        if token != Some(h.actor.as_str()) {
            return Err(ApiError::ActorConflict(id.to_string()));
        }
        f(&mut h.session)
    }
}

/// Session state as the actor sees it, plus the suggestion queue head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub id: String,
    #[serde(flatten)]
    pub view: SessionView,
    pub end_reason: Option<EndReason>,
    /// Id of the first pending suggestion, if any.
    pub suggestion_cursor: Option<String>,
}

fn handle(id: &str, s: &Session) -> SessionHandle {
    SessionHandle {
        id: id.to_string(),
        view: s.view(),
        end_reason: s.end_reason(),
        suggestion_cursor: s.labels().iter().find(|f| f.status == LabelStatus::Suggested).map(|f| f.id.clone()),
    }
}

fn parse_json(body: &Bytes) -> ApiResult<Value> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(Value::Object(Map::new()));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid JSON: {e}")))
}

fn decode<T: serde::de::DeserializeOwned>(v: Value) -> ApiResult<T> {
    serde_json::from_value(v).map_err(|e| ApiError::BadRequest(e.to_string()))
}

/// Splits the optional `dt` (simulated seconds, default 0) off a body object.
fn split_dt(body: &Bytes) -> ApiResult<(u64, Map<String, Value>)> {
    let Value::Object(mut m) = parse_json(body)? else {
        return Err(ApiError::BadRequest("body must be a JSON object".into()));
    };
    let dt = match m.remove("dt") {
        None => 0,
        Some(v) => v.as_u64().ok_or_else(|| ApiError::BadRequest("`dt` must be a non-negative integer".into()))?,
    };
    Ok((dt, m))
}

/// Builds the action named `op` from the remaining body fields.
fn action(op: &str, mut fields: Map<String, Value>) -> ApiResult<Action> {
    if fields.contains_key("op") {
        return Err(ApiError::BadRequest("unexpected field `op`".into()));
    }
    fields.insert("op".into(), Value::String(op.into()));
    decode(Value::Object(fields))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(t)| t).map_err(|e| ApiError::BadRequest(e.body_text()))
}

fn actor_token(n: u64) -> String {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or_default();
    format!("{:016x}", seed::mix(&[0xac70, n, nanos]))
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn schema() -> Response {
    ([(header::CONTENT_TYPE, "application/json")], SCHEMA_JSON).into_response()
}

async fn create(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let spec: SessionSpec = decode(parse_json(&body)?)?;
    let session = Session::new(spec)?;
    let n = st.next_id.fetch_add(1, Ordering::SeqCst) + 1;
    let id = format!("s{n:04}");
    let actor = actor_token(n);
    let h = handle(&id, &session);
    st.sessions
        .lock()
        .expect("session table")
        .insert(id.clone(), Arc::new(Mutex::new(Hosted { session, actor: actor.clone() })));
    Ok((StatusCode::CREATED, Json(json!({"id": id, "actor": actor, "state": h}))))
}

async fn state(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionHandle>> {
    st.read(&id, |s| Ok(Json(handle(&id, s))))
}

fn run(st: &AppState, id: &str, headers: &HeaderMap, step: Step) -> ApiResult<Json<Value>> {
    st.write(id, headers, |s| Ok(Json(serde_json::to_value(s.apply(&step)?).map_err(Error::from)?)))
}

async fn actions(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let step: Step = decode(parse_json(&body)?)?;
    run(&st, &id, &headers, step)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerQuery {
    band: Option<String>,
}

async fn layer(
    State(st): State<Arc<AppState>>,
    Path((id, name)): Path<(String, String)>,
    q: Result<Query<LayerQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    st.read(&id, |s| Ok(Json(layer_payload(s.workspace(), &name, q.band.as_deref())?)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SuggestionQuery {
    cursor: Option<String>,
    limit: Option<usize>,
}

const DEFAULT_PAGE: usize = 100;

async fn suggestions(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    q: Result<Query<SuggestionQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    let limit = q.limit.unwrap_or(DEFAULT_PAGE);
    if limit == 0 {
        return Err(ApiError::BadRequest("limit must be at least 1".into()));
    }
    st.read(&id, |s| {
        // ids sort in creation order; the cursor is the last id already seen
        let mut pending = s
            .labels()
            .iter()
            .filter(|f| f.status == LabelStatus::Suggested)
            .filter(|f| q.cursor.as_ref().is_none_or(|c| f.id.as_str() > c.as_str()));
        let items: Vec<_> = pending.by_ref().take(limit).cloned().collect();
        let next = if pending.next().is_some() { items.last().map(|f| f.id.clone()) } else { None };
        Ok(Json(json!({"items": items, "next_cursor": next})))
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionItem {
    id: String,
    decision: Decision,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecideBody {
    decisions: Vec<DecisionItem>,
}

async fn decide(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let (dt, fields) = split_dt(&body)?;
    let b: DecideBody = decode(Value::Object(fields))?;
    if b.decisions.is_empty() {
        return Err(ApiError::Core(Error::EmptyBatch));
    }
    let batch = ReviewBatch::Each { decisions: b.decisions.into_iter().map(|d| (d.id, d.decision)).collect() };
    run(&st, &id, &headers, Step::new(dt, Action::Review { batch }))
}

/// Endpoints whose body is the action's own fields plus `dt`.
fn simple(op: &'static str) -> impl Fn(State<Arc<AppState>>, Path<String>, HeaderMap, Bytes) -> std::future::Ready<ApiResult<Json<Value>>> + Clone + Send + Sync + 'static {
    move |State(st), Path(id), headers, body| {
        std::future::ready(split_dt(&body).and_then(|(dt, fields)| {
            let op = action(op, fields)?;
            run(&st, &id, &headers, Step::new(dt, op))
        }))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResumeQuery {
    budget: Option<u64>,
    dt: Option<u64>,
}

async fn resume(
    State(st): State<Arc<AppState>>,
    Path((id, hash)): Path<(String, String)>,
    headers: HeaderMap,
    q: Result<Query<ResumeQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    let budget = Budget { max_cost_units: q.budget, ..Budget::default() };
    run(&st, &id, &headers, Step::new(q.dt.unwrap_or(0), Action::ResumeGraph { hash, budget }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryParams {
    bbox: Option<String>,
    from: Option<i64>,
    to: Option<i64>,
    kw: Option<String>,
    limit: Option<usize>,
}

fn parse_bbox(s: &str) -> ApiResult<BBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| ApiError::BadRequest(format!("bbox `{s}` is not four numbers")))?;
    match v[..] {
        [a, b, c, d] => Ok(BBox::new(a, b, c, d)?),
        _ => Err(ApiError::BadRequest(format!("bbox `{s}` is not four numbers"))),
    }
}

impl MemoryParams {
    fn to_query(&self) -> ApiResult<MemoryQuery> {
        let temporal = match (self.from, self.to) {
            (None, None) => None,
            (from, to) => Some(TimeWindow::new(TimeStamp(from.unwrap_or(i64::MIN)), TimeStamp(to.unwrap_or(i64::MAX)))?),
        };
        Ok(MemoryQuery {
            spatial: self.bbox.as_deref().map(parse_bbox).transpose()?.map(SpatialFilter::BBox),
            temporal,
            keyword: self.kw.clone(),
            limit: self.limit,
        })
    }
}

/// Reads memory without advancing the clock; gated like the retrieve action.
async fn memory(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    q: Result<Query<MemoryParams>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let mq = query(q)?.to_query()?;
    st.read(&id, |s| {
        let probe = Action::MemoryRetrieve { query: mq.clone() };
        if s.spec().capability < probe.required_level() {
            return Err(Error::CapabilityDenied { op: probe.name().into(), level: s.spec().capability }.into());
        }
        Ok(Json(json!({"entries": s.memory().retrieve(&mq)?})))
    })
}

async fn curate(
    State(st): State<Arc<AppState>>,
    Path((id, entry)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let entry: u64 = entry.parse().map_err(|_| ApiError::BadRequest(format!("bad memory entry id `{entry}`")))?;
    let (dt, mut fields) = split_dt(&body)?;
    fields.insert("id".into(), json!(entry));
    run(&st, &id, &headers, Step::new(dt, action("memory_curate", fields)?))
}

/// Quality over time and nothing else: no labels, no per-item correctness.
async fn metrics_live(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    st.read(&id, |s| {
        let samples: Vec<Value> = s.samples().iter().map(|q| json!({"t": q.t, "q": q.q})).collect();
        let metric = s.samples().first().map(|q| json!(q.metric));
        Ok(Json(json!({
            "clock": s.clock(),
            "finished": s.is_finished(),
            "metric": metric,
            "samples": samples,
        })))
    })
}

async fn metrics(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    st.read(&id, |s| Ok(Json(serde_json::to_value(s.metrics()?).map_err(Error::from)?)))
}

async fn ledger(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    st.read(&id, |s| Ok(Json(serde_json::to_value(s.ledger()).map_err(Error::from)?)))
}

async fn log(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    st.read(&id, |s| {
        let mut buf = Vec::new();
        write_log(s.log(), &mut buf)?;
        Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], buf).into_response())
    })
}

async fn done(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let (dt, fields) = split_dt(&body)?;
    if let Some(k) = fields.keys().next() {
        return Err(ApiError::BadRequest(format!("unexpected field `{k}`")));
    }
    st.write(&id, &headers, |s| {
        let outcome = s.apply(&Step::new(dt, Action::Done))?;
        Ok(Json(json!({"outcome": outcome, "metrics": s.metrics()?})))
    })
}

fn content_type(p: &FsPath) -> &'static str {
    match p.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

/// Static UI bundle, when configured; JSON 404 otherwise.
async fn fallback(State(st): State<Arc<AppState>>, uri: Uri) -> Response {
    let not_found = || (StatusCode::NOT_FOUND, Json(json!({"message": format!("no route for {}", uri.path())}))).into_response();
    let Some(root) = &st.ui else { return not_found() };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = FsPath::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return not_found();
    }
    let path = root.join(rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => not_found(),
    }
}

pub fn router(app: Arc<AppState>) -> Router {
    let s = "/v1/sessions/{id}";
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/schema", get(schema))
        .route("/v1/sessions", post(create))
        .route(&format!("{s}/state"), get(state))
        .route(&format!("{s}/actions"), post(actions))
        .route(&format!("{s}/layers/{{*name}}"), get(layer))
        .route(&format!("{s}/suggestions"), get(suggestions))
        .route(&format!("{s}/suggestions/decide"), post(decide))
        .route(&format!("{s}/features"), post(simple("manual_label")))
        .route(&format!("{s}/propagate"), post(simple("propagate")))
        .route(&format!("{s}/graphs"), post(simple("run_graph")))
        .route(&format!("{s}/graphs/{{hash}}/run"), post(resume))
        .route(&format!("{s}/dual-loop/step"), post(simple("dual_loop_step")))
        .route(&format!("{s}/memory"), get(memory))
        .route(&format!("{s}/memory/{{entry}}/curate"), post(curate))
        .route(&format!("{s}/metrics/live"), get(metrics_live))
        .route(&format!("{s}/metrics"), get(metrics))
        .route(&format!("{s}/ledger"), get(ledger))
        .route(&format!("{s}/log"), get(log))
        .route(&format!("{s}/done"), post(done))
        .fallback(fallback)
        .with_state(app)
}

/// Serves until the process exits.
pub async fn serve(addr: SocketAddr, ui: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(Arc::new(AppState::new(ui)))).await
}

/// A server on a background thread with its own runtime.
pub struct Running {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl Running {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// Binds `addr` (port 0 picks a free one) and serves on a new thread.
pub fn spawn(addr: SocketAddr, ui: Option<PathBuf>) -> std::io::Result<Running> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let bound = std_listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name("agency-service".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener)?;
            axum::serve(listener, router(Arc::new(AppState::new(ui))))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    })?;
    Ok(Running { addr: bound, stop: Some(tx), thread: Some(thread) })
}
