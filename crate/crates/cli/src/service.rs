//! HTTP and server-sent-event adapter over simulation sessions.
//!
//! ```text
//! GET  /personas                        persona documents
//! GET  /presets                         default intervention texts
//! GET  /analysis                        run analysis bundle (analysis/analysis.json)
//! GET  /validation                      cross-validation report and inter-persona matrix
//! POST /sessions                        create a session            -> 201 SessionInfo
//! GET  /sessions                        every SessionInfo
//! GET  /sessions/{id}                   SessionInfo
//! POST /sessions/{id}/step              run the next turn           -> StepResult
//! POST /sessions/{id}/interventions     {"text", "turn"?}           -> 201 Intervention
//! GET  /sessions/{id}/transcript        Transcript; ?format=jsonl gives the file format
//! GET  /sessions/{id}/analysis          analyses of the transcript so far
//! GET  /sessions/{id}/events?after=N    event stream, see below
//! ```
//!
//! The event stream sends one `message` event per transcript message, in
//! index order, with the message index as the event id and the message
//! record as data. Messages already produced are replayed first, starting
//! after `after` (or the `Last-Event-ID` header). Once the last turn has been
//! streamed a `complete` event carrying the message count ends the stream.
//!
//! Errors are `{"error": kind, "message": text}`. A step while another step
//! of the same session runs, a step after the last turn, and an intervention
//! for a turn that has started all answer 409; unknown sessions answer 404.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{watch, Mutex};

use persona_ecosystem::completion::CompletionProvider;
use persona_ecosystem::embedding::Embedder;
use persona_ecosystem::persona::Persona;
use persona_ecosystem::pipeline::{analyze_transcript, AnalysisSettings, Pipeline, PipelineError, Stage};
use persona_ecosystem::simulation::{
    default_interventions, Cursor, Intervention, Message, MessageSink, Session, SimulationConfig, SimulationError,
    TranscriptWriter,
};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("`serve` needs validated personas; run `persona-eco validate`")]
    NotValidated,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server stopped: {0}")]
    Server(std::io::Error),
}

#[derive(Debug, Clone, Copy, Default)]
struct Progress {
    messages: usize,
    complete: bool,
}

struct SessionSlot {
    session: Arc<Mutex<Session>>,
    log: Arc<RwLock<Vec<Message>>>,
    progress: Arc<watch::Sender<Progress>>,
}

/// Mirrors every persisted message into the in-memory log and wakes the
/// session's subscribers.
struct Broadcast {
    log: Arc<RwLock<Vec<Message>>>,
    progress: Arc<watch::Sender<Progress>>,
}

impl MessageSink for Broadcast {
    fn on_message(&mut self, message: &Message) -> std::io::Result<()> {
        let mut log = self.log.write();
        log.push(message.clone());
        let n = log.len();
        self.progress.send_modify(|p| p.messages = n);
        Ok(())
    }
}

pub struct ServiceState {
    personas: Vec<Persona>,
    defaults: SimulationConfig,
    analysis: AnalysisSettings,
    provider: Arc<dyn CompletionProvider>,
    embedder: Arc<dyn Embedder>,
    run_dir: Option<PathBuf>,
    sessions: RwLock<BTreeMap<String, Arc<SessionSlot>>>,
    counter: AtomicU64,
}

impl ServiceState {
    pub fn new(
        personas: Vec<Persona>,
        defaults: SimulationConfig,
        analysis: AnalysisSettings,
        provider: Arc<dyn CompletionProvider>,
        embedder: Arc<dyn Embedder>,
    ) -> Self {
        Self {
            personas,
            defaults,
            analysis,
            provider,
            embedder,
            run_dir: None,
            sessions: RwLock::new(BTreeMap::new()),
            counter: AtomicU64::new(0),
        }
    }

    /// Serves run-level reports from `dir` and persists session transcripts
    /// to `dir/sessions/<id>.jsonl`.
    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.run_dir = Some(dir.into());
        self
    }

    pub fn from_pipeline(pipeline: &mut Pipeline) -> Result<Self, ServeError> {
        if !pipeline.manifest().is_complete(Stage::Validate) {
            return Err(ServeError::NotValidated);
        }
        let personas = pipeline.personas()?;
        let defaults = pipeline.simulation_config(&personas);
        let analysis = pipeline.config().analysis.clone();
        let embedder = pipeline.embedder()?;
        let provider = pipeline.completion();
        Ok(Self::new(personas, defaults, analysis, provider, embedder).with_run_dir(pipeline.dir()))
    }

    fn slot(&self, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session `{id}`")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message.to_string())
    }
}

impl From<SimulationError> for ApiError {
    fn from(e: SimulationError) -> Self {
        let (status, kind) = match &e {
            SimulationError::Complete | SimulationError::TurnExecuted(_) => (StatusCode::CONFLICT, "conflict"),
            SimulationError::TurnOutOfRange { .. }
            | SimulationError::EmptyIntervention
            | SimulationError::InvalidConfig(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            SimulationError::Provider { .. } => (StatusCode::BAD_GATEWAY, "provider"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.kind, "message": self.message}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSession {
    pub topic: Option<String>,
    pub turns: Option<usize>,
    pub seed: Option<u64>,
    /// Replaces the run's configured interventions; `[]` starts with none.
    pub interventions: Option<Vec<Intervention>>,
    pub speaking_order: Option<Vec<String>>,
    pub allow_pass: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostIntervention {
    pub text: String,
    /// Defaults to the next turn that has not started.
    pub turn: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub cursor: Cursor,
    pub complete: bool,
    pub messages: usize,
    pub pending: Vec<Intervention>,
    pub config: SimulationConfig,
    pub personas: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepResult {
    pub messages: Vec<Message>,
    pub cursor: Cursor,
    pub complete: bool,
}

fn info(session: &Session) -> SessionInfo {
    SessionInfo {
        session_id: session.id().to_string(),
        cursor: session.cursor(),
        complete: session.is_complete(),
        messages: session.messages().len(),
        pending: session.pending(),
        config: session.config().clone(),
        personas: session.personas().iter().map(|p| p.name.clone()).collect(),
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/personas", get(personas))
        .route("/presets", get(presets))
        .route("/analysis", get(run_analysis))
        .route("/validation", get(run_validation))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/interventions", post(intervene))
        .route("/sessions/{id}/transcript", get(transcript))
        .route("/sessions/{id}/analysis", get(session_analysis))
        .route("/sessions/{id}/events", get(events))
        .with_state(state)
}

pub async fn serve(state: Arc<ServiceState>, addr: &str) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServeError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    let local = listener.local_addr().map_err(ServeError::Server)?;
    println!("listening on http://{local}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServeError::Server)
}

async fn personas(State(st): State<Arc<ServiceState>>) -> Json<Vec<Persona>> {
    Json(st.personas.clone())
}

async fn presets() -> Json<Vec<Intervention>> {
    Json(default_interventions())
}

fn read_run_file(st: &ServiceState, rel: &str, command: &str) -> ApiResult<Value> {
    let dir = st
        .run_dir
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", "service has no run directory"))?;
    let path = dir.join(rel);
    let bytes = std::fs::read(&path).map_err(|_| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("{rel} does not exist; run `persona-eco {command}`"),
        )
    })?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::internal(format!("{rel}: {e}")))
}

async fn run_analysis(State(st): State<Arc<ServiceState>>) -> ApiResult<Json<Value>> {
    read_run_file(&st, "analysis/analysis.json", "analyze").map(Json)
}

async fn run_validation(State(st): State<Arc<ServiceState>>) -> ApiResult<Json<Value>> {
    let report = read_run_file(&st, "validation/cross_validation.json", "validate")?;
    let matrix = read_run_file(&st, "validation/inter_persona.json", "validate")?;
    Ok(Json(json!({"cross_validation": report, "inter_persona": matrix})))
}

async fn create_session(
    State(st): State<Arc<ServiceState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<SessionInfo>)> {
    let req: CreateSession = parse_body(&body)?;
    let mut config = st.defaults.clone();
    if let Some(topic) = req.topic {
        config.topic = topic;
    }
    if let Some(turns) = req.turns {
        config.turns = turns;
    }
    if let Some(seed) = req.seed {
        config.seed = seed;
    }
    match req.interventions {
        Some(ivs) => config.interventions = ivs,
        // Configured interventions past a shortened session are dropped.
        None => config.interventions.retain(|iv| iv.turn <= config.turns),
    }
    if let Some(order) = req.speaking_order {
        config.speaking_order = order;
    }
    if let Some(allow) = req.allow_pass {
        config.allow_pass = allow;
    }
    let id = format!("s{}", st.counter.fetch_add(1, Ordering::Relaxed) + 1);
    let mut session = Session::new(id.clone(), st.personas.clone(), config, st.provider.clone())?;

    if let Some(dir) = &st.run_dir {
        let dir = dir.join("sessions");
        std::fs::create_dir_all(&dir).map_err(ApiError::internal)?;
        let writer = TranscriptWriter::create(dir.join(format!("{id}.jsonl")), &session.header())
            .map_err(ApiError::internal)?;
        session.add_sink(Box::new(writer));
    }
    let log = Arc::new(RwLock::new(Vec::new()));
    let progress = Arc::new(watch::Sender::new(Progress::default()));
    session.add_sink(Box::new(Broadcast {
        log: log.clone(),
        progress: progress.clone(),
    }));
    let summary = info(&session);
    st.sessions.write().insert(
        id,
        Arc::new(SessionSlot {
            session: Arc::new(Mutex::new(session)),
            log,
            progress,
        }),
    );
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn list_sessions(State(st): State<Arc<ServiceState>>) -> Json<Vec<SessionInfo>> {
    let slots: Vec<_> = st.sessions.read().values().cloned().collect();
    let mut out = Vec::with_capacity(slots.len());
    for slot in slots {
        out.push(info(&*slot.session.lock().await));
    }
    Json(out)
}

async fn session_info(State(st): State<Arc<ServiceState>>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let slot = st.slot(&id)?;
    let session = slot.session.lock().await;
    Ok(Json(info(&session)))
}

async fn step(State(st): State<Arc<ServiceState>>, Path(id): Path<String>) -> ApiResult<Json<StepResult>> {
    let slot = st.slot(&id)?;
    let guard = slot.session.clone().try_lock_owned().map_err(|_| {
        ApiError::new(StatusCode::CONFLICT, "busy", format!("session `{id}` is already stepping"))
    })?;
    let (guard, result) = tokio::task::spawn_blocking(move || {
        let mut session = guard;
        let result = session.step_turn();
        (session, result)
    })
    .await
    .map_err(ApiError::internal)?;
    let complete = guard.is_complete();
    slot.progress.send_modify(|p| p.complete = complete);
    let messages = result?;
    Ok(Json(StepResult {
        messages,
        cursor: guard.cursor(),
        complete,
    }))
}

async fn intervene(
    State(st): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Intervention>)> {
    let slot = st.slot(&id)?;
    let req: PostIntervention = parse_body(&body)?;
    let mut session = slot.session.lock().await;
    let iv = session.post_intervention(&req.text, req.turn)?;
    Ok((StatusCode::CREATED, Json(iv)))
}

#[derive(Debug, Default, Deserialize)]
struct TranscriptQuery {
    format: Option<String>,
}

async fn transcript(
    State(st): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    Query(q): Query<TranscriptQuery>,
) -> ApiResult<Response> {
    let slot = st.slot(&id)?;
    let t = slot.session.lock().await.transcript();
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(t).into_response()),
        Some("jsonl") => Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], t.to_jsonl()).into_response()),
        Some(other) => Err(ApiError::bad_request(format!("unknown format `{other}`; use json or jsonl"))),
    }
}

async fn session_analysis(State(st): State<Arc<ServiceState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = st.slot(&id)?;
    let t = slot.session.lock().await.transcript();
    let embedder = st.embedder.clone();
    let settings = st.analysis.clone();
    let bundle = tokio::task::spawn_blocking(move || analyze_transcript(&t, &t.personas, embedder.as_ref(), &settings, &id))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "analysis", e.to_string()))?;
    Ok(Json(serde_json::to_value(bundle).map_err(ApiError::internal)?))
}

#[derive(Debug, Default, Deserialize)]
struct EventsQuery {
    after: Option<usize>,
}

async fn events(
    State(st): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let slot = st.slot(&id)?;
    let last_seen = match q.after {
        Some(a) => Some(a),
        None => headers
            .get("last-event-id")
            .map(|v| {
                v.to_str()
                    .ok()
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| ApiError::bad_request("Last-Event-ID must be a message index"))
            })
            .transpose()?,
    };
    let next = last_seen.map_or(0, |a| a + 1);
    let rx = slot.progress.subscribe();
    let log = slot.log.clone();
    let stream = futures::stream::unfold((next, rx, log, false), |(next, mut rx, log, done)| async move {
        if done {
            return None;
        }
        loop {
            let pending = log.read().get(next).cloned();
            if let Some(m) = pending {
                let event = Event::default()
                    .event("message")
                    .id(m.index.to_string())
                    .json_data(&m)
                    .expect("messages serialize");
                return Some((Ok(event), (next + 1, rx, log, false)));
            }
            let progress = *rx.borrow_and_update();
            if progress.messages > next {
                continue;
            }
            if progress.complete {
                let event = Event::default().event("complete").data(progress.messages.to_string());
                return Some((Ok(event), (next, rx, log, true)));
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
