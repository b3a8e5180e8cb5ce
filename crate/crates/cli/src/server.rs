//! JSON-over-HTTP session service.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use convqa_core::data::ReformulationProvider;
use convqa_core::{AnswerSource, ConversationState, KnowledgeGraph, ModelBundle, TurnLog};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub topic_entity_key: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ask {
    pub question: String,
    /// Overrides the configured number of returned candidates.
    #[serde(default)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Candidate {
    pub entity: String,
    pub score: f64,
    pub source: AnswerSource,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Step {
    pub hop: usize,
    pub relation: String,
    pub entity: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AskResponse {
    pub turn: usize,
    pub question: String,
    pub answer: Option<String>,
    pub top_k: Vec<Candidate>,
    pub topic_used: String,
    pub trace: Vec<Step>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionView {
    pub session_id: String,
    pub topic_entity: String,
    pub created_at: u64,
    pub turns: Vec<AskResponse>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suggestions: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                field: None,
                suggestions: Vec::new(),
            },
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session `{id}`"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

/// Parses a JSON body, reporting the offending field path on failure.
fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let mut err = ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.inner().to_string());
        err.body.field = Some(path);
        err
    })
}

struct Session {
    topic_key: String,
    created_at: u64,
    last_used: Instant,
    state: ConversationState,
}

type SessionSlot = Arc<Mutex<Session>>;

/// Shared read-only model plus the session table.
#[derive(Clone)]
pub struct AppState {
    bundle: Arc<ModelBundle>,
    provider: Arc<ReformulationProvider>,
    sessions: Arc<Mutex<HashMap<String, SessionSlot>>>,
    ttl: Duration,
    top_k: usize,
}

impl AppState {
    pub fn new(bundle: ModelBundle, provider: ReformulationProvider, ttl: Duration, top_k: usize) -> Self {
        AppState {
            bundle: Arc::new(bundle),
            provider: Arc::new(provider),
            sessions: Arc::new(Mutex::new(HashMap::new())),
            ttl,
            top_k,
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table").len()
    }

    /// Drops sessions idle for longer than the TTL.
    pub fn purge_expired(&self) {
        let now = Instant::now();
        let ttl = self.ttl;
        self.sessions.lock().expect("session table").retain(|_, s| match s.try_lock() {
            Ok(s) => now.duration_since(s.last_used) <= ttl,
            Err(_) => true,
        });
    }

    fn slot(&self, id: &str) -> Result<SessionSlot, ApiError> {
        self.purge_expired();
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(serde_json::json!({ "status": "ok" })) }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/ask", post(ask))
        .with_state(state)
}

fn key(kg: &KnowledgeGraph, e: convqa_core::EntityId) -> String {
    kg.entity(e).map(|x| x.external_key.clone()).unwrap_or_else(|_| e.to_string())
}

/// Wire form of one answered turn.
pub fn turn_view(kg: &KnowledgeGraph, log: &TurnLog, top_k: usize) -> AskResponse {
    let best = log.answers.top();
    AskResponse {
        turn: log.turn,
        question: log.question.clone(),
        answer: best.map(|a| key(kg, a.entity)),
        top_k: log
            .answers
            .entries
            .iter()
            .take(top_k)
            .map(|a| Candidate {
                entity: key(kg, a.entity),
                score: a.score,
                source: a.source,
            })
            .collect(),
        topic_used: key(kg, log.topic_used),
        trace: best
            .map(|a| {
                a.trace
                    .iter()
                    .map(|s| Step {
                        hop: s.hop,
                        relation: kg.relation(s.relation).map(|r| r.label.clone()).unwrap_or_default(),
                        entity: key(kg, s.entity),
                    })
                    .collect()
            })
            .unwrap_or_default(),
    }
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let kg = &app.bundle.kg;
    let Some(topic) = kg.entity_by_key(&req.topic_entity_key) else {
        let mut err = ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "unknown_entity",
            format!("no entity with key `{}`", req.topic_entity_key),
        );
        err.body.field = Some("topic_entity_key".into());
        err.body.suggestions = kg.nearest_keys(&req.topic_entity_key, 5);
        return Err(err);
    };
    app.purge_expired();
    let id = Uuid::new_v4().to_string();
    let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let session = Session {
        topic_key: req.topic_entity_key,
        created_at,
        last_used: Instant::now(),
        state: ConversationState::new(topic),
    };
    app.sessions
        .lock()
        .expect("session table")
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "session_id": id }))).into_response())
}

async fn ask(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<AskResponse>, ApiError> {
    let req: Ask = parse_body(&body)?;
    if req.question.trim().is_empty() {
        let mut err = ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "question must not be empty");
        err.body.field = Some("question".into());
        return Err(err);
    }
    let slot = app.slot(&id)?;
    let top_k = req.top_k.unwrap_or(app.top_k);
    tokio::task::spawn_blocking(move || {
        let mut session = slot.lock().expect("session lock");
        session.last_used = Instant::now();
        let engine = app.bundle.engine(Some(&app.provider)).map_err(ApiError::internal)?;
        let log = engine.ask(&mut session.state, &req.question, &[]).map_err(ApiError::internal)?;
        Ok(Json(turn_view(&app.bundle.kg, log, top_k)))
    })
    .await
    .map_err(ApiError::internal)?
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let slot = app.slot(&id)?;
    let session = slot.lock().expect("session lock");
    let kg = &app.bundle.kg;
    Ok(Json(SessionView {
        session_id: id,
        topic_entity: session.topic_key.clone(),
        created_at: session.created_at,
        turns: session.state.log.iter().map(|l| turn_view(kg, l, app.top_k)).collect(),
    }))
}

async fn delete_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match app.sessions.lock().expect("session table").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}

/// Binds and serves until Ctrl-C.
pub async fn serve(state: AppState, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            sweeper.purge_expired();
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
