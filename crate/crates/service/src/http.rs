//! JSON HTTP API over a set of user memories.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use mnemo_core::orchestrator::{AnswerError, ChannelBreakdown, EncodeOutcome};
use mnemo_core::persona::{PersonaEntry, RetrievedEntry};
use mnemo_core::{Annotation, BudgetPolicy, ChannelSet, Engine, InteractionId, Role, UserMemory};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::snapshot::{self, SnapshotError};

type Shared = Arc<RwLock<UserMemory>>;

/// Every known user's memory, each behind its own lock. Writers to one user
/// are serialized; different users never contend.
pub struct UserStore {
    data_dir: Option<PathBuf>,
    users: RwLock<HashMap<String, Shared>>,
}

impl UserStore {
    pub fn in_memory() -> Self {
        UserStore { data_dir: None, users: RwLock::new(HashMap::new()) }
    }

    /// Opens `dir`, creating it if needed, and loads every `*.snap` in it.
    pub fn open(dir: PathBuf) -> Result<Self, SnapshotError> {
        let io = |source| SnapshotError::Io { path: dir.clone(), source };
        fs::create_dir_all(&dir).map_err(io)?;
        let mut users = HashMap::new();
        for entry in fs::read_dir(&dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("snap") {
                continue;
            }
            let mem = snapshot::load(&path)?;
            users.insert(mem.user_id().to_string(), Arc::new(RwLock::new(mem)));
        }
        tracing::info!(users = users.len(), dir = %dir.display(), "loaded snapshots");
        Ok(UserStore { data_dir: Some(dir), users: RwLock::new(users) })
    }

    pub fn get(&self, user_id: &str) -> Option<Shared> {
        self.users.read().unwrap_or_else(|p| p.into_inner()).get(user_id).cloned()
    }

    pub fn get_or_create(&self, user_id: &str) -> Result<Shared, ApiError> {
        if let Some(m) = self.get(user_id) {
            return Ok(m);
        }
        let fresh = UserMemory::new(user_id).map_err(ApiError::from)?;
        let mut users = self.users.write().unwrap_or_else(|p| p.into_inner());
        Ok(users.entry(user_id.to_string()).or_insert_with(|| Arc::new(RwLock::new(fresh))).clone())
    }

    pub fn user_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.users.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect();
        ids.sort();
        ids
    }

    fn persist(&self, mem: &UserMemory) -> Result<(), ApiError> {
        if let Some(dir) = &self.data_dir {
            snapshot::save(mem, &snapshot::user_path(dir, mem.user_id()))
                .map_err(|e| ApiError::Internal(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub store: Arc<UserStore>,
    pub token: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest { message: String, fields: Vec<FieldError> },
    Unauthorized,
    Provider { message: String, provider: String, retryable: bool, attempts: u32 },
    Internal(String),
}

impl ApiError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        let message = message.into();
        ApiError::BadRequest {
            message: format!("{field}: {message}"),
            fields: vec![FieldError { field: field.into(), message }],
        }
    }
}

impl From<mnemo_core::Error> for ApiError {
    fn from(e: mnemo_core::Error) -> Self {
        use mnemo_core::Error as E;
        match e {
            E::InvalidArgument(m) => ApiError::BadRequest { message: m, fields: Vec::new() },
            E::Provider { provider, message, retryable, attempts } => {
                ApiError::Provider { message, provider, retryable, attempts }
            }
            E::Parse(m) => ApiError::Provider {
                message: format!("unusable model output: {m}"),
                provider: "analyzer".into(),
                retryable: false,
                attempts: 1,
            },
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": m })),
            ApiError::BadRequest { message, fields } => {
                (StatusCode::BAD_REQUEST, json!({ "error": message, "fields": fields }))
            }
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, json!({ "error": "missing or wrong bearer token" })),
            ApiError::Provider { message, provider, retryable, attempts } => (
                StatusCode::BAD_GATEWAY,
                json!({ "error": message, "provider": provider, "retryable": retryable, "attempts": attempts }),
            ),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": m })),
        };
        (status, Json(body)).into_response()
    }
}

/// Parses a JSON body, naming the offending field on failure.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        let message = e.to_string();
        let field = message.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "body".into());
        ApiError::BadRequest { fields: vec![FieldError { field, message: message.clone() }], message }
    })
}

fn check_user_id(user_id: &str) -> Result<(), ApiError> {
    if snapshot::valid_user_id(user_id) {
        Ok(())
    } else {
        Err(ApiError::field("user_id", "use 1-128 characters from [A-Za-z0-9_.-], not starting with '.'"))
    }
}

fn lookup(state: &AppState, user_id: &str) -> Result<Shared, ApiError> {
    check_user_id(user_id)?;
    state.store.get(user_id).ok_or_else(|| ApiError::NotFound(format!("unknown user {user_id:?}")))
}

fn poisoned<T>(_: T) -> ApiError {
    ApiError::Internal("user state is unavailable after an earlier panic".into())
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    #[serde(default)]
    pub role: Option<Role>,
    pub text: String,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Serialize)]
pub struct IngestResponse {
    pub interaction_id: InteractionId,
    pub annotation: Option<Annotation>,
    pub ops: Vec<mnemo_core::orchestrator::AppliedOp>,
    pub compacted: bool,
    pub warnings: Vec<String>,
}

impl From<EncodeOutcome> for IngestResponse {
    fn from(o: EncodeOutcome) -> Self {
        IngestResponse {
            interaction_id: o.interaction.id,
            annotation: o.annotation,
            ops: o.ops,
            compacted: o.compaction.is_some(),
            warnings: o.warnings,
        }
    }
}

async fn ingest(
    State(state): State<AppState>,
    Path(user_id): Path<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<IngestResponse>), ApiError> {
    check_user_id(&user_id)?;
    let req: IngestRequest = parse_body(&body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::field("text", "must not be blank"));
    }
    blocking(move || {
        let shared = state.store.get_or_create(&user_id)?;
        let mut mem = shared.write().map_err(poisoned)?;
        let outcome = state.engine.encode_interaction(
            &mut mem,
            req.role.unwrap_or(Role::User),
            &req.text,
            req.timestamp.unwrap_or_else(Utc::now),
            req.session_id,
        )?;
        state.store.persist(&mem)?;
        Ok((StatusCode::CREATED, Json(outcome.into())))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum ChannelsField {
    List(Vec<String>),
    Csv(String),
}

impl ChannelsField {
    fn parse(&self) -> Result<ChannelSet, ApiError> {
        let joined = match self {
            ChannelsField::List(v) => v.join(","),
            ChannelsField::Csv(s) => s.clone(),
        };
        joined.parse().map_err(|e: mnemo_core::Error| ApiError::field("channels", e.to_string()))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub text: String,
    #[serde(default)]
    pub channels: Option<ChannelsField>,
    #[serde(default)]
    pub max_tokens: Option<usize>,
    /// Generate a response; otherwise only the context is returned.
    #[serde(default)]
    pub respond: bool,
    /// Chat mode: after answering, store the query and the reply.
    #[serde(default)]
    pub record: bool,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct QueryResponse {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub context: String,
    pub channels: ChannelSet,
    pub channel_breakdown: ChannelBreakdown,
    pub token_count: usize,
    pub max_tokens: Option<usize>,
    pub dropped_items: usize,
    pub working_topics: Vec<String>,
    pub working_ids: Vec<InteractionId>,
    pub episodic_clue: Option<String>,
    pub episodic_ids: Vec<InteractionId>,
    pub persona: Vec<RetrievedEntry>,
    /// Wall clock including model calls.
    pub latency_ms: f64,
    /// Retrieval and rendering only.
    pub retrieval_ms: f64,
    pub respond_ms: f64,
}

async fn query(
    State(state): State<AppState>,
    Path(user_id): Path<String>,
    body: Bytes,
) -> Result<Json<QueryResponse>, ApiError> {
    let shared = lookup(&state, &user_id)?;
    let req: QueryRequest = parse_body(&body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::field("text", "must not be blank"));
    }
    let channels = match &req.channels {
        Some(c) => c.parse()?,
        None => ChannelSet::all(),
    };
    let order = state.engine.config().channel_order;
    let budget = match req.max_tokens {
        Some(m) => BudgetPolicy::new(m, order).map_err(|e| ApiError::field("max_tokens", e.to_string()))?,
        None => state.engine.default_budget(),
    };
    if req.record && !req.respond {
        return Err(ApiError::field("record", "requires respond=true"));
    }
    blocking(move || {
        let start = Instant::now();
        let engine = &state.engine;
        let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
        let (response, bundle, retrieval, respond) = if req.record {
            let mut mem = shared.write().map_err(poisoned)?;
            let turn = engine
                .chat(&mut mem, &req.text, channels, &budget, Utc::now(), req.session_id.clone())
                .map_err(answer_error)?;
            state.store.persist(&mem)?;
            let t = turn.answer.timing;
            (Some(turn.answer.response), turn.answer.bundle, t.retrieval, t.respond)
        } else {
            let mem = shared.read().map_err(poisoned)?;
            if req.respond {
                let a = engine.answer(&mem, &req.text, channels, &budget).map_err(answer_error)?;
                (Some(a.response), a.bundle, a.timing.retrieval, a.timing.respond)
            } else {
                let t = Instant::now();
                let b = engine.retrieve(&mem, &req.text, channels, &budget)?;
                (None, b, t.elapsed(), Default::default())
            }
        };
        Ok(Json(QueryResponse {
            response,
            context: bundle.merged_context,
            channels: bundle.channels,
            channel_breakdown: bundle.channel_breakdown,
            token_count: bundle.token_count,
            max_tokens: bundle.max_tokens,
            dropped_items: bundle.dropped_items,
            working_topics: bundle.working_topics.into_iter().map(|s| s.key).collect(),
            working_ids: bundle.working_ids.into_iter().collect(),
            episodic_clue: bundle.episodic_clue,
            episodic_ids: bundle.episodic_ids.into_iter().collect(),
            persona: bundle.persona_entries,
            latency_ms: ms(start.elapsed()),
            retrieval_ms: ms(retrieval),
            respond_ms: ms(respond),
        }))
    })
    .await
}

fn answer_error(e: AnswerError) -> ApiError {
    e.error.into()
}

#[derive(Debug, Serialize)]
pub struct ProfileEntry {
    pub id: u64,
    pub text: String,
    pub sources: Vec<InteractionId>,
    pub updated_at: DateTime<Utc>,
}

impl From<&PersonaEntry> for ProfileEntry {
    fn from(e: &PersonaEntry) -> Self {
        ProfileEntry { id: e.id, text: e.text.clone(), sources: e.sources.clone(), updated_at: e.updated_at }
    }
}

#[derive(Debug, Serialize)]
pub struct Profile {
    pub user_id: String,
    pub attributes: Vec<ProfileEntry>,
    pub facts: Vec<ProfileEntry>,
    pub pending_attributes: u64,
}

pub fn profile_of(mem: &UserMemory) -> Profile {
    Profile {
        user_id: mem.user_id().to_string(),
        attributes: mem.persona().attributes().iter().map(ProfileEntry::from).collect(),
        facts: mem.persona().facts().iter().map(ProfileEntry::from).collect(),
        pending_attributes: mem.attributes_since_compaction(),
    }
}

async fn profile(State(state): State<AppState>, Path(user_id): Path<String>) -> Result<Json<Profile>, ApiError> {
    let shared = lookup(&state, &user_id)?;
    let mem = shared.read().map_err(poisoned)?;
    Ok(Json(profile_of(&mem)))
}

async fn compact(State(state): State<AppState>, Path(user_id): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let shared = lookup(&state, &user_id)?;
    blocking(move || {
        let mut mem = shared.write().map_err(poisoned)?;
        let report = state.engine.compact(&mut mem, Utc::now())?;
        state.store.persist(&mem)?;
        Ok(Json(json!({
            "components_merged": report.components_merged,
            "components": report.components,
            "attributes_before": report.attributes_before,
            "attributes_after": report.attributes_after,
            "partial": report.partial,
        })))
    })
    .await
}

#[derive(Debug, Serialize, PartialEq, Eq)]
pub struct Stats {
    pub interactions: usize,
    pub topics: usize,
    pub clue_words: usize,
    pub facts: usize,
    pub attributes: usize,
    pub snapshot_bytes: usize,
}

pub fn stats_of(mem: &UserMemory) -> Stats {
    Stats {
        interactions: mem.interactions().len(),
        topics: mem.topic_index().len(),
        clue_words: mem.clue_index().len(),
        facts: mem.persona().facts().len(),
        attributes: mem.persona().attributes().len(),
        snapshot_bytes: snapshot::encode(mem).len(),
    }
}

async fn stats(State(state): State<AppState>, Path(user_id): Path<String>) -> Result<Json<Stats>, ApiError> {
    let shared = lookup(&state, &user_id)?;
    blocking(move || {
        let mem = shared.read().map_err(poisoned)?;
        Ok(Json(stats_of(&mem)))
    })
    .await
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn auth(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/users/{id}/interactions", post(ingest))
        .route("/v1/users/{id}/query", post(query))
        .route("/v1/users/{id}/profile", get(profile))
        .route("/v1/users/{id}/compact", post(compact))
        .route("/v1/users/{id}/stats", get(stats))
        .route_layer(middleware::from_fn_with_state(state.clone(), auth))
        .route("/healthz", get(health))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
