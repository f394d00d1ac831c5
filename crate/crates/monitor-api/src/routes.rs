//! Handlers and shared state.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use plantpulse_ingest::{format_ts, parse_ts, Order, QueryError, Store, StreamId, TelemetrySample};
use serde::Deserialize;
use serde_json::{json, Map, Value};
use tokio_util::sync::CancellationToken;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::auth::{hash_with_salt, verify_password, LoginLimiter, Role, Session, Sessions, UserAccount};
use crate::live::live_body;
use crate::server::{ApiConfig, HealthBoard};

pub const DEFAULT_LIMIT: usize = 1000;

#[derive(Debug)]
pub enum ApiError {
    Unauthorized,
    Forbidden,
    NotFound(String),
    BadRequest(String),
    TooManyRequests,
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            // Same body for unknown user, wrong password, missing and expired tokens.
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized".to_owned()),
            ApiError::Forbidden => (StatusCode::FORBIDDEN, "forbidden".to_owned()),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::TooManyRequests => (StatusCode::TOO_MANY_REQUESTS, "too many failed logins".to_owned()),
            ApiError::Internal(m) => {
                warn!("internal_error - {m}");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal error".to_owned())
            }
        };
        (status, Json(json!({ "error": msg }))).into_response()
    }
}

struct Inner {
    store: Arc<Store>,
    users: HashMap<String, UserAccount>,
    sessions: Sessions,
    limiter: LoginLimiter,
    config: ApiConfig,
    health: Arc<HealthBoard>,
    cancel: CancellationToken,
    /// Verified against when the user is unknown so both paths cost the same.
    decoy_hash: String,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(store: Arc<Store>, users: Vec<UserAccount>, config: ApiConfig, health: Arc<HealthBoard>) -> Self {
        let decoy_hash = hash_with_salt("", b"decoy", config.hash_iterations);
        AppState(Arc::new(Inner {
            store,
            users: users.into_iter().map(|u| (u.user.clone(), u)).collect(),
            sessions: Sessions::new(config.token_ttl),
            limiter: LoginLimiter::new(config.max_login_failures, config.login_window),
            config,
            health,
            cancel: CancellationToken::new(),
            decoy_hash,
        }))
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.0.store
    }

    pub fn config(&self) -> &ApiConfig {
        &self.0.config
    }

    pub fn cancel_token(&self) -> CancellationToken {
        self.0.cancel.clone()
    }
}

/// A request carrying a valid bearer token.
pub struct Auth(pub Session);

impl FromRequestParts<AppState> for Auth {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        authenticate(parts.headers.get(header::AUTHORIZATION), state).map(Auth)
    }
}

fn authenticate(value: Option<&HeaderValue>, state: &AppState) -> Result<Session, ApiError> {
    let token = value
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or(ApiError::Unauthorized)?;
    state.0.sessions.validate(token.trim()).ok_or(ApiError::Unauthorized)
}

fn stream_id(raw: &str) -> Result<StreamId, ApiError> {
    raw.parse().map_err(|_| ApiError::NotFound(format!("unknown stream {raw:?}")))
}

#[derive(Deserialize)]
struct LoginBody {
    user: String,
    password: String,
}

async fn login(State(state): State<AppState>, body: Result<Json<LoginBody>, JsonRejection>) -> Result<Json<Value>, ApiError> {
    let Json(body) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let inner = &state.0;
    if inner.limiter.is_blocked(&body.user) {
        warn!("login_throttled - user={}", body.user);
        return Err(ApiError::TooManyRequests);
    }
    let account = inner.users.get(&body.user);
    let stored = account.map_or(inner.decoy_hash.as_str(), |a| a.password_hash.as_str());
    let ok = verify_password(&body.password, stored) && account.is_some();
    match account.filter(|_| ok) {
        Some(a) => {
            inner.limiter.clear(&body.user);
            info!("login - user={} role={:?}", a.user, a.role);
            Ok(Json(json!({ "token": inner.sessions.issue(&a.user, a.role) })))
        }
        None => {
            inner.limiter.record_failure(&body.user);
            Err(ApiError::Unauthorized)
        }
    }
}

async fn list_streams(_auth: Auth, State(state): State<AppState>) -> Json<Value> {
    let streams: Vec<Value> = StreamId::ALL
        .iter()
        .map(|&id| {
            let fields: Vec<Value> = id.schema().iter().map(|f| json!({ "name": f.name, "unit": f.unit })).collect();
            json!({ "id": id.as_str(), "fields": fields, "count": state.0.store.count(id) })
        })
        .collect();
    Json(Value::Array(streams))
}

fn field_map(sample: &TelemetrySample) -> Map<String, Value> {
    sample.fields.iter().map(|(name, v)| (name.clone(), json!(v))).collect()
}

/// `{"time": "...", <field>: value, ...}`
pub fn render_latest(sample: &TelemetrySample) -> Value {
    let mut row = Map::new();
    row.insert("time".into(), Value::String(format_ts(sample.ingest_ts)));
    row.extend(field_map(sample));
    Value::Object(row)
}

pub fn render_row(sample: &TelemetrySample) -> Value {
    let mut row = Map::new();
    row.insert("seq".into(), json!(sample.seq));
    row.insert("time".into(), Value::String(format_ts(sample.ingest_ts)));
    row.extend(field_map(sample));
    Value::Object(row)
}

pub fn render_event(sample: &TelemetrySample) -> Value {
    json!({
        "stream": sample.stream.as_str(),
        "seq": sample.seq,
        "time": format_ts(sample.ingest_ts),
        "ts": sample.ingest_ts,
        "fields": Value::Object(field_map(sample)),
    })
}

async fn latest(_auth: Auth, State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let stream = stream_id(&id)?;
    match state.0.store.latest(stream).map_err(|e| ApiError::Internal(e.to_string()))? {
        Some(sample) => Ok(Json(render_latest(&sample)).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

#[derive(Deserialize)]
struct RangeParams {
    from: Option<String>,
    to: Option<String>,
    limit: Option<String>,
    order: Option<String>,
    cursor: Option<String>,
}

fn bad(e: impl std::fmt::Display) -> ApiError {
    ApiError::BadRequest(e.to_string())
}

async fn range(
    _auth: Auth,
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(p): Query<RangeParams>,
) -> Result<Json<Value>, ApiError> {
    let stream = stream_id(&id)?;
    let from = p.from.as_deref().map(parse_ts).transpose().map_err(bad)?.unwrap_or(i64::MIN);
    let to = p.to.as_deref().map(parse_ts).transpose().map_err(bad)?.unwrap_or(i64::MAX);
    let limit = p.limit.as_deref().map(str::parse::<usize>).transpose().map_err(bad)?.unwrap_or(DEFAULT_LIMIT);
    let order = p.order.as_deref().map(str::parse::<Order>).transpose().map_err(bad)?.unwrap_or_default();
    let cursor = p.cursor.as_deref().map(str::parse::<u64>).transpose().map_err(|_| bad("malformed cursor"))?;
    let page = state.0.store.query_range(stream, from, to, limit, order, cursor).map_err(|e| match e {
        QueryError::Read(m) => ApiError::Internal(m),
        other => bad(other),
    })?;
    Ok(Json(json!({
        "stream": stream.as_str(),
        "rows": page.samples.iter().map(render_row).collect::<Vec<_>>(),
        "next_cursor": page.next_cursor.map(|c| c.to_string()),
        "total": page.total,
    })))
}

#[derive(Deserialize)]
struct LiveParams {
    streams: Option<String>,
}

async fn live(Auth(session): Auth, State(state): State<AppState>, Query(p): Query<LiveParams>) -> Result<Response, ApiError> {
    let filter: Vec<StreamId> = match p.streams.as_deref().filter(|s| !s.is_empty()) {
        Some(list) => list.split(',').map(|s| stream_id(s.trim())).collect::<Result<_, _>>()?,
        None => StreamId::ALL.to_vec(),
    };
    let body = live_body(
        state.0.store.subscribe(),
        filter,
        state.0.config.heartbeat,
        session.expires_at,
        state.0.cancel.clone(),
    );
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson"), (header::CACHE_CONTROL, "no-cache")], body).into_response())
}

async fn list_users(Auth(session): Auth, State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    if session.role != Role::Admin {
        return Err(ApiError::Forbidden);
    }
    let mut users: Vec<&UserAccount> = state.0.users.values().collect();
    users.sort_by(|a, b| a.user.cmp(&b.user));
    Ok(Json(Value::Array(users.iter().map(|u| json!({ "user": u.user, "role": u.role })).collect())))
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    let store_failure = state.0.store.failure();
    let components = state.0.health.snapshot();
    let healthy = store_failure.is_none() && components.values().all(|c| c.ok);
    Json(json!({
        "status": if healthy { "ok" } else { "degraded" },
        "store": { "read_only": state.0.store.is_read_only(), "failure": store_failure },
        "components": components,
    }))
}

async fn fallback(State(state): State<AppState>, uri: Uri, parts: axum::http::HeaderMap) -> ApiError {
    if uri.path().starts_with("/api/") || uri.path() == "/api" {
        if let Err(e) = authenticate(parts.get(header::AUTHORIZATION), &state) {
            return e;
        }
    }
    ApiError::NotFound(format!("no route for {}", uri.path()))
}

pub fn router(state: AppState) -> Router {
    let origins: Vec<HeaderValue> =
        state.0.config.cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE]);
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/login", post(login))
        .route("/api/streams", get(list_streams))
        .route("/api/streams/{id}/latest", get(latest))
        .route("/api/streams/{id}/range", get(range))
        .route("/api/live", get(live))
        .route("/api/users", get(list_users))
        .fallback(fallback)
        .layer(cors)
        .with_state(state)
}
