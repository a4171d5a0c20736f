use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Local, NaiveDateTime};
use serde::{Deserialize, Serialize};
use sitgen::{DeviceSnapshot, DeviceType, NetworkType, Situation, UserId};

use crate::session::{generate_session, infer_situations, ModelHashes, SessionTrack, SituationScore, Snapshot, DEFAULT_K, DEFAULT_N};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub k: usize,
    pub n: usize,
    /// `None` means `1/C`.
    pub floor: Option<f64>,
    pub max_n: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            k: DEFAULT_K,
            n: DEFAULT_N,
            floor: None,
            max_n: 1000,
        }
    }
}

/// Shared state: the current snapshot behind a lock that is only held to
/// clone or replace the `Arc`.
#[derive(Debug)]
pub struct AppState {
    snapshot: RwLock<Arc<Snapshot>>,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn new(snapshot: Snapshot, config: ServiceConfig) -> Self {
        AppState {
            snapshot: RwLock::new(Arc::new(snapshot)),
            config,
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Installs `next`; returns the snapshot it replaced.
    pub fn swap(&self, next: Snapshot) -> Arc<Snapshot> {
        let mut guard = self.snapshot.write().unwrap_or_else(|e| e.into_inner());
        std::mem::replace(&mut *guard, Arc::new(next))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_hashes: ModelHashes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationsResponse {
    pub situations: Vec<SituationScore>,
    pub cold_user: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub user: String,
    #[serde(default)]
    pub situation: Option<Situation>,
    pub device: DeviceType,
    pub network: NetworkType,
    #[serde(default)]
    pub ts: Option<String>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResponse {
    pub situations: Vec<SituationScore>,
    pub situation: Situation,
    pub tracks: Vec<SessionTrack>,
    /// Unknown demographics or no stored pairs for the user.
    pub cold_user: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserResponse {
    pub user: String,
    pub demographics: bool,
    pub embedding: bool,
    pub tagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl From<sitgen::Error> for ApiError {
    fn from(e: sitgen::Error) -> Self {
        match e {
            sitgen::Error::InvalidInput(m) => ApiError::bad_request(m),
            other => ApiError(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorResponse { error: self.1 })).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/situations", get(situations))
        .route("/v1/session", post(session))
        .route("/v1/users/{id}", get(user_flags))
        .with_state(state)
}

/// Accepts RFC 3339 (the local wall-clock part is kept) or a naive
/// `YYYY-MM-DDTHH:MM:SS[.f]`; absent means now.
pub fn parse_timestamp(ts: Option<&str>) -> Result<NaiveDateTime, ApiError> {
    let Some(ts) = ts else {
        return Ok(Local::now().naive_local());
    };
    if let Ok(t) = DateTime::parse_from_rfc3339(ts) {
        return Ok(t.naive_local());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(ts, f).ok())
        .ok_or_else(|| ApiError::bad_request(format!("unparseable timestamp {ts:?}")))
}

fn parse_user(id: &str) -> Result<UserId, ApiError> {
    UserId::new(id).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn check_k(k: usize, snap: &Snapshot) -> Result<usize, ApiError> {
    let c = snap.taxonomy().size();
    if k == 0 || k > c {
        return Err(ApiError::bad_request(format!("k must be within 1..={c}, got {k}")));
    }
    Ok(k)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        model_hashes: state.snapshot().hashes.clone(),
    })
}

#[derive(Debug, Deserialize)]
struct SituationsQuery {
    user: Option<String>,
    device: Option<String>,
    network: Option<String>,
    ts: Option<String>,
    k: Option<String>,
}

fn required<'a>(v: &'a Option<String>, name: &str) -> Result<&'a str, ApiError> {
    v.as_deref().ok_or_else(|| ApiError::bad_request(format!("missing query parameter {name:?}")))
}

async fn situations(
    State(state): State<Arc<AppState>>,
    Query(q): Query<SituationsQuery>,
) -> Result<Json<SituationsResponse>, ApiError> {
    let snap = state.snapshot();
    let user = parse_user(required(&q.user, "user")?)?;
    let device: DeviceType = required(&q.device, "device")?.parse()?;
    let network: NetworkType = required(&q.network, "network")?.parse()?;
    let k = match &q.k {
        Some(k) => k.parse().map_err(|_| ApiError::bad_request(format!("k must be a positive integer, got {k:?}")))?,
        None => state.config.k,
    };
    let k = check_k(k, &snap)?;
    let device = DeviceSnapshot::new(parse_timestamp(q.ts.as_deref())?, device, network);
    let r = infer_situations(&snap, &user, &device, k)?;
    Ok(Json(SituationsResponse {
        situations: r.situations,
        cold_user: r.cold_user,
    }))
}

async fn session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SessionRequest>, JsonRejection>,
) -> Result<Json<SessionResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let snap = state.snapshot();
    let user = parse_user(&req.user)?;
    let k = check_k(req.k.unwrap_or(state.config.k), &snap)?;
    let n = req.n.unwrap_or(state.config.n);
    if n > state.config.max_n {
        return Err(ApiError::bad_request(format!("n must be at most {}, got {n}", state.config.max_n)));
    }
    let device = DeviceSnapshot::new(parse_timestamp(req.ts.as_deref())?, req.device, req.network);
    let ranking = infer_situations(&snap, &user, &device, k)?;
    let situation = match req.situation {
        Some(s) => s,
        None => ranking.situations[0].tag,
    };
    let generated = generate_session(&snap.store, &user, situation, n, state.config.floor)?;
    Ok(Json(SessionResponse {
        situations: ranking.situations,
        situation,
        tracks: generated.tracks,
        cold_user: ranking.cold_user || generated.cold_user,
    }))
}

async fn user_flags(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<UserResponse>, ApiError> {
    let snap = state.snapshot();
    let user = parse_user(&id)?;
    Ok(Json(UserResponse {
        demographics: snap.demographics.contains_key(&user),
        embedding: snap.embedded.contains(&user),
        tagged: snap.store.contains_user(&user),
        user: id,
    }))
}

/// Serves `router(state)` on `listener` until `shutdown` resolves.
pub async fn serve<F>(listener: tokio::net::TcpListener, state: Arc<AppState>, shutdown: F) -> std::io::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
