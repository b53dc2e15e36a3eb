//! Interactive session server. A browser (or any client) plays the human agent while a robot
//! policy responds; frames are returned per request and streamed over a WebSocket.

pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hrc_core::bench::{build_policy, generate_random_htm, PolicyKind, Scenario};
use hrc_core::graph::GraphOptions;
use hrc_core::rl::TrainConfig;
use hrc_core::{chair, parse_htm, Htm, ScenarioConfig};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast;
use tower_http::services::ServeDir;

pub use session::{replay, Choice, Frame, Session, SessionError, Status, Transition};

const STREAM_CAPACITY: usize = 4096;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Training episodes for `rl` sessions.
    pub train_episodes: u64,
    pub max_graph_nodes: usize,
    /// Directory with the built UI bundle, served under `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { train_episodes: 20_000, max_graph_nodes: 2_000_000, static_dir: None }
    }
}

struct Live {
    session: tokio::sync::Mutex<Session>,
    tx: broadcast::Sender<Frame>,
}

#[derive(Clone)]
pub struct AppState {
    cfg: Arc<ServerConfig>,
    sessions: Arc<Mutex<HashMap<String, Arc<Live>>>>,
    counter: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(cfg: ServerConfig) -> Self {
        AppState { cfg: Arc::new(cfg), sessions: Default::default(), counter: Default::default() }
    }

    fn get(&self, id: &str) -> Option<Arc<Live>> {
        self.sessions.lock().unwrap().get(id).cloned()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    /// `"chair"`, `"random:<n>:<seed>"` or an inline task document.
    pub htm: Value,
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
    pub policy: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train_episodes: Option<u64>,
}

fn error(status: StatusCode, msg: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

/// Resolves an HTM reference.
pub fn resolve_htm(r: &Value) -> Result<Htm, String> {
    match r {
        Value::String(s) if s == "chair" => Ok(chair()),
        Value::String(s) => {
            let parts: Vec<&str> = s.split(':').collect();
            match parts.as_slice() {
                ["random", n, seed] => {
                    let n = n.parse().map_err(|_| format!("bad size in {s:?}"))?;
                    let seed = seed.parse().map_err(|_| format!("bad seed in {s:?}"))?;
                    generate_random_htm(n, seed).map_err(|e| e.to_string())
                }
                _ => Err(format!("unknown task reference {s:?}")),
            }
        }
        Value::Object(_) => parse_htm(&r.to_string()).map_err(|e| e.to_string()),
        _ => Err("htm must be a string reference or a task document".into()),
    }
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.cfg.static_dir.clone();
    let app = Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show).delete(remove))
        .route("/sessions/{id}/choice", post(choose))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

pub async fn serve(addr: SocketAddr, cfg: ServerConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("sandbox listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(cfg))).await
}

async fn create(State(state): State<AppState>, Json(req): Json<CreateRequest>) -> Response {
    let kind: PolicyKind = match req.policy.parse() {
        Ok(k) => k,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let htm = match resolve_htm(&req.htm) {
        Ok(h) => Arc::new(h),
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let mut cfg = req.scenario.unwrap_or_default();
    if let Err(e) = cfg.validate() {
        return error(StatusCode::BAD_REQUEST, e);
    }
    cfg.p_change = 0.0;
    let scenario = Scenario { name: "sandbox".into(), htm: htm.clone(), cfg: cfg.clone() };
    let graph = GraphOptions { max_nodes: state.cfg.max_graph_nodes, ..Default::default() };
    let train = TrainConfig {
        episodes: req.train_episodes.unwrap_or(state.cfg.train_episodes),
        seed: req.seed,
        ..Default::default()
    };
    // Planning and training are CPU bound.
    let built = tokio::task::spawn_blocking(move || build_policy(kind, &scenario, &graph, &train)).await;
    let policy = match built {
        Ok(Ok(p)) => p,
        Ok(Err(e)) => return error(StatusCode::BAD_REQUEST, e),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e),
    };
    let n = state.counter.fetch_add(1, Ordering::Relaxed);
    let id = format!("{}-{n}", uuid::Uuid::new_v4().simple());
    let session = Session::new(id.clone(), htm, cfg, policy, kind.name().into(), req.seed);
    let frame = session.frames()[0].clone();
    let status = session.status();
    let (tx, _) = broadcast::channel(STREAM_CAPACITY);
    let live = Arc::new(Live { session: tokio::sync::Mutex::new(session), tx });
    state.sessions.lock().unwrap().insert(id.clone(), live);
    log::info!("session {id} created with policy {}", kind.name());
    (StatusCode::CREATED, Json(json!({ "id": id, "status": status, "frame": frame }))).into_response()
}

async fn show(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let Some(live) = state.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no session {id}"));
    };
    let s = live.session.lock().await;
    Json(json!({
        "id": s.id,
        "policy": s.policy_name,
        "seed": s.seed,
        "status": s.status(),
        "frames": s.frames().len(),
        "frame": s.frames().last(),
        "log": s.log(),
    }))
    .into_response()
}

async fn remove(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match state.sessions.lock().unwrap().remove(&id) {
        Some(_) => StatusCode::NO_CONTENT.into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no session {id}")),
    }
}

async fn choose(State(state): State<AppState>, Path(id): Path<String>, Json(choice): Json<Choice>) -> Response {
    let Some(live) = state.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no session {id}"));
    };
    let mut s = live.session.lock().await;
    match s.submit(choice) {
        Ok(frames) => {
            for f in &frames {
                // No receivers is fine.
                let _ = live.tx.send(f.clone());
            }
            Json(json!({ "status": s.status(), "frames": frames })).into_response()
        }
        Err(SessionError::Infeasible { feasible, .. }) => {
            let msg = format!("{choice:?} is not feasible now");
            let body = json!({ "error": msg, "feasible": feasible, "status": s.status() });
            (StatusCode::CONFLICT, Json(body)).into_response()
        }
        Err(SessionError::Done) => error(StatusCode::CONFLICT, "session is finished"),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    #[serde(default)]
    from: u64,
}

async fn stream(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> Response {
    let Some(live) = state.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no session {id}"));
    };
    ws.on_upgrade(move |socket| pump(socket, live, q.from))
}

/// Sends the backlog from `from` and then live frames. Subscribing while holding the session
/// lock means no frame is missed or repeated between the two.
async fn pump(mut socket: WebSocket, live: Arc<Live>, from: u64) {
    let (backlog, mut rx) = {
        let s = live.session.lock().await;
        let start = (from as usize).min(s.frames().len());
        (s.frames()[start..].to_vec(), live.tx.subscribe())
    };
    // Deleting the session drops the sender, which ends this stream.
    drop(live);
    for f in backlog {
        if send(&mut socket, &f).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(f) => {
                    if send(&mut socket, &f).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    log::warn!("stream client lagged by {n} frames; closing");
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
                Err(broadcast::error::RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                _ => {}
            },
        }
    }
}

async fn send(socket: &mut WebSocket, f: &Frame) -> Result<(), axum::Error> {
    let text = serde_json::to_string(f).expect("frames serialize");
    socket.send(Message::Text(text.into())).await
}
