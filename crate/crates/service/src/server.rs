//! Axum front end: `GET /v1/ws` (persistent JSON text frames) and
//! `POST /v1/message` (one request, a JSON array of responses).
//!
//! Every session lives in its own task and consumes a single command
//! queue; automatic sessions also tick from a timer inside that task and
//! publish state messages on a broadcast channel.

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use tokio::sync::{broadcast, mpsc, oneshot};
use waypoint_core::grid::Environment;
use waypoint_core::subgoal::SubgoalAgent;

use crate::protocol::{CreateRequest, LayoutSpec, Request, Response, Status, PROTOCOL_VERSION};
use crate::session::Session;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Checkpoint names in `create` resolve under this directory.
    pub checkpoint_root: PathBuf,
    pub max_sessions: usize,
    /// Upper bound on `step.count`.
    pub max_steps_per_request: usize,
    /// Sessions with no command and no automatic step for this long are
    /// dropped.
    pub idle_timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            checkpoint_root: PathBuf::from("."),
            max_sessions: 256,
            max_steps_per_request: 10_000,
            idle_timeout: Duration::from_secs(30 * 60),
        }
    }
}

struct Command {
    request: Request,
    reply: oneshot::Sender<Vec<Response>>,
}

#[derive(Clone)]
struct Handle {
    commands: mpsc::Sender<Command>,
    updates: broadcast::Sender<Response>,
}

/// Shared registry of live sessions.
#[derive(Clone)]
pub struct Service {
    cfg: Arc<ServiceConfig>,
    sessions: Arc<Mutex<HashMap<u64, Handle>>>,
    next_id: Arc<AtomicU64>,
}

impl Service {
    pub fn new(cfg: ServiceConfig) -> Self {
        Service {
            cfg: Arc::new(cfg),
            sessions: Arc::new(Mutex::new(HashMap::new())),
            next_id: Arc::new(AtomicU64::new(1)),
        }
    }

    pub fn router(self) -> Router {
        Router::new()
            .route("/v1/ws", get(ws_upgrade))
            .route("/v1/message", post(http_message))
            .route("/healthz", get(|| async { "ok" }))
            .with_state(self)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    fn handle(&self, id: u64) -> Option<Handle> {
        self.sessions.lock().expect("session map poisoned").get(&id).cloned()
    }

    fn remove(&self, id: u64) {
        self.sessions.lock().expect("session map poisoned").remove(&id);
    }

    fn resolve_checkpoint(&self, name: &str) -> Result<PathBuf, String> {
        let rel = Path::new(name);
        if name.is_empty() || rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(format!("checkpoint {name:?} must be a relative path inside the checkpoint root"));
        }
        Ok(self.cfg.checkpoint_root.join(rel))
    }

    async fn create(&self, req: CreateRequest) -> Result<(u64, Handle, Response), String> {
        if self.session_count() >= self.cfg.max_sessions {
            return Err(format!("session limit of {} reached", self.cfg.max_sessions));
        }
        let path = self.resolve_checkpoint(&req.checkpoint)?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let built = tokio::task::spawn_blocking(move || -> Result<Session, String> {
            let env = match &req.layout {
                LayoutSpec::Named(name) if name == "simple" || name == "key-door" => {
                    Environment::resolve(name).map_err(|e| e.to_string())?
                }
                LayoutSpec::Named(other) => return Err(format!("unknown layout {other:?}")),
                LayoutSpec::Inline(v) => Environment::from_json(&v.to_string()).map_err(|e| e.to_string())?,
            };
            let agent = SubgoalAgent::load(&path, &env).map_err(|e| format!("checkpoint: {e}"))?;
            Session::new(id, &req, &env, Arc::new(agent)).map_err(|e| e.to_string())
        })
        .await
        .map_err(|e| format!("session setup failed: {e}"))??;
        let mut session = built;
        let first = Response::State(session.message());
        let (tx, rx) = mpsc::channel(64);
        let (updates, _) = broadcast::channel(256);
        let handle = Handle {
            commands: tx,
            updates: updates.clone(),
        };
        self.sessions
            .lock()
            .expect("session map poisoned")
            .insert(id, handle.clone());
        let service = self.clone();
        tokio::spawn(async move {
            run_session(session, rx, updates, service.cfg.max_steps_per_request, service.cfg.idle_timeout).await;
            service.remove(id);
        });
        Ok((id, handle, first))
    }

    /// Handles one request. `Create` also returns the new session's handle
    /// so a socket can subscribe to its updates.
    async fn dispatch(&self, request: Request) -> (Vec<Response>, Option<(u64, Handle)>) {
        let session = request.session();
        if request.version() != PROTOCOL_VERSION {
            let msg = format!("unsupported protocol version {}, expected {PROTOCOL_VERSION}", request.version());
            return (vec![Response::error(session, msg)], None);
        }
        match request {
            Request::Create(req) => match self.create(req).await {
                Ok((id, handle, first)) => (vec![first], Some((id, handle))),
                Err(e) => (vec![Response::error(None, e)], None),
            },
            other => {
                let id = other.session().expect("non-create requests name a session");
                let Some(handle) = self.handle(id) else {
                    return (vec![Response::error(Some(id), format!("no session {id}"))], None);
                };
                let (reply, rx) = oneshot::channel();
                if handle.commands.send(Command { request: other, reply }).await.is_err() {
                    self.remove(id);
                    return (vec![Response::error(Some(id), "session has stopped")], None);
                }
                match rx.await {
                    Ok(responses) => (responses, None),
                    Err(_) => (vec![Response::error(Some(id), "session has stopped")], None),
                }
            }
        }
    }
}

fn apply(session: &mut Session, request: Request, max_steps: usize) -> Vec<Response> {
    let id = session.id();
    let err = |e: &dyn std::fmt::Display| vec![Response::error(Some(id), e.to_string())];
    match request {
        Request::PlaceGoal { goal, .. } => match session.place_goal(goal) {
            Ok(queue) => vec![Response::PlaceGoal {
                v: PROTOCOL_VERSION,
                session: id,
                goal,
                queue,
            }],
            Err(e) => err(&e),
        },
        Request::ClearGoals { .. } => {
            session.clear_goals();
            vec![Response::ClearGoals {
                v: PROTOCOL_VERSION,
                session: id,
            }]
        }
        Request::Reset { .. } => match session.reset() {
            Ok(()) => vec![Response::State(session.message())],
            Err(e) => err(&e),
        },
        Request::State { .. } => vec![Response::State(session.message())],
        Request::Step { count, .. } => {
            if count == 0 || count > max_steps {
                return err(&format!("step count must lie in 1..={max_steps}"));
            }
            let mut out = Vec::new();
            for _ in 0..count {
                match session.tick() {
                    Ok(true) => out.push(Response::State(session.message())),
                    Ok(false) => {
                        out.push(Response::State(session.message()));
                        break;
                    }
                    Err(e) => {
                        out.extend(err(&e));
                        break;
                    }
                }
                if session.status() == Status::Done {
                    break;
                }
            }
            out
        }
        Request::Create(_) => err(&"create is not a session command"),
    }
}

async fn run_session(
    mut session: Session,
    mut commands: mpsc::Receiver<Command>,
    updates: broadcast::Sender<Response>,
    max_steps: usize,
    idle_timeout: Duration,
) {
    let rate = session.tick_rate();
    let idle = tokio::time::sleep(idle_timeout);
    tokio::pin!(idle);
    let mut timer = (rate > 0.0).then(|| {
        let mut t = tokio::time::interval(Duration::from_secs_f64(1.0 / rate));
        t.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        t
    });
    loop {
        let auto = timer.is_some() && session.status() == Status::Running;
        tokio::select! {
            cmd = commands.recv() => {
                let Some(cmd) = cmd else { break };
                let _ = cmd.reply.send(apply(&mut session, cmd.request, max_steps));
                idle.as_mut().reset(tokio::time::Instant::now() + idle_timeout);
            }
            _ = async { timer.as_mut().expect("auto sessions have a timer").tick().await }, if auto => {
                let msg = match session.tick() {
                    Ok(_) => Response::State(session.message()),
                    Err(e) => Response::error(Some(session.id()), e.to_string()),
                };
                let _ = updates.send(msg);
                idle.as_mut().reset(tokio::time::Instant::now() + idle_timeout);
            }
            _ = &mut idle => {
                log::info!("session {} idle for {:?}, closing", session.id(), idle_timeout);
                break;
            }
        }
    }
}

async fn http_message(State(service): State<Service>, body: String) -> impl IntoResponse {
    let responses = match serde_json::from_str::<Request>(&body) {
        Ok(req) => service.dispatch(req).await.0,
        Err(e) => vec![Response::error(None, format!("malformed request: {e}"))],
    };
    Json(responses)
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(service): State<Service>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| serve_socket(service, socket))
}

async fn serve_socket(service: Service, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::channel::<Response>(256);
    let writer = tokio::spawn(async move {
        while let Some(resp) = out_rx.recv().await {
            let text = match serde_json::to_string(&resp) {
                Ok(t) => t,
                Err(e) => {
                    log::error!("cannot encode response: {e}");
                    continue;
                }
            };
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });
    let mut owned = Vec::new();
    while let Some(Ok(frame)) = stream.next().await {
        let text = match frame {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        let (responses, created) = match serde_json::from_str::<Request>(&text) {
            Ok(req) => service.dispatch(req).await,
            Err(e) => (vec![Response::error(None, format!("malformed request: {e}"))], None),
        };
        for r in responses {
            if out_tx.send(r).await.is_err() {
                break;
            }
        }
        if let Some((id, handle)) = created {
            owned.push(id);
            let mut rx = handle.updates.subscribe();
            let tx = out_tx.clone();
            tokio::spawn(async move {
                loop {
                    match rx.recv().await {
                        Ok(msg) => {
                            if tx.send(msg).await.is_err() {
                                break;
                            }
                        }
                        Err(broadcast::error::RecvError::Lagged(n)) => {
                            log::warn!("session {id}: socket lagged, {n} updates dropped");
                        }
                        Err(broadcast::error::RecvError::Closed) => break,
                    }
                }
            });
        }
    }
    // Sessions created over a socket end with it.
    for id in owned {
        service.remove(id);
    }
    drop(out_tx);
    let _ = writer.await;
}

/// Binds and serves until the process is stopped.
pub async fn serve(addr: std::net::SocketAddr, cfg: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("control service listening on {}", listener.local_addr()?);
    axum::serve(listener, Service::new(cfg).router()).await
}
