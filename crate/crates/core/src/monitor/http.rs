//! Read-only REST view of the registry.
//!
//! `GET /healthz`, `GET /stats`, `GET /tasks?status=&offset=&limit=`,
//! `GET /tasks/{id}`.

use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use arc_swap::ArcSwap;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::registry::{Registry, RegistryStats, TaskRecord};
use crate::clock;
use crate::model::TaskId;

pub const DEFAULT_PAGE: usize = 100;
pub const MAX_PAGE: usize = 1000;

/// The registry as last published by the ingestion loop.
pub type RegistryView = Arc<ArcSwap<Registry>>;

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskPage {
    pub total: usize,
    pub offset: usize,
    pub tasks: Vec<TaskRecord>,
}

fn router(view: RegistryView) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/stats", get(stats))
        .route("/tasks", get(list))
        .route("/tasks/{id}", get(task))
        .with_state(view)
}

async fn stats(State(view): State<RegistryView>) -> Json<RegistryStats> {
    Json(view.load().stats(clock::now_ms()))
}

async fn list(State(view): State<RegistryView>, Query(q): Query<ListQuery>) -> Json<TaskPage> {
    let registry = view.load();
    let matching: Vec<&TaskRecord> = registry
        .tasks()
        .filter(|t| q.status.as_deref().is_none_or(|s| t.latest_status.as_str() == s))
        .collect();
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
    Json(TaskPage {
        total: matching.len(),
        offset,
        tasks: matching.into_iter().skip(offset).take(limit).cloned().collect(),
    })
}

async fn task(State(view): State<RegistryView>, Path(id): Path<String>) -> Response {
    let found = TaskId::new(id).ok().and_then(|id| view.load().get(&id).cloned());
    match found {
        Some(record) => Json(record).into_response(),
        None => (StatusCode::NOT_FOUND, Json(serde_json::json!({"error": "not found"}))).into_response(),
    }
}

/// A running HTTP server; stops when dropped.
pub struct HttpServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl HttpServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

/// Serves `view` on `addr` from a background thread.
pub fn serve(view: RegistryView, addr: SocketAddr) -> io::Result<HttpServer> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_io()
        .build()?;
    let (stop, stopped) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name("monitor-http".into()).spawn(move || {
        runtime.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("monitor http: {e}");
                    return;
                }
            };
            let shutdown = async {
                let _ = stopped.await;
            };
            if let Err(e) = axum::serve(listener, router(view)).with_graceful_shutdown(shutdown).await {
                log::error!("monitor http: {e}");
            }
        });
    })?;
    Ok(HttpServer {
        addr,
        stop: Some(stop),
        thread: Some(thread),
    })
}
