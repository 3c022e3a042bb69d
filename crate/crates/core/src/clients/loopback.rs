//! Loopback HTTP server fronting any in-process client, for integration tests
//! of the HTTP adapter.
//!
//! Responses are cached by idempotency key, so a retried request is executed
//! at most once. The server can be told to lose the next few responses after
//! executing them, which is how retry-after-success is exercised.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use tokio::sync::oneshot;

use super::{ModelClient, RequestEnvelope, ResponseEnvelope, WireStatus, WIRE_VERSION};

struct Shared {
    backend: Arc<dyn ModelClient>,
    cache: Mutex<HashMap<String, ResponseEnvelope>>,
    requests: AtomicUsize,
    executions: AtomicUsize,
    lose_responses: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerStats {
    pub requests: usize,
    pub executions: usize,
}

pub struct LoopbackServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

async fn handle(
    State(shared): State<Arc<Shared>>,
    Path(endpoint): Path<String>,
    Json(envelope): Json<RequestEnvelope>,
) -> (StatusCode, Json<ResponseEnvelope>) {
    shared.requests.fetch_add(1, Ordering::SeqCst);
    let fatal = |msg: String| ResponseEnvelope {
        version: WIRE_VERSION,
        status: WireStatus::Fatal,
        body: None,
        error: Some(msg),
    };
    if envelope.version != WIRE_VERSION {
        let msg = format!("unsupported version {}", envelope.version);
        return (StatusCode::BAD_REQUEST, Json(fatal(msg)));
    }
    if envelope.request.kind().endpoint() != format!("/v1/{endpoint}") {
        return (StatusCode::NOT_FOUND, Json(fatal(format!("wrong endpoint /v1/{endpoint}"))));
    }
    let key = envelope.idempotency_key.clone();
    let cached = shared.cache.lock().expect("cache poisoned").get(&key).cloned();
    let response = match cached {
        Some(r) => r,
        None => {
            let backend = Arc::clone(&shared.backend);
            let request = envelope.request;
            let result = tokio::task::spawn_blocking(move || backend.call(&request))
                .await
                .expect("backend panicked");
            shared.executions.fetch_add(1, Ordering::SeqCst);
            let response = ResponseEnvelope::from_result(&result);
            if response.status != WireStatus::Retryable {
                shared.cache.lock().expect("cache poisoned").insert(key, response.clone());
            }
            response
        }
    };
    let lost = shared
        .lose_responses
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    if lost {
        let msg = "response lost".to_string();
        return (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(ResponseEnvelope { status: WireStatus::Retryable, ..fatal(msg) }),
        );
    }
    (StatusCode::OK, Json(response))
}

impl LoopbackServer {
    /// Binds 127.0.0.1 on an ephemeral port and serves on a background thread.
    pub fn start(backend: Arc<dyn ModelClient>) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            backend,
            cache: Mutex::new(HashMap::new()),
            requests: AtomicUsize::new(0),
            executions: AtomicUsize::new(0),
            lose_responses: AtomicUsize::new(0),
        });
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = Router::new()
            .route("/v1/{endpoint}", post(handle))
            .with_state(Arc::clone(&shared));
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("loopback server failed");
            });
        });
        Ok(LoopbackServer {
            addr,
            shared,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> ServerStats {
        ServerStats {
            requests: self.shared.requests.load(Ordering::SeqCst),
            executions: self.shared.executions.load(Ordering::SeqCst),
        }
    }

    /// The next `n` responses are computed and cached, then replaced by a 503.
    pub fn lose_next_responses(&self, n: usize) {
        self.shared.lose_responses.store(n, Ordering::SeqCst);
    }
}

impl Drop for LoopbackServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
