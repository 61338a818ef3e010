//! A mock e-commerce HTTP server with controllable latency, capacity and
//! error injection.
//!
//! Endpoints: `GET /browse`, `GET /search?q=`, `POST /shop` (body required).
//! Every accepted request queues FIFO for one of `service_slots`, sleeps the
//! endpoint latency, then answers. `GET /_log` dumps the request log as JSON
//! and `GET /_reset` clears it; neither is logged or slot-gated.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::header::{CONTENT_TYPE, COOKIE, SET_COOKIE};
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Method, Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::{TcpSocket, TcpStream};
use tokio::sync::Semaphore;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error("cannot bind testbed on port {port}: {source}")]
    Bind {
        port: u16,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid testbed config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedConfig {
    pub port: u16,
    /// Latency applied to every endpoint without an override.
    pub latency_ms: u64,
    /// Per-path overrides, e.g. `{"/shop": 120}`.
    #[serde(default)]
    pub endpoint_latency_ms: BTreeMap<String, u64>,
    pub service_slots: usize,
    #[serde(default)]
    pub error_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        TestbedConfig {
            port: 0,
            latency_ms: 50,
            endpoint_latency_ms: BTreeMap::new(),
            service_slots: 10,
            error_rate: 0.0,
            seed: 0,
        }
    }
}

impl TestbedConfig {
    pub fn validate(&self) -> Result<(), TestbedError> {
        if self.service_slots == 0 {
            return Err(TestbedError::Config("service_slots must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.error_rate) {
            return Err(TestbedError::Config("error_rate must be in [0, 1]".into()));
        }
        Ok(())
    }

    fn latency_for(&self, path: &str) -> Duration {
        Duration::from_millis(*self.endpoint_latency_ms.get(path).unwrap_or(&self.latency_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub method: String,
    /// Path including any query string.
    pub path: String,
    /// Arrival time (request head read), unix microseconds.
    pub wall_us: u64,
    pub queue_wait_ms: f64,
    pub status: u16,
    pub cookie: Option<String>,
}

#[derive(Debug)]
struct State {
    config: TestbedConfig,
    slots: Semaphore,
    rng: Mutex<ChaCha8Rng>,
    log: Mutex<Vec<LogEntry>>,
    seq: AtomicU64,
    in_service: AtomicU64,
    peak_in_service: AtomicU64,
}

pub struct Testbed {
    addr: SocketAddr,
    state: Arc<State>,
    stop: CancellationToken,
    task: JoinHandle<()>,
}

fn unix_us() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

impl Testbed {
    /// Binds 127.0.0.1 (or all interfaces with `serve_on`) and starts serving.
    pub async fn start(config: TestbedConfig) -> Result<Self, TestbedError> {
        Self::serve_on(([127, 0, 0, 1], config.port).into(), config).await
    }

    pub async fn serve_on(addr: SocketAddr, config: TestbedConfig) -> Result<Self, TestbedError> {
        config.validate()?;
        let port = config.port;
        let bind_err = |source| TestbedError::Bind { port, source };
        let socket = if addr.is_ipv4() { TcpSocket::new_v4() } else { TcpSocket::new_v6() }.map_err(bind_err)?;
        socket.set_reuseaddr(true).map_err(bind_err)?;
        socket.bind(addr).map_err(bind_err)?;
        let listener = socket.listen(4096).map_err(bind_err)?;
        let addr = listener.local_addr().map_err(bind_err)?;
        let state = Arc::new(State {
            slots: Semaphore::new(config.service_slots),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            log: Mutex::new(Vec::new()),
            seq: AtomicU64::new(0),
            in_service: AtomicU64::new(0),
            peak_in_service: AtomicU64::new(0),
            config,
        });
        let stop = CancellationToken::new();
        let task = tokio::spawn({
            let state = state.clone();
            let stop = stop.clone();
            async move {
                loop {
                    tokio::select! {
                        _ = stop.cancelled() => return,
                        accepted = listener.accept() => match accepted {
                            Ok((stream, _)) => spawn_connection(stream, state.clone(), stop.clone()),
                            Err(err) => tracing::warn!(%err, "testbed accept failed"),
                        },
                    }
                }
            }
        });
        Ok(Testbed { addr, state, stop, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.state.log.lock().clone()
    }

    pub fn reset_log(&self) {
        self.state.log.lock().clear();
    }

    /// Highest number of requests observed inside the latency sleep at once.
    pub fn peak_in_service(&self) -> u64 {
        self.state.peak_in_service.load(Ordering::SeqCst)
    }

    pub async fn shutdown(self) -> Vec<LogEntry> {
        let Testbed { state, stop, task, .. } = self;
        stop.cancel();
        let _ = task.await;
        let entries = state.log.lock().clone();
        entries
    }
}

/// Serves until `stop` fires and returns the request log.
pub async fn serve(config: TestbedConfig, stop: CancellationToken) -> Result<Vec<LogEntry>, TestbedError> {
    let testbed = Testbed::serve_on(([0, 0, 0, 0], config.port).into(), config).await?;
    tracing::info!(addr = %testbed.addr(), "testbed listening");
    stop.cancelled().await;
    Ok(testbed.shutdown().await)
}

fn spawn_connection(stream: TcpStream, state: Arc<State>, stop: CancellationToken) {
    let _ = stream.set_nodelay(true);
    tokio::spawn(async move {
        let service = service_fn(move |req| handle(req, state.clone()));
        let conn = http1::Builder::new().serve_connection(TokioIo::new(stream), service);
        tokio::select! {
            _ = conn => {}
            _ = stop.cancelled() => {}
        }
    });
}

fn json(status: StatusCode, body: String) -> Response<Full<Bytes>> {
    let mut resp = Response::new(Full::new(Bytes::from(body)));
    *resp.status_mut() = status;
    resp.headers_mut()
        .insert(CONTENT_TYPE, "application/json".parse().expect("static header"));
    resp
}

async fn handle(req: Request<Incoming>, state: Arc<State>) -> Result<Response<Full<Bytes>>, Infallible> {
    let arrived = Instant::now();
    let wall_us = unix_us();
    let path = req.uri().path().to_string();
    let full_path = req
        .uri()
        .path_and_query()
        .map(|p| p.as_str().to_string())
        .unwrap_or_else(|| path.clone());

    match (req.method(), path.as_str()) {
        (&Method::GET, "/_log") => {
            let body = serde_json::to_string(&*state.log.lock()).expect("log serializes");
            return Ok(json(StatusCode::OK, body));
        }
        (&Method::GET, "/_reset") => {
            state.log.lock().clear();
            return Ok(json(StatusCode::OK, "{\"reset\":true}".into()));
        }
        _ => {}
    }

    let method = req.method().clone();
    let cookie = req
        .headers()
        .get(COOKIE)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let query = req.uri().query().map(str::to_string);
    let body = req.into_body().collect().await.map(|b| b.to_bytes()).unwrap_or_default();

    let routed: Result<(), StatusCode> = match (&method, path.as_str()) {
        (&Method::GET, "/browse") | (&Method::GET, "/search") => Ok(()),
        (&Method::POST, "/shop") if body.is_empty() => Err(StatusCode::BAD_REQUEST),
        (&Method::POST, "/shop") => Ok(()),
        (_, "/browse" | "/search" | "/shop") => Err(StatusCode::METHOD_NOT_ALLOWED),
        _ => Err(StatusCode::NOT_FOUND),
    };

    let mut queue_wait = Duration::ZERO;
    let response = match routed {
        Err(status) => json(status, format!("{{\"error\":{}}}", status.as_u16())),
        Ok(()) => {
            let permit = state.slots.acquire().await.expect("semaphore never closed");
            queue_wait = arrived.elapsed();
            let now_in = state.in_service.fetch_add(1, Ordering::SeqCst) + 1;
            state.peak_in_service.fetch_max(now_in, Ordering::SeqCst);
            tokio::time::sleep(state.config.latency_for(&path)).await;
            state.in_service.fetch_sub(1, Ordering::SeqCst);
            drop(permit);
            let inject = state.config.error_rate > 0.0 && state.rng.lock().gen_bool(state.config.error_rate);
            if inject {
                json(StatusCode::INTERNAL_SERVER_ERROR, "{\"error\":\"injected\"}".into())
            } else {
                let seq = state.seq.load(Ordering::SeqCst);
                let mut resp = match path.as_str() {
                    "/browse" => json(
                        StatusCode::OK,
                        r#"{"items":[{"id":1,"name":"antenna"},{"id":2,"name":"radio"}]}"#.into(),
                    ),
                    "/search" => {
                        let q = query
                            .as_deref()
                            .and_then(|q| q.split('&').find_map(|kv| kv.strip_prefix("q=")))
                            .unwrap_or("");
                        json(
                            StatusCode::OK,
                            serde_json::json!({"query": q, "results": q.len() % 5}).to_string(),
                        )
                    }
                    _ => json(StatusCode::OK, format!("{{\"order\":{seq}}}")),
                };
                if path == "/browse" {
                    resp.headers_mut().insert(
                        SET_COOKIE,
                        format!("session={seq}; Path=/").parse().expect("ascii cookie"),
                    );
                }
                resp
            }
        }
    };

    let seq = state.seq.fetch_add(1, Ordering::SeqCst);
    state.log.lock().push(LogEntry {
        seq,
        method: method.to_string(),
        path: full_path,
        wall_us,
        queue_wait_ms: queue_wait.as_secs_f64() * 1000.0,
        status: response.status().as_u16(),
        cookie,
    });
    Ok(response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::transport::{HttpTransport, Transport};
    use crate::scripting::{Method as ScriptMethod, ResolvedRequest};

    fn get(url: &str) -> ResolvedRequest {
        ResolvedRequest {
            method: ScriptMethod::Get,
            url: url.into(),
            headers: vec![],
            body: None,
            assert_status: None,
        }
    }

    async fn status_of(tb: &Testbed, req: ResolvedRequest) -> u16 {
        let transport = HttpTransport::new(&tb.base_url(), Duration::from_secs(5)).unwrap();
        transport.session(0).send(&req).await.unwrap().status
    }

    #[tokio::test]
    async fn routes_and_status_codes() {
        let tb = Testbed::start(TestbedConfig { latency_ms: 1, ..Default::default() }).await.unwrap();
        assert_eq!(status_of(&tb, get("/browse")).await, 200);
        assert_eq!(status_of(&tb, get("/search?q=radio")).await, 200);
        assert_eq!(status_of(&tb, get("/nope")).await, 404);
        let mut shop = get("/shop");
        shop.method = ScriptMethod::Post;
        assert_eq!(status_of(&tb, shop.clone()).await, 400);
        shop.body = Some("{\"item\":1}".into());
        assert_eq!(status_of(&tb, shop).await, 200);
        let log = tb.shutdown().await;
        let paths: Vec<_> = log.iter().map(|e| (e.path.as_str(), e.status)).collect();
        assert_eq!(
            paths,
            [("/browse", 200), ("/search?q=radio", 200), ("/nope", 404), ("/shop", 400), ("/shop", 200)]
        );
    }

    #[tokio::test]
    async fn injected_latency_bounds_response_time() {
        let tb = Testbed::start(TestbedConfig { latency_ms: 50, service_slots: 10, ..Default::default() })
            .await
            .unwrap();
        let transport = HttpTransport::new(&tb.base_url(), Duration::from_secs(5)).unwrap();
        let mut session = transport.session(0);
        let started = Instant::now();
        session.send(&get("/browse")).await.unwrap();
        let ms = started.elapsed().as_secs_f64() * 1000.0;
        assert!((50.0..70.0).contains(&ms), "{ms}");
    }

    #[tokio::test]
    async fn single_slot_serializes_requests() {
        let tb = Testbed::start(TestbedConfig { latency_ms: 50, service_slots: 1, ..Default::default() })
            .await
            .unwrap();
        let transport = HttpTransport::new(&tb.base_url(), Duration::from_secs(5)).unwrap();
        let started = Instant::now();
        let mut tasks = Vec::new();
        for v in 0..2 {
            let mut session = transport.session(v);
            tasks.push(tokio::spawn(async move {
                session.send(&get("/browse")).await.unwrap();
                started.elapsed()
            }));
        }
        let mut done = Vec::new();
        for t in tasks {
            done.push(t.await.unwrap());
        }
        done.sort();
        assert!(done[1] >= Duration::from_millis(100), "{done:?}");
        assert_eq!(tb.peak_in_service(), 1);
    }

    #[tokio::test]
    async fn error_injection_is_seeded() {
        let config = TestbedConfig { latency_ms: 0, error_rate: 0.5, seed: 7, ..Default::default() };
        let mut runs = Vec::new();
        for _ in 0..2 {
            let tb = Testbed::start(config.clone()).await.unwrap();
            let mut statuses = Vec::new();
            for _ in 0..20 {
                statuses.push(status_of(&tb, get("/browse")).await);
            }
            runs.push(statuses);
        }
        assert_eq!(runs[0], runs[1]);
        assert!(runs[0].contains(&500) && runs[0].contains(&200));
    }

    #[tokio::test]
    async fn log_endpoints() {
        let tb = Testbed::start(TestbedConfig { latency_ms: 0, ..Default::default() }).await.unwrap();
        status_of(&tb, get("/browse")).await;
        assert_eq!(status_of(&tb, get("/_log")).await, 200);
        assert_eq!(tb.log().len(), 1);
        status_of(&tb, get("/_reset")).await;
        assert!(tb.log().is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TestbedConfig { service_slots: 0, ..Default::default() }.validate().is_err());
        assert!(TestbedConfig { error_rate: 1.5, ..Default::default() }.validate().is_err());
    }
}
