//! Capture-replay recording proxy.
//!
//! Clients point their HTTP proxy at the recorder and browse the system under
//! test. Every proxied request becomes one `Request` step, in the order the
//! recorder finished reading each request head. Cookies are not recorded; the
//! runtime keeps a per-vuser cookie jar at replay time.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::header::{CONTENT_TYPE, HOST};
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Request, Response, StatusCode, Uri};
use hyper_util::rt::TokioIo;
use parking_lot::Mutex;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;
use tracing::{debug, warn};

use super::{Method, RequestStep, Script, Step};
use crate::runtime::transport::forward;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("cannot bind recorder on port {port}: {source}")]
    Bind {
        port: u16,
        #[source]
        source: std::io::Error,
    },
    #[error("recording stopped before any request was captured")]
    EmptyRecording,
    #[error("recorded session is not a valid script: {0}")]
    Invalid(#[from] super::ScriptError),
}

#[derive(Debug, Clone)]
struct Captured {
    method: Method,
    path: String,
    content_type: Option<String>,
    body: Option<String>,
}

type Log = Arc<Mutex<Vec<Option<Captured>>>>;

/// A running recording proxy.
pub struct Recorder {
    local_addr: SocketAddr,
    log: Log,
    stop: CancellationToken,
    task: JoinHandle<()>,
}

impl Recorder {
    /// Binds the proxy. `upstream` is used for origin-form requests (clients
    /// talking to the recorder as if it were the server); absolute-form proxy
    /// requests carry their own authority.
    pub async fn bind(port: u16, upstream: Option<Uri>) -> Result<Self, RecordError> {
        let listener = TcpListener::bind(("127.0.0.1", port))
            .await
            .map_err(|source| RecordError::Bind { port, source })?;
        let local_addr = listener.local_addr().map_err(|source| RecordError::Bind { port, source })?;
        let log: Log = Arc::default();
        let stop = CancellationToken::new();
        let upstream = upstream.and_then(|u| u.authority().map(|a| a.to_string()));
        let task = tokio::spawn(accept_loop(listener, log.clone(), stop.clone(), upstream));
        Ok(Recorder {
            local_addr,
            log,
            stop,
            task,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn captured(&self) -> usize {
        self.log.lock().len()
    }

    /// Stops the proxy and emits the captured session as a script.
    pub async fn finish(self, name: &str) -> Result<Script, RecordError> {
        self.stop.cancel();
        let _ = self.task.await;
        let captured: Vec<Captured> = self.log.lock().iter().flatten().cloned().collect();
        if captured.is_empty() {
            return Err(RecordError::EmptyRecording);
        }
        let steps = captured
            .into_iter()
            .map(|c| {
                let mut headers = BTreeMap::new();
                if let Some(ct) = c.content_type {
                    headers.insert("content-type".to_string(), ct);
                }
                Step::Request(RequestStep {
                    method: c.method,
                    url: c.path,
                    headers,
                    body: c.body,
                    assert_status: None,
                })
            })
            .collect();
        let script = Script {
            name: name.to_string(),
            parameters: BTreeMap::new(),
            steps,
        };
        script.validate()?;
        Ok(script)
    }
}

/// Runs a recording session on `listen_port` until `stop` fires.
pub async fn record_session(
    listen_port: u16,
    upstream: Option<Uri>,
    stop: CancellationToken,
    name: &str,
) -> Result<Script, RecordError> {
    let recorder = Recorder::bind(listen_port, upstream).await?;
    stop.cancelled().await;
    recorder.finish(name).await
}

async fn accept_loop(listener: TcpListener, log: Log, stop: CancellationToken, upstream: Option<String>) {
    loop {
        let stream = tokio::select! {
            _ = stop.cancelled() => return,
            accepted = listener.accept() => match accepted {
                Ok((stream, _)) => stream,
                Err(err) => {
                    warn!(%err, "recorder accept failed");
                    continue;
                }
            },
        };
        let log = log.clone();
        let upstream = upstream.clone();
        let stop = stop.clone();
        tokio::spawn(async move {
            let service = service_fn(move |req| proxy(req, log.clone(), upstream.clone()));
            let conn = http1::Builder::new().serve_connection(TokioIo::new(stream), service);
            tokio::select! {
                res = conn => if let Err(err) = res { debug!(%err, "recorder connection ended") },
                _ = stop.cancelled() => {}
            }
        });
    }
}

async fn proxy(
    req: Request<Incoming>,
    log: Log,
    upstream: Option<String>,
) -> Result<Response<Full<Bytes>>, Infallible> {
    let Some(method) = Method::parse(req.method().as_str()) else {
        return Ok(text(StatusCode::METHOD_NOT_ALLOWED, "unsupported method"));
    };
    let path = req
        .uri()
        .path_and_query()
        .map(|pq| pq.as_str().to_string())
        .unwrap_or_else(|| "/".into());
    let authority = req
        .uri()
        .authority()
        .map(|a| a.to_string())
        .or(upstream)
        .or_else(|| req.headers().get(HOST).and_then(|h| h.to_str().ok()).map(str::to_string));
    let Some(authority) = authority else {
        return Ok(text(StatusCode::BAD_REQUEST, "no upstream for request"));
    };

    // The request head is fully read once the service runs; that moment
    // fixes the request's position in the recording.
    let slot = {
        let mut log = log.lock();
        log.push(None);
        log.len() - 1
    };

    let (parts, body) = req.into_parts();
    let body = match body.collect().await {
        Ok(b) => b.to_bytes(),
        Err(_) => return Ok(text(StatusCode::BAD_REQUEST, "unreadable body")),
    };
    let content_type = parts
        .headers
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    log.lock()[slot] = Some(Captured {
        method,
        path: path.clone(),
        content_type,
        body: (!body.is_empty()).then(|| String::from_utf8_lossy(&body).into_owned()),
    });

    let mut headers = parts.headers;
    headers.remove("proxy-connection");
    headers.remove(hyper::header::CONNECTION);
    match forward(&authority, parts.method, &path, headers, body).await {
        Ok(resp) => Ok(resp),
        Err(err) => Ok(text(StatusCode::BAD_GATEWAY, &err.to_string())),
    }
}

fn text(status: StatusCode, msg: &str) -> Response<Full<Bytes>> {
    let mut resp = Response::new(Full::new(Bytes::from(msg.to_string())));
    *resp.status_mut() = status;
    resp
}
