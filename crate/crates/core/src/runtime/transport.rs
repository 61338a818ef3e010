//! Request transports. [`HttpTransport`] speaks HTTP/1.1 with one keep-alive
//! connection per authority per session; [`MockTransport`] answers instantly
//! for conservation and determinism checks.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::client::conn::http1::{self, SendRequest};
use hyper::header::{HeaderMap, HeaderName, HeaderValue, COOKIE, HOST, SET_COOKIE};
use hyper::{Request, Response, Uri};
use hyper_util::rt::TokioIo;
use parking_lot::Mutex;
use thiserror::Error;
use tokio::net::TcpStream;

use crate::scripting::ResolvedRequest;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RequestError {
    #[error("invalid url {0:?}")]
    InvalidUrl(String),
    #[error("connect to {authority} failed: {reason}")]
    Connect { authority: String, reason: String },
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Outcome of one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exchange {
    pub status: u16,
    /// Time spent establishing a new TCP connection (zero on reuse).
    pub connect: Duration,
}

/// Per-vuser, per-iteration request context: connection pool and cookie jar.
#[async_trait]
pub trait Session: Send {
    async fn send(&mut self, request: &ResolvedRequest) -> Result<Exchange, RequestError>;
}

pub trait Transport: Send + Sync {
    fn session(&self, vuser_id: u64) -> Box<dyn Session>;
}

#[derive(Debug, Clone)]
pub struct HttpTransport {
    authority: String,
    prefix: String,
    timeout: Duration,
}

impl HttpTransport {
    /// `base` is an `http://host:port[/prefix]` URL that relative script
    /// paths are joined onto.
    pub fn new(base: &str, timeout: Duration) -> Result<Self, RequestError> {
        let uri: Uri = base.parse().map_err(|_| RequestError::InvalidUrl(base.to_string()))?;
        if uri.scheme_str() != Some("http") {
            return Err(RequestError::InvalidUrl(base.to_string()));
        }
        let authority = uri
            .authority()
            .ok_or_else(|| RequestError::InvalidUrl(base.to_string()))?
            .to_string();
        let prefix = uri.path().trim_end_matches('/').to_string();
        Ok(HttpTransport {
            authority,
            prefix,
            timeout,
        })
    }
}

impl Transport for HttpTransport {
    fn session(&self, _vuser_id: u64) -> Box<dyn Session> {
        Box::new(HttpSession {
            transport: self.clone(),
            connections: HashMap::new(),
            cookies: BTreeMap::new(),
        })
    }
}

pub struct HttpSession {
    transport: HttpTransport,
    connections: HashMap<String, SendRequest<Full<Bytes>>>,
    cookies: BTreeMap<String, String>,
}

impl HttpSession {
    fn resolve(&self, url: &str) -> Result<(String, String), RequestError> {
        if let Some(rest) = url.strip_prefix("http://") {
            let (authority, path) = match rest.find('/') {
                Some(i) => (&rest[..i], &rest[i..]),
                None => (rest, "/"),
            };
            if authority.is_empty() {
                return Err(RequestError::InvalidUrl(url.to_string()));
            }
            return Ok((authority.to_string(), path.to_string()));
        }
        if url.contains("://") {
            return Err(RequestError::InvalidUrl(url.to_string()));
        }
        let path = if url.starts_with('/') {
            format!("{}{}", self.transport.prefix, url)
        } else {
            format!("{}/{}", self.transport.prefix, url)
        };
        Ok((self.transport.authority.clone(), path))
    }

    /// Ensures a ready connection to `authority`; returns the connect time
    /// and whether an existing connection was reused.
    async fn ensure_connection(&mut self, authority: &str) -> Result<(Duration, bool), RequestError> {
        if let Some(sender) = self.connections.get_mut(authority) {
            if sender.ready().await.is_ok() {
                return Ok((Duration::ZERO, true));
            }
            self.connections.remove(authority);
        }
        let started = Instant::now();
        let sender = connect(authority).await?;
        let connect = started.elapsed();
        self.connections.insert(authority.to_string(), sender);
        Ok((connect, false))
    }

    fn build(&self, request: &ResolvedRequest, authority: &str, path: &str) -> Result<Request<Full<Bytes>>, RequestError> {
        let mut builder = Request::builder()
            .method(request.method.as_str())
            .uri(path)
            .header(HOST, authority);
        for (name, value) in &request.headers {
            if name.eq_ignore_ascii_case("cookie") || name.eq_ignore_ascii_case("host") {
                continue;
            }
            builder = builder.header(name.as_str(), value.as_str());
        }
        if !self.cookies.is_empty() {
            let jar = self
                .cookies
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join("; ");
            builder = builder.header(COOKIE, jar);
        }
        let body = request.body.clone().map(Bytes::from).unwrap_or_default();
        builder
            .body(Full::new(body))
            .map_err(|e| RequestError::Protocol(e.to_string()))
    }

    fn store_cookies(&mut self, headers: &HeaderMap) {
        for value in headers.get_all(SET_COOKIE) {
            let Ok(value) = value.to_str() else { continue };
            let pair = value.split(';').next().unwrap_or_default();
            if let Some((name, val)) = pair.split_once('=') {
                let name = name.trim();
                if !name.is_empty() {
                    self.cookies.insert(name.to_string(), val.trim().to_string());
                }
            }
        }
    }
}

#[async_trait]
impl Session for HttpSession {
    async fn send(&mut self, request: &ResolvedRequest) -> Result<Exchange, RequestError> {
        let (authority, path) = self.resolve(&request.url)?;
        let timeout = self.transport.timeout;
        let exchange = async {
            let mut connect_total = Duration::ZERO;
            // A pooled connection may have been closed by the server between
            // requests; retry once on a fresh one.
            for attempt in 0..2 {
                let req = self.build(request, &authority, &path)?;
                let (connect, reused) = self.ensure_connection(&authority).await?;
                connect_total += connect;
                let sender = self.connections.get_mut(&authority).expect("connection just ensured");
                match sender.send_request(req).await {
                    Ok(resp) => {
                        let status = resp.status().as_u16();
                        self.store_cookies(resp.headers());
                        resp.into_body()
                            .collect()
                            .await
                            .map_err(|e| RequestError::Protocol(e.to_string()))?;
                        return Ok(Exchange {
                            status,
                            connect: connect_total,
                        });
                    }
                    Err(err) => {
                        self.connections.remove(&authority);
                        if !(reused && attempt == 0) {
                            return Err(RequestError::Protocol(err.to_string()));
                        }
                    }
                }
            }
            unreachable!("second attempt always returns")
        };
        tokio::time::timeout(timeout, exchange)
            .await
            .map_err(|_| RequestError::Timeout(timeout))?
    }
}

async fn connect(authority: &str) -> Result<SendRequest<Full<Bytes>>, RequestError> {
    let addr = if authority.contains(':') {
        authority.to_string()
    } else {
        format!("{authority}:80")
    };
    let connect_err = |reason: String| RequestError::Connect {
        authority: authority.to_string(),
        reason,
    };
    let stream = TcpStream::connect(&addr).await.map_err(|e| connect_err(e.to_string()))?;
    let _ = stream.set_nodelay(true);
    let (sender, conn) = http1::handshake(TokioIo::new(stream))
        .await
        .map_err(|e| connect_err(e.to_string()))?;
    tokio::spawn(async move {
        let _ = conn.await;
    });
    Ok(sender)
}

/// Sends one request on a fresh connection and returns the full response.
/// Used by the recording proxy.
pub(crate) async fn forward(
    authority: &str,
    method: hyper::Method,
    path: &str,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response<Full<Bytes>>, RequestError> {
    let mut sender = connect(authority).await?;
    let mut req = Request::builder()
        .method(method)
        .uri(path)
        .body(Full::new(body))
        .map_err(|e| RequestError::Protocol(e.to_string()))?;
    *req.headers_mut() = headers;
    if !req.headers().contains_key(HOST) {
        let host = HeaderValue::from_str(authority).map_err(|e| RequestError::Protocol(e.to_string()))?;
        req.headers_mut().insert(HOST, host);
    }
    let resp = sender
        .send_request(req)
        .await
        .map_err(|e| RequestError::Protocol(e.to_string()))?;
    let (parts, body) = resp.into_parts();
    let body = body
        .collect()
        .await
        .map_err(|e| RequestError::Protocol(e.to_string()))?
        .to_bytes();
    let mut out = Response::from_parts(parts, Full::new(body));
    out.headers_mut().remove(HeaderName::from_static("transfer-encoding"));
    Ok(out)
}

/// Answers every request instantly with a fixed status, counting requests and
/// optionally logging `(vuser_id, url)` pairs.
#[derive(Debug, Default)]
pub struct MockTransport {
    status: u16,
    requests: AtomicU64,
    log: Option<Mutex<Vec<(u64, String)>>>,
}

impl MockTransport {
    pub fn new(status: u16) -> Self {
        MockTransport {
            status,
            requests: AtomicU64::new(0),
            log: None,
        }
    }

    pub fn logging(status: u16) -> Self {
        MockTransport {
            log: Some(Mutex::new(Vec::new())),
            ..Self::new(status)
        }
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    /// Logged `(vuser_id, url)` pairs, sorted for comparison across runs.
    pub fn sorted_log(&self) -> Vec<(u64, String)> {
        let mut log = self.log.as_ref().map(|l| l.lock().clone()).unwrap_or_default();
        log.sort();
        log
    }
}

impl Transport for Arc<MockTransport> {
    fn session(&self, vuser_id: u64) -> Box<dyn Session> {
        Box::new(MockSession {
            transport: self.clone(),
            vuser_id,
        })
    }
}

struct MockSession {
    transport: Arc<MockTransport>,
    vuser_id: u64,
}

#[async_trait]
impl Session for MockSession {
    async fn send(&mut self, request: &ResolvedRequest) -> Result<Exchange, RequestError> {
        self.transport.requests.fetch_add(1, Ordering::SeqCst);
        if let Some(log) = &self.transport.log {
            log.lock().push((self.vuser_id, request.url.clone()));
        }
        Ok(Exchange {
            status: self.transport.status,
            connect: Duration::ZERO,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(base: &str) -> HttpSession {
        HttpSession {
            transport: HttpTransport::new(base, Duration::from_secs(1)).unwrap(),
            connections: HashMap::new(),
            cookies: BTreeMap::new(),
        }
    }

    #[test]
    fn resolves_relative_and_absolute_urls() {
        let s = session("http://127.0.0.1:9000/app/");
        assert_eq!(
            s.resolve("/browse").unwrap(),
            ("127.0.0.1:9000".to_string(), "/app/browse".to_string())
        );
        assert_eq!(
            s.resolve("search?q=x").unwrap(),
            ("127.0.0.1:9000".to_string(), "/app/search?q=x".to_string())
        );
        assert_eq!(
            s.resolve("http://other:81/x").unwrap(),
            ("other:81".to_string(), "/x".to_string())
        );
        assert!(s.resolve("https://secure/x").is_err());
    }

    #[test]
    fn rejects_non_http_base() {
        assert!(HttpTransport::new("https://x", Duration::from_secs(1)).is_err());
        assert!(HttpTransport::new("not a url", Duration::from_secs(1)).is_err());
    }

    #[test]
    fn set_cookie_keeps_name_value_only() {
        let mut s = session("http://h:1");
        let mut headers = HeaderMap::new();
        headers.append(SET_COOKIE, HeaderValue::from_static("session=42; Path=/; HttpOnly"));
        headers.append(SET_COOKIE, HeaderValue::from_static("cart=a"));
        s.store_cookies(&headers);
        assert_eq!(s.cookies.get("session").map(String::as_str), Some("42"));
        assert_eq!(s.cookies.len(), 2);
    }

    #[tokio::test]
    async fn refused_connection_is_connect_error() {
        let port = {
            let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let transport = HttpTransport::new(&format!("http://127.0.0.1:{port}"), Duration::from_secs(2)).unwrap();
        let mut session = transport.session(0);
        let req = ResolvedRequest {
            method: crate::scripting::Method::Get,
            url: "/".into(),
            headers: vec![],
            body: None,
            assert_status: None,
        };
        assert!(matches!(session.send(&req).await, Err(RequestError::Connect { .. })));
    }
}
