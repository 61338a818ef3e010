//! Controller-side agent connections: remote TCP agents, in-process local
//! agents over a duplex pipe, and remote counter monitoring sessions.

use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use super::agent::{serve_connection, AgentConfig};
use super::protocol::{self, Message, ProtocolError, Wire};
use crate::monitor::{CounterStore, MonitorError};

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("cannot reach agent {address}: {reason}")]
    Connect { address: String, reason: String },
    #[error("agent {address}: {source}")]
    Protocol {
        address: String,
        #[source]
        source: ProtocolError,
    },
}

/// A connected agent that has introduced itself with HELLO.
pub struct AgentLink {
    pub tag: String,
    pub capacity: u64,
    /// `host:port` for remote agents, `local:<tag>` for in-process ones.
    pub address: String,
    pub(crate) wire: Wire,
}

impl std::fmt::Debug for AgentLink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentLink")
            .field("tag", &self.tag)
            .field("capacity", &self.capacity)
            .field("address", &self.address)
            .finish()
    }
}

async fn handshake(mut wire: Wire, address: String) -> Result<AgentLink, FleetError> {
    let hello = tokio::time::timeout(CONNECT_TIMEOUT, protocol::recv(&mut wire))
        .await
        .map_err(|_| FleetError::Connect { address: address.clone(), reason: "no HELLO within 5s".into() })?;
    match hello {
        Ok(Message::Hello { tag, capacity }) => Ok(AgentLink { tag, capacity, address, wire }),
        Ok(other) => Err(FleetError::Protocol { address, source: other.unexpected("HELLO") }),
        Err(source) => Err(FleetError::Protocol { address, source }),
    }
}

async fn dial(address: &str) -> Result<TcpStream, FleetError> {
    let connect_err = |reason: String| FleetError::Connect { address: address.to_string(), reason };
    let stream = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(address))
        .await
        .map_err(|_| connect_err("timed out after 5s".into()))?
        .map_err(|e| connect_err(e.to_string()))?;
    let _ = stream.set_nodelay(true);
    Ok(stream)
}

pub async fn connect_agent(address: &str) -> Result<AgentLink, FleetError> {
    let stream = dial(address).await?;
    handshake(protocol::framed(stream), address.to_string()).await
}

/// Runs an agent inside this process, speaking the same protocol over an
/// in-memory pipe.
pub async fn spawn_local_agent(config: AgentConfig) -> Result<AgentLink, FleetError> {
    let (ours, theirs) = tokio::io::duplex(1 << 20);
    let address = format!("local:{}", config.tag);
    tokio::spawn(async move {
        if let Err(err) = serve_connection(protocol::framed(theirs), config).await {
            tracing::warn!(%err, "local agent failed");
        }
    });
    handshake(protocol::framed(ours), address).await
}

/// Opens a MONITOR session on a remote agent and stores the counter batches
/// it streams until `stop` fires.
pub async fn remote_monitor(
    store: Arc<CounterStore>,
    address: String,
    interval_ms: u64,
    stop: CancellationToken,
) -> Result<JoinHandle<()>, MonitorError> {
    let connect = |reason: String| MonitorError::Connect { target: address.clone(), reason };
    let link = match dial(&address).await {
        Ok(stream) => handshake(protocol::framed(stream), address.clone()).await,
        Err(err) => Err(err),
    }
    .map_err(|e| connect(e.to_string()))?;
    let mut wire = link.wire;
    protocol::send(&mut wire, &Message::Monitor { interval_ms, host: address.clone() })
        .await
        .map_err(|e| connect(e.to_string()))?;
    Ok(tokio::spawn(async move {
        let (mut sink, mut stream) = wire.split();
        loop {
            tokio::select! {
                _ = stop.cancelled() => break,
                frame = stream.next() => match frame.map(|f| f.map_err(ProtocolError::from).and_then(|f| protocol::decode(&f))) {
                    Some(Ok(Message::MetricBatch { counters, .. })) => store.push(counters),
                    Some(Ok(Message::Bye)) | None => return,
                    Some(Ok(other)) => tracing::warn!(kind = other.kind(), "unexpected monitor frame"),
                    Some(Err(err)) => {
                        tracing::warn!(%err, %address, "monitor session failed");
                        return;
                    }
                },
            }
        }
        let _ = sink.send(protocol::encode(&Message::Stop)).await;
    }))
}
