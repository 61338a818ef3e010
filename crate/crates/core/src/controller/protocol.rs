//! Fleet wire protocol: 4-byte big-endian length-prefixed JSON frames.

use std::collections::BTreeMap;

use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio_util::codec::{Framed, LengthDelimitedCodec};

use crate::monitor::CounterSample;
use crate::runtime::TransactionRecord;

/// Largest accepted frame; a full METRIC_BATCH is well below this.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("connection closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unexpected message: expected {expected}, got {got}")]
    Unexpected { expected: &'static str, got: String },
}

/// One vuser group's share on an agent: ids `first_id .. first_id + count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub group: String,
    pub script: String,
    pub first_id: u64,
    pub count: u64,
}

impl Binding {
    pub fn ids(&self) -> std::ops::Range<u64> {
        self.first_id..self.first_id + self.count
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartEvent {
    pub offset_ms: u64,
    pub vusers: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    Iterations(u64),
    /// No iteration starts after this offset from START.
    UntilMs(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSchedule {
    pub starts: Vec<StartEvent>,
    pub mode: AgentMode,
    pub pacing_ms: u64,
    /// In-flight work past the deadline is aborted after this long.
    pub grace_ms: u64,
    pub batch_interval_ms: u64,
    pub batch_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Hello {
        tag: String,
        capacity: u64,
    },
    Assign {
        run_id: String,
        target: String,
        seed: u64,
        /// Script documents by script name.
        scripts: BTreeMap<String, String>,
        bindings: Vec<Binding>,
        /// Overall id range `[lo, hi)` the bindings fall in.
        id_block: (u64, u64),
    },
    Start {
        schedule: AgentSchedule,
    },
    /// Agent reports a vuser entering or leaving the running population.
    Vuser {
        vuser: u64,
        group: String,
        running: bool,
    },
    RdvArrive {
        vuser: u64,
        name: String,
    },
    RdvRelease {
        name: String,
        cohort: Vec<u64>,
        at_ns: u64,
    },
    MetricBatch {
        seq: u64,
        records: Vec<TransactionRecord>,
        counters: Vec<CounterSample>,
    },
    /// Opens a counter-only session; samples are labelled with `host`.
    Monitor {
        interval_ms: u64,
        host: String,
    },
    Stop,
    Abort,
    Bye,
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::Assign { .. } => "ASSIGN",
            Message::Start { .. } => "START",
            Message::Vuser { .. } => "VUSER",
            Message::RdvArrive { .. } => "RDV_ARRIVE",
            Message::RdvRelease { .. } => "RDV_RELEASE",
            Message::MetricBatch { .. } => "METRIC_BATCH",
            Message::Monitor { .. } => "MONITOR",
            Message::Stop => "STOP",
            Message::Abort => "ABORT",
            Message::Bye => "BYE",
        }
    }

    pub fn unexpected(&self, expected: &'static str) -> ProtocolError {
        ProtocolError::Unexpected { expected, got: self.kind().to_string() }
    }
}

pub trait Io: AsyncRead + AsyncWrite + Send + Unpin + 'static {}
impl<T: AsyncRead + AsyncWrite + Send + Unpin + 'static> Io for T {}

pub type Wire = Framed<Box<dyn Io>, LengthDelimitedCodec>;

pub fn framed(io: impl Io) -> Wire {
    let codec = LengthDelimitedCodec::builder()
        .length_field_length(4)
        .big_endian()
        .max_frame_length(MAX_FRAME)
        .new_codec();
    Framed::new(Box::new(io) as Box<dyn Io>, codec)
}

pub fn encode(msg: &Message) -> bytes::Bytes {
    bytes::Bytes::from(serde_json::to_vec(msg).expect("messages always serialize"))
}

pub fn decode(frame: &[u8]) -> Result<Message, ProtocolError> {
    Ok(serde_json::from_slice(frame)?)
}

pub async fn send(wire: &mut Wire, msg: &Message) -> Result<(), ProtocolError> {
    wire.send(encode(msg)).await?;
    Ok(())
}

pub async fn recv(wire: &mut Wire) -> Result<Message, ProtocolError> {
    match wire.next().await {
        Some(frame) => decode(&frame?),
        None => Err(ProtocolError::Closed),
    }
}
