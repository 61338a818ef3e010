//! Load generator agent: hosts a vuser pool for one controller connection.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::SplitStream;
use futures::{SinkExt, StreamExt};
use parking_lot::Mutex;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinSet;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use super::protocol::{self, AgentMode, AgentSchedule, Binding, Message, ProtocolError, Wire};
use crate::monitor::{sample_counters, MonitorError, ProcSource, Sampler};
use crate::rendezvous::{RendezvousClient, RendezvousError};
use crate::runtime::{
    run_vuser_loop, Clock, HttpTransport, LoopMode, RealClock, RequestError, TransactionRecord, Transport,
    VirtualClock, VuserContext, VuserDeps,
};
use crate::scripting::{parse_script, Script, ScriptError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("script {name}: {source}")]
    Script {
        name: String,
        #[source]
        source: ScriptError,
    },
    #[error("binding references unknown script {0}")]
    UnknownScript(String),
    #[error("assignment of {requested} vusers exceeds capacity {capacity}")]
    Capacity { requested: u64, capacity: u64 },
    #[error("invalid target: {0}")]
    Target(#[from] RequestError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
}

/// How an agent generates load. `transport` and `virtual_epoch_ms` are
/// in-process overrides used by local agents (mock targets, virtual time).
#[derive(Clone)]
pub struct AgentConfig {
    pub tag: String,
    pub capacity: u64,
    pub request_timeout: Duration,
    pub transport: Option<Arc<dyn Transport>>,
    pub virtual_epoch_ms: Option<u64>,
}

impl AgentConfig {
    pub fn new(tag: impl Into<String>, capacity: u64) -> Self {
        AgentConfig {
            tag: tag.into(),
            capacity,
            request_timeout: Duration::from_secs(30),
            transport: None,
            virtual_epoch_ms: None,
        }
    }
}

impl std::fmt::Debug for AgentConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentConfig")
            .field("tag", &self.tag)
            .field("capacity", &self.capacity)
            .field("mock_transport", &self.transport.is_some())
            .field("virtual_epoch_ms", &self.virtual_epoch_ms)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgentOutcome {
    pub vusers: u64,
    pub batches: u64,
    pub records: u64,
}

/// Accepts controller connections until `stop` fires; each connection is
/// served independently.
pub async fn serve(listener: TcpListener, config: AgentConfig, stop: CancellationToken) -> std::io::Result<()> {
    loop {
        let (stream, peer) = tokio::select! {
            _ = stop.cancelled() => return Ok(()),
            accepted = listener.accept() => accepted?,
        };
        let _ = stream.set_nodelay(true);
        let config = config.clone();
        tokio::spawn(async move {
            match serve_connection(protocol::framed(stream), config).await {
                Ok(outcome) => tracing::info!(%peer, ?outcome, "session finished"),
                Err(err) => tracing::warn!(%peer, %err, "session failed"),
            }
        });
    }
}

/// Speaks the agent side of the protocol on one connection: HELLO, then
/// either ASSIGN + START (a run) or MONITOR (counter streaming).
pub async fn serve_connection(mut wire: Wire, config: AgentConfig) -> Result<AgentOutcome, AgentError> {
    protocol::send(&mut wire, &Message::Hello { tag: config.tag.clone(), capacity: config.capacity }).await?;
    match protocol::recv(&mut wire).await? {
        Message::Monitor { interval_ms, host } => monitor_session(wire, interval_ms, host).await,
        Message::Assign { run_id, target, seed, scripts, bindings, .. } => {
            let requested: u64 = bindings.iter().map(|b| b.count).sum();
            if requested > config.capacity {
                return Err(AgentError::Capacity { requested, capacity: config.capacity });
            }
            let mut parsed = BTreeMap::new();
            for (name, doc) in scripts {
                let script = parse_script(&doc, None).map_err(|source| AgentError::Script { name: name.clone(), source })?;
                parsed.insert(name, Arc::new(script));
            }
            let transport: Arc<dyn Transport> = match &config.transport {
                Some(t) => t.clone(),
                None => Arc::new(HttpTransport::new(&target, config.request_timeout)?),
            };
            let schedule = match protocol::recv(&mut wire).await? {
                Message::Start { schedule } => schedule,
                Message::Abort | Message::Stop => return Ok(AgentOutcome::default()),
                other => return Err(other.unexpected("START").into()),
            };
            let run = Run {
                run_id: run_id.into(),
                seed,
                scripts: parsed,
                bindings,
                transport,
                virtual_epoch_ms: config.virtual_epoch_ms,
            };
            run.execute(wire, schedule).await
        }
        other => Err(other.unexpected("ASSIGN or MONITOR").into()),
    }
}

async fn monitor_session(wire: Wire, interval_ms: u64, host: String) -> Result<AgentOutcome, AgentError> {
    let (mut sink, mut stream) = wire.split();
    let sampler = Sampler::new(host, Box::new(ProcSource::system()))?;
    let stop = CancellationToken::new();
    let (tx, mut rx) = mpsc::unbounded_channel();
    let task = sample_counters(sampler, Duration::from_millis(interval_ms), stop.clone(), tx)?;
    let mut seq = 0;
    loop {
        tokio::select! {
            batch = rx.recv() => {
                let Some(counters) = batch else { break };
                let msg = Message::MetricBatch { seq, records: vec![], counters };
                if sink.send(protocol::encode(&msg)).await.is_err() {
                    break;
                }
                seq += 1;
            }
            // Any frame or a closed connection ends the session.
            _ = stream.next() => break,
        }
    }
    stop.cancel();
    let _ = task.await;
    let _ = sink.send(protocol::encode(&Message::Bye)).await;
    Ok(AgentOutcome { vusers: 0, batches: seq, records: 0 })
}

/// Forwards arrivals to the controller and parks the vuser until the
/// matching RDV_RELEASE names it.
struct RemoteRendezvous {
    out: mpsc::UnboundedSender<Message>,
    pending: Mutex<HashMap<u64, oneshot::Sender<()>>>,
}

#[async_trait]
impl RendezvousClient for RemoteRendezvous {
    async fn arrive(&self, vuser_id: u64, name: &str) -> Result<(), RendezvousError> {
        let (tx, rx) = oneshot::channel();
        self.pending.lock().insert(vuser_id, tx);
        self.out
            .send(Message::RdvArrive { vuser: vuser_id, name: name.to_string() })
            .map_err(|_| RendezvousError::Disconnected)?;
        rx.await.map_err(|_| RendezvousError::Disconnected)
    }
}

impl RemoteRendezvous {
    fn release(&self, cohort: &[u64]) {
        let mut pending = self.pending.lock();
        for v in cohort {
            if let Some(tx) = pending.remove(v) {
                let _ = tx.send(());
            }
        }
    }

    fn disconnect(&self) {
        self.pending.lock().clear();
    }
}

struct Run {
    run_id: Arc<str>,
    seed: u64,
    scripts: BTreeMap<String, Arc<Script>>,
    bindings: Vec<Binding>,
    transport: Arc<dyn Transport>,
    virtual_epoch_ms: Option<u64>,
}

impl Run {
    async fn execute(self, wire: Wire, schedule: AgentSchedule) -> Result<AgentOutcome, AgentError> {
        let mut by_vuser: HashMap<u64, (Arc<str>, Arc<Script>)> = HashMap::new();
        for b in &self.bindings {
            let script = self
                .scripts
                .get(&b.script)
                .ok_or_else(|| AgentError::UnknownScript(b.script.clone()))?;
            let group: Arc<str> = b.group.as_str().into();
            for id in b.ids() {
                by_vuser.insert(id, (group.clone(), script.clone()));
            }
        }

        let epoch = Instant::now();
        let real_clock: Arc<dyn Clock> = Arc::new(RealClock::starting_at(epoch.into_std()));
        let abort = CancellationToken::new();
        let stop = CancellationToken::new();
        let finished = CancellationToken::new();

        let (sink, stream) = wire.split();
        let (out, out_rx) = mpsc::unbounded_channel::<Message>();
        let writer = tokio::spawn(write_loop(sink, out_rx));
        let rendezvous = Arc::new(RemoteRendezvous { out: out.clone(), pending: Mutex::new(HashMap::new()) });
        let reader = tokio::spawn(read_loop(stream, rendezvous.clone(), stop.clone(), abort.clone()));

        let (rec_tx, rec_rx) = mpsc::unbounded_channel::<TransactionRecord>();
        let batcher = tokio::spawn(batch_loop(
            rec_rx,
            out.clone(),
            Duration::from_millis(schedule.batch_interval_ms.max(1)),
            schedule.batch_max.max(1),
        ));

        let loop_mode = match schedule.mode {
            AgentMode::Iterations(n) => LoopMode::Iterations(n),
            AgentMode::UntilMs(ms) => LoopMode::UntilNs(ms * 1_000_000),
        };
        if let AgentMode::UntilMs(ms) = schedule.mode {
            let abort = abort.clone();
            let finished = finished.clone();
            let hard_deadline = epoch + Duration::from_millis(ms + schedule.grace_ms);
            tokio::spawn(async move {
                tokio::select! {
                    _ = tokio::time::sleep_until(hard_deadline) => {
                        tracing::warn!("grace period over; aborting in-flight iterations");
                        abort.cancel();
                    }
                    _ = finished.cancelled() => {}
                }
            });
        }

        let pacing = Duration::from_millis(schedule.pacing_ms);
        let mut vusers = JoinSet::new();
        let mut started = 0u64;
        'events: for event in &schedule.starts {
            tokio::select! {
                _ = tokio::time::sleep_until(epoch + Duration::from_millis(event.offset_ms)) => {}
                _ = stop.cancelled() => break 'events,
                _ = abort.cancelled() => break 'events,
            }
            for &vuser in &event.vusers {
                let Some((group, script)) = by_vuser.get(&vuser).cloned() else {
                    tracing::warn!(vuser, "start event names an unassigned vuser");
                    continue;
                };
                let clock: Arc<dyn Clock> = match self.virtual_epoch_ms {
                    Some(wall) => Arc::new(VirtualClock::new(event.offset_ms * 1_000_000, wall)),
                    None => real_clock.clone(),
                };
                let deps = VuserDeps {
                    transport: self.transport.clone(),
                    clock,
                    rendezvous: rendezvous.clone(),
                    abort: abort.clone(),
                    stop: stop.clone(),
                };
                let ctx = VuserContext {
                    run_id: self.run_id.clone(),
                    group: group.clone(),
                    vuser_id: vuser,
                    iteration: 0,
                    seed: self.seed,
                };
                let _ = out.send(Message::Vuser { vuser, group: group.to_string(), running: true });
                let out = out.clone();
                let rec_tx = rec_tx.clone();
                started += 1;
                vusers.spawn(async move {
                    if let Err(err) = run_vuser_loop(&script, ctx, loop_mode, pacing, &deps, &rec_tx).await {
                        tracing::error!(vuser, %err, "vuser stopped with an error");
                    }
                    let _ = out.send(Message::Vuser { vuser, group: group.to_string(), running: false });
                });
            }
        }
        drop(rec_tx);
        while vusers.join_next().await.is_some() {}
        finished.cancel();
        let (batches, records) = batcher.await.unwrap_or_default();
        let _ = out.send(Message::Bye);
        drop(out);
        rendezvous.disconnect();
        let _ = writer.await;
        reader.abort();
        Ok(AgentOutcome { vusers: started, batches, records })
    }
}

async fn write_loop(
    mut sink: futures::stream::SplitSink<Wire, bytes::Bytes>,
    mut rx: mpsc::UnboundedReceiver<Message>,
) {
    while let Some(msg) = rx.recv().await {
        let last = matches!(msg, Message::Bye);
        if sink.send(protocol::encode(&msg)).await.is_err() {
            return;
        }
        if last {
            return;
        }
    }
}

async fn read_loop(
    mut stream: SplitStream<Wire>,
    rendezvous: Arc<RemoteRendezvous>,
    stop: CancellationToken,
    abort: CancellationToken,
) {
    loop {
        let frame = match stream.next().await {
            Some(Ok(frame)) => frame,
            _ => break,
        };
        match protocol::decode(&frame) {
            Ok(Message::RdvRelease { cohort, .. }) => rendezvous.release(&cohort),
            Ok(Message::Stop) => stop.cancel(),
            Ok(Message::Abort) => {
                stop.cancel();
                abort.cancel();
            }
            Ok(other) => tracing::warn!(kind = other.kind(), "ignoring unexpected message"),
            Err(err) => {
                tracing::warn!(%err, "bad frame from controller");
                break;
            }
        }
    }
    // The controller is gone: nothing produced from here on can be delivered.
    stop.cancel();
    abort.cancel();
    rendezvous.disconnect();
}

/// Ships records in METRIC_BATCH frames every `interval` or `max` records,
/// whichever comes first. Returns (batches, records) sent.
async fn batch_loop(
    mut rx: mpsc::UnboundedReceiver<TransactionRecord>,
    out: mpsc::UnboundedSender<Message>,
    interval: Duration,
    max: usize,
) -> (u64, u64) {
    let mut seq = 0u64;
    let mut total = 0u64;
    let mut pending = Vec::new();
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    ticker.tick().await;
    let mut flush = |pending: &mut Vec<TransactionRecord>| {
        if pending.is_empty() {
            return;
        }
        let records = std::mem::take(pending);
        total += records.len() as u64;
        let _ = out.send(Message::MetricBatch { seq, records, counters: vec![] });
        seq += 1;
    };
    loop {
        tokio::select! {
            rec = rx.recv() => match rec {
                Some(r) => {
                    pending.push(r);
                    if pending.len() >= max {
                        flush(&mut pending);
                    }
                }
                None => break,
            },
            _ = ticker.tick() => flush(&mut pending),
        }
    }
    flush(&mut pending);
    (seq, total)
}
