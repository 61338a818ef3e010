//! Virtual-user execution: runs resolved scripts, times transactions and
//! emits [`TransactionRecord`]s.

pub mod clock;
pub mod transport;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;
use tokio_util::sync::CancellationToken;

use crate::rendezvous::RendezvousClient;
use crate::scripting::{bind_parameters, ResolvedStep, Script, ScriptError};
pub use clock::{Clock, RealClock, VirtualClock};
pub use transport::{Exchange, HttpTransport, MockTransport, RequestError, Session, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
        }
    }
}

/// One timed transaction execution by one vuser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub run_id: String,
    pub group: String,
    pub vuser_id: u64,
    pub iteration: u64,
    pub transaction: String,
    /// Monotonic clock of the generating vuser.
    pub start_ns: u64,
    pub end_ns: u64,
    pub wall_start_ms: u64,
    pub status: Status,
    /// TCP connect time spent inside the transaction; the only network-delay
    /// indicator recorded.
    pub connect_ns: u64,
}

impl TransactionRecord {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }

    pub fn duration_ms(&self) -> f64 {
        self.duration_ns() as f64 / 1e6
    }

    /// Wall-clock completion time, derived from the monotonic duration.
    pub fn wall_end_ms(&self) -> f64 {
        self.wall_start_ms as f64 + self.duration_ms()
    }
}

#[derive(Debug, Clone)]
pub struct VuserContext {
    pub run_id: Arc<str>,
    pub group: Arc<str>,
    pub vuser_id: u64,
    pub iteration: u64,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum VuserError {
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("rendezvous failed: {0}")]
    Rendezvous(#[from] crate::rendezvous::RendezvousError),
}

/// The run was stopped; `records` holds the transactions completed before it.
#[derive(Debug)]
pub struct Aborted {
    pub records: Vec<TransactionRecord>,
}

/// Shared handles a vuser needs to execute.
#[derive(Clone)]
pub struct VuserDeps {
    pub transport: Arc<dyn Transport>,
    pub clock: Arc<dyn Clock>,
    pub rendezvous: Arc<dyn RendezvousClient>,
    /// Hard stop: in-flight work is abandoned.
    pub abort: CancellationToken,
    /// Soft stop: the current iteration finishes, no new one starts.
    pub stop: CancellationToken,
}

struct OpenTransaction {
    name: String,
    start_ns: u64,
    wall_start_ms: u64,
    failed: bool,
    connect_ns: u64,
}

/// Executes one iteration's resolved steps in order.
///
/// A request that fails its status assertion fails every open transaction
/// and execution continues. A request that errors also fails them, then
/// skips ahead to the innermost open transaction's end marker; transaction
/// pairs inside the skipped region still produce (zero-length, FAIL) records
/// so every iteration yields the same number of records. A request outside
/// any transaction is timed as `_step<index>`.
pub async fn execute_script(
    steps: &[ResolvedStep],
    ctx: &VuserContext,
    session: &mut dyn Session,
    clock: &dyn Clock,
    rendezvous: &dyn RendezvousClient,
    abort: &CancellationToken,
) -> Result<Vec<TransactionRecord>, Aborted> {
    let mut records = Vec::new();
    let mut open: Vec<OpenTransaction> = Vec::new();
    // Depth of the transaction being skipped to after a request error.
    let mut skip_to_depth: Option<usize> = None;

    let record = |tx: OpenTransaction, end_ns: u64, name: &str| TransactionRecord {
        run_id: ctx.run_id.to_string(),
        group: ctx.group.to_string(),
        vuser_id: ctx.vuser_id,
        iteration: ctx.iteration,
        transaction: name.to_string(),
        start_ns: tx.start_ns,
        end_ns: end_ns.max(tx.start_ns),
        wall_start_ms: tx.wall_start_ms,
        status: if tx.failed { Status::Fail } else { Status::Pass },
        connect_ns: tx.connect_ns,
    };

    for (index, step) in steps.iter().enumerate() {
        if abort.is_cancelled() {
            return Err(Aborted { records });
        }
        match step {
            ResolvedStep::StartTransaction(name) => open.push(OpenTransaction {
                name: name.clone(),
                start_ns: clock.now_ns(),
                wall_start_ms: clock.wall_ms(),
                failed: skip_to_depth.is_some(),
                connect_ns: 0,
            }),
            ResolvedStep::EndTransaction(name) => {
                let end_ns = clock.now_ns();
                let Some(tx) = open.pop() else { continue };
                debug_assert_eq!(&tx.name, name);
                let name = tx.name.clone();
                records.push(record(tx, end_ns, &name));
                if skip_to_depth == Some(open.len()) {
                    skip_to_depth = None;
                }
            }
            _ if skip_to_depth.is_some() => {}
            ResolvedStep::Think(duration) => {
                tokio::select! {
                    _ = clock.sleep(*duration) => {}
                    _ = abort.cancelled() => return Err(Aborted { records }),
                }
            }
            ResolvedStep::Rendezvous(name) => {
                tokio::select! {
                    res = rendezvous.arrive(ctx.vuser_id, name) => {
                        if let Err(err) = res {
                            tracing::warn!(vuser = ctx.vuser_id, %name, %err, "rendezvous unavailable; continuing");
                        }
                    }
                    _ = abort.cancelled() => return Err(Aborted { records }),
                }
            }
            ResolvedStep::Request(request) => {
                let implicit = open.is_empty().then(|| OpenTransaction {
                    name: format!("_step{index}"),
                    start_ns: clock.now_ns(),
                    wall_start_ms: clock.wall_ms(),
                    failed: false,
                    connect_ns: 0,
                });
                let outcome = tokio::select! {
                    res = session.send(request) => res,
                    _ = abort.cancelled() => return Err(Aborted { records }),
                };
                let end_ns = clock.now_ns();
                let (failed, connect_ns, errored) = match &outcome {
                    Ok(ex) => (!request.accepts(ex.status), ex.connect.as_nanos() as u64, false),
                    Err(err) => {
                        tracing::debug!(vuser = ctx.vuser_id, %err, url = %request.url, "request failed");
                        (true, 0, true)
                    }
                };
                match implicit {
                    Some(mut tx) => {
                        tx.failed = failed;
                        tx.connect_ns = connect_ns;
                        let name = tx.name.clone();
                        records.push(record(tx, end_ns, &name));
                    }
                    None => {
                        for tx in &mut open {
                            tx.failed |= failed;
                            tx.connect_ns += connect_ns;
                        }
                        if errored {
                            skip_to_depth = Some(open.len() - 1);
                        }
                    }
                }
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    Iterations(u64),
    /// Start no iteration once the vuser clock reaches this many nanoseconds.
    UntilNs(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoopSummary {
    pub iterations: u64,
    pub records: u64,
    pub aborted: bool,
}

/// Runs a vuser's iterations, sending each record to `sink` as its
/// iteration completes. Each iteration binds parameters afresh and opens a
/// new transport session (fresh connections, empty cookie jar). With pacing
/// `p`, iteration `k` starts no earlier than loop start + `k * p`.
pub async fn run_vuser_loop(
    script: &Script,
    mut ctx: VuserContext,
    mode: LoopMode,
    pacing: Duration,
    deps: &VuserDeps,
    sink: &mpsc::UnboundedSender<TransactionRecord>,
) -> Result<LoopSummary, VuserError> {
    let clock = deps.clock.as_ref();
    let loop_start = clock.now_ns();
    let mut summary = LoopSummary::default();
    let emit = |records: Vec<TransactionRecord>, summary: &mut LoopSummary| {
        summary.records += records.len() as u64;
        for r in records {
            // A closed sink means the collector is gone; nothing left to do.
            let _ = sink.send(r);
        }
    };
    for k in 0.. {
        match mode {
            LoopMode::Iterations(n) if k >= n => break,
            LoopMode::UntilNs(deadline) if clock.now_ns() >= deadline => break,
            _ => {}
        }
        if deps.abort.is_cancelled() {
            summary.aborted = true;
            break;
        }
        if deps.stop.is_cancelled() {
            break;
        }
        let pace_target = loop_start + pacing.as_nanos() as u64 * k;
        let now = clock.now_ns();
        if pace_target > now {
            tokio::select! {
                _ = clock.sleep(Duration::from_nanos(pace_target - now)) => {}
                _ = deps.abort.cancelled() => {
                    summary.aborted = true;
                    break;
                }
                _ = deps.stop.cancelled() => break,
            }
            if let LoopMode::UntilNs(deadline) = mode {
                if clock.now_ns() >= deadline {
                    break;
                }
            }
        }
        ctx.iteration = k;
        let steps = bind_parameters(script, ctx.vuser_id, k, ctx.seed)?;
        let mut session = deps.transport.session(ctx.vuser_id);
        let result = execute_script(
            &steps,
            &ctx,
            session.as_mut(),
            clock,
            deps.rendezvous.as_ref(),
            &deps.abort,
        )
        .await;
        summary.iterations += 1;
        match result {
            Ok(records) => emit(records, &mut summary),
            Err(Aborted { records }) => {
                emit(records, &mut summary);
                summary.aborted = true;
                break;
            }
        }
    }
    Ok(summary)
}
