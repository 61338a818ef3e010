//! Scenario orchestration: assignment, ramp and step-load scheduling,
//! rendezvous coordination and lossless metric collection over the fleet
//! protocol.

pub mod agent;
pub mod fleet;
pub mod protocol;
mod scenario;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use futures::stream::SplitSink;
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

pub use agent::{AgentConfig, AgentError, AgentOutcome};
pub use fleet::{connect_agent, spawn_local_agent, AgentLink, FleetError};
pub use scenario::{
    assign_vusers, load_scenario, parse_scenario, schedule_ramp, start_order, AgentInfo, AssignError, Assignment,
    Group, MonitorSpec, Ramp, RunMode, Scenario, ScenarioError, Schedule, StepLoad,
};

use crate::analysis::{LevelWindow, ReportMeta, RunReport, StatsMap, Window};
use crate::monitor::{attach_monitor, CounterSample, CounterStore, MonitorTarget};
use crate::rendezvous::{Coordinator, Decision, Release, RendezvousError};
use crate::runtime::clock::unix_ms;
use crate::runtime::{Status, TransactionRecord, Transport};
use protocol::{AgentMode, AgentSchedule, Binding, Message, ProtocolError, StartEvent, Wire};

pub const GRACE_MS: u64 = 5000;
pub const BATCH_INTERVAL_MS: u64 = 1000;
pub const BATCH_MAX: usize = 500;
/// How long survivors get to flush after an agent is lost.
const DRAIN_AFTER_LOSS: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Invalid(#[from] ScenarioError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error("run mode is not step_load")]
    NotStepLoad,
    #[error("agent {address}: {source}")]
    Protocol {
        address: String,
        #[source]
        source: ProtocolError,
    },
    #[error("agent {address} lost mid-run ({reason}); partial results kept")]
    AgentLost {
        address: String,
        reason: String,
        result: Box<RunResult>,
    },
}

impl RunError {
    /// Validation problems exit with 1, runtime failures with 2.
    pub fn is_validation(&self) -> bool {
        matches!(self, RunError::Invalid(_) | RunError::Assign(_) | RunError::NotStepLoad)
    }
}

/// Settings for in-process agents plus run-wide hooks.
#[derive(Clone, Default)]
pub struct RunOptions {
    /// Replaces HTTP for local agents (e.g. a mock transport).
    pub transport: Option<Arc<dyn Transport>>,
    /// Runs local vusers on virtual clocks anchored at this wall time.
    pub virtual_epoch_ms: Option<u64>,
    /// Receives each accepted record batch as it arrives.
    pub sink: Option<mpsc::UnboundedSender<Vec<TransactionRecord>>>,
    /// Soft stop: agents finish in-flight iterations and report.
    pub stop: CancellationToken,
}

impl RunOptions {
    pub fn mock(transport: Arc<dyn Transport>, virtual_epoch_ms: u64) -> Self {
        RunOptions {
            transport: Some(transport),
            virtual_epoch_ms: Some(virtual_epoch_ms),
            ..Default::default()
        }
    }
}

/// One in-process agent per generator tag in the scenario, with unlimited
/// capacity.
pub async fn spawn_local_fleet(scenario: &Scenario, options: &RunOptions) -> Result<Vec<AgentLink>, FleetError> {
    let mut links = Vec::new();
    for tag in scenario.generator_tags() {
        let mut config = AgentConfig::new(tag, u64::MAX);
        config.transport = options.transport.clone();
        config.virtual_epoch_ms = options.virtual_epoch_ms;
        links.push(spawn_local_agent(config).await?);
    }
    Ok(links)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentState {
    Connected,
    Running,
    Finished,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStatus {
    pub tag: String,
    pub address: String,
    pub assigned: u64,
    pub state: AgentState,
    pub batches: u64,
    pub records: u64,
    pub duplicate_batches: u64,
    /// Every METRIC_BATCH seq received, in arrival order.
    pub received_seqs: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub scenario: String,
    pub seed: u64,
    pub started_ms: u64,
    pub ended_ms: u64,
    pub partial: bool,
    pub pass: u64,
    pub fail: u64,
    pub agents: Vec<AgentStatus>,
    pub releases: Vec<Release>,
    pub levels: Vec<LevelWindow>,
    pub omitted_counters: Vec<String>,
    #[serde(skip)]
    pub records: Vec<TransactionRecord>,
    #[serde(skip)]
    pub counters: Vec<CounterSample>,
}

impl RunResult {
    pub fn report_meta(&self) -> ReportMeta {
        ReportMeta {
            run_id: self.run_id.clone(),
            scenario: self.scenario.clone(),
            seed: self.seed,
            partial: self.partial,
            levels: self.levels.clone(),
        }
    }

    pub fn report(&self) -> RunReport {
        RunReport::build(self.report_meta(), self.records.clone(), self.counters.clone())
    }
}

pub fn run_id(scenario: &Scenario) -> String {
    format!("{}-{:016x}", scenario.name, scenario.seed)
}

struct Plan {
    bindings: Vec<Vec<Binding>>,
    schedules: Vec<AgentSchedule>,
    owner: HashMap<u64, usize>,
    assigned: Vec<u64>,
}

fn plan(scenario: &Scenario, agents: &[AgentLink]) -> Result<Plan, RunError> {
    let infos: Vec<AgentInfo> = agents
        .iter()
        .map(|a| AgentInfo { tag: a.tag.clone(), address: a.address.clone(), capacity: a.capacity })
        .collect();
    let assignments = assign_vusers(&scenario.groups, &infos)?;
    let script_of: BTreeMap<&str, &str> = scenario.groups.iter().map(|g| (g.name.as_str(), g.script.as_str())).collect();

    let mut bindings = vec![Vec::new(); agents.len()];
    let mut assigned = vec![0; agents.len()];
    let mut owner = HashMap::new();
    for a in &assignments {
        bindings[a.agent].push(Binding {
            group: a.group.clone(),
            script: script_of[a.group.as_str()].to_string(),
            first_id: a.first_id,
            count: a.count,
        });
        assigned[a.agent] += a.count;
        for id in a.first_id..a.first_id + a.count {
            owner.insert(id, a.agent);
        }
    }

    let order = start_order(&assignments);
    let (steps, mode): (Vec<(u64, u64)>, AgentMode) = match &scenario.schedule.mode {
        RunMode::StepLoad(step) => {
            let mut prev = 0;
            let steps = step
                .levels
                .iter()
                .enumerate()
                .map(|(i, &level)| {
                    let add = level - prev;
                    prev = level;
                    (i as u64 * step.hold_ms, add)
                })
                .collect();
            (steps, AgentMode::UntilMs(step.levels.len() as u64 * step.hold_ms))
        }
        other => {
            let total = scenario.total_vusers();
            let steps = match &scenario.schedule.ramp {
                Some(ramp) => schedule_ramp(ramp, total)?,
                None => vec![(0, total)],
            };
            let mode = match other {
                RunMode::DurationMs(ms) => AgentMode::UntilMs(*ms),
                RunMode::Iterations(n) => AgentMode::Iterations(*n),
                RunMode::StepLoad(_) => unreachable!(),
            };
            (steps, mode)
        }
    };

    let mut starts: Vec<Vec<StartEvent>> = vec![Vec::new(); agents.len()];
    let mut cursor = order.iter();
    for (offset_ms, n) in steps {
        let mut per_agent: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for &id in cursor.by_ref().take(n as usize) {
            per_agent.entry(owner[&id]).or_default().push(id);
        }
        for (agent, vusers) in per_agent {
            starts[agent].push(StartEvent { offset_ms, vusers });
        }
    }
    let schedules = starts
        .into_iter()
        .map(|starts| AgentSchedule {
            starts,
            mode,
            pacing_ms: scenario.schedule.pacing_ms,
            grace_ms: GRACE_MS,
            batch_interval_ms: BATCH_INTERVAL_MS,
            batch_max: BATCH_MAX,
        })
        .collect();
    Ok(Plan { bindings, schedules, owner, assigned })
}

fn coordinator_for(scenario: &Scenario) -> Result<Coordinator, ScenarioError> {
    let mut c = Coordinator::new();
    for (name, policy) in &scenario.rendezvous {
        c.register(name, *policy, scenario.groups_referencing(name))?;
    }
    Ok(c)
}

type Sink = SplitSink<Wire, bytes::Bytes>;

struct Link {
    tag: String,
    address: String,
    sink: Sink,
    state: AgentState,
    next_seq: u64,
    records: u64,
    duplicate_batches: u64,
    received_seqs: Vec<u64>,
}

impl Link {
    async fn send(&mut self, msg: &Message) {
        if self.state == AgentState::Lost {
            return;
        }
        if let Err(err) = self.sink.send(protocol::encode(msg)).await {
            tracing::debug!(address = %self.address, %err, "send to agent failed");
        }
    }
}

/// Runs a scenario on connected agents and collects every record and
/// counter sample. Returns `AgentLost` (carrying the partial result) if an
/// agent disconnects before saying BYE.
pub async fn run_scenario(scenario: &Scenario, agents: Vec<AgentLink>, options: RunOptions) -> Result<RunResult, RunError> {
    scenario.validate()?;
    let plan = plan(scenario, &agents)?;
    let mut coordinator = coordinator_for(scenario)?;
    let run_id = run_id(scenario);
    let scripts: BTreeMap<String, String> = scenario
        .scripts
        .iter()
        .map(|(key, script)| (key.clone(), script.to_document()))
        .collect();

    let (events_tx, mut events) = mpsc::unbounded_channel::<(usize, Result<Message, ProtocolError>)>();
    let mut links = Vec::new();
    for (idx, mut agent) in agents.into_iter().enumerate() {
        let bindings = plan.bindings[idx].clone();
        let lo = bindings.iter().map(|b| b.first_id).min().unwrap_or(0);
        let hi = bindings.iter().map(|b| b.first_id + b.count).max().unwrap_or(0);
        let assign = Message::Assign {
            run_id: run_id.clone(),
            target: scenario.target.clone(),
            seed: scenario.seed,
            scripts: bindings.iter().map(|b| (b.script.clone(), scripts[&b.script].clone())).collect(),
            bindings,
            id_block: (lo, hi),
        };
        protocol::send(&mut agent.wire, &assign)
            .await
            .map_err(|source| RunError::Protocol { address: agent.address.clone(), source })?;
        let (sink, mut stream) = agent.wire.split();
        let tx = events_tx.clone();
        tokio::spawn(async move {
            loop {
                let item = match stream.next().await {
                    Some(Ok(frame)) => protocol::decode(&frame),
                    Some(Err(err)) => Err(err.into()),
                    None => Err(ProtocolError::Closed),
                };
                let last = item.is_err() || matches!(item, Ok(Message::Bye));
                if tx.send((idx, item)).is_err() || last {
                    return;
                }
            }
        });
        links.push(Link {
            tag: agent.tag,
            address: agent.address,
            sink,
            state: AgentState::Connected,
            next_seq: 0,
            records: 0,
            duplicate_batches: 0,
            received_seqs: Vec::new(),
        });
    }
    drop(events_tx);

    let store = CounterStore::new();
    let mut monitors = Vec::new();
    if let Some(spec) = &scenario.monitor {
        for host in &spec.hosts {
            match attach_monitor(&store, MonitorTarget::parse(host), Duration::from_millis(spec.interval_ms)).await {
                Ok(handle) => monitors.push(handle),
                Err(err) => tracing::warn!(%host, %err, "monitor not attached; run proceeds"),
            }
        }
    }

    let started_ms = options.virtual_epoch_ms.unwrap_or_else(unix_ms);
    store.mark_started(unix_ms());
    let epoch = Instant::now();
    for (idx, link) in links.iter_mut().enumerate() {
        link.send(&Message::Start { schedule: plan.schedules[idx].clone() }).await;
        link.state = AgentState::Running;
    }

    let now_ns = || epoch.elapsed().as_nanos() as u64;
    let mut records: Vec<TransactionRecord> = Vec::new();
    let mut releases: Vec<Release> = Vec::new();
    let mut lost: Option<(String, String)> = None;
    let mut drain_deadline: Option<Instant> = None;
    let mut stop_sent = false;

    while links.iter().any(|l| l.state == AgentState::Running) {
        let rdv_timer = coordinator.next_deadline().map(|ns| epoch + Duration::from_nanos(ns));
        let mut due: Vec<Release> = Vec::new();
        tokio::select! {
            _ = options.stop.cancelled(), if !stop_sent => {
                stop_sent = true;
                for link in &mut links {
                    link.send(&Message::Stop).await;
                }
            }
            _ = crate::rendezvous::sleep_until_opt(rdv_timer) => {
                due = coordinator.expire(now_ns());
            }
            _ = crate::rendezvous::sleep_until_opt(drain_deadline) => {
                for link in &mut links {
                    if link.state == AgentState::Running {
                        link.state = AgentState::Lost;
                    }
                }
            }
            event = events.recv() => {
                let Some((idx, item)) = event else { break };
                match item {
                    Ok(Message::Vuser { vuser, group, running: true }) => coordinator.vuser_started(vuser, &group),
                    Ok(Message::Vuser { vuser, running: false, .. }) => due = coordinator.vuser_stopped(vuser, now_ns()),
                    Ok(Message::RdvArrive { vuser, name }) => match coordinator.arrive(vuser, &name, now_ns()) {
                        Ok(Decision::Held) => {}
                        Ok(Decision::Released(r)) => due.push(r),
                        Err(err @ RendezvousError::UnknownRendezvous(_)) => {
                            tracing::error!(%err, vuser, "arrival at unregistered rendezvous; releasing");
                            due.push(Release { name, cohort: vec![vuser], at_ns: now_ns() });
                        }
                        Err(err) => tracing::error!(%err, "rendezvous failure"),
                    },
                    Ok(Message::MetricBatch { seq, records: batch, counters }) => {
                        let link = &mut links[idx];
                        link.received_seqs.push(seq);
                        if seq < link.next_seq {
                            link.duplicate_batches += 1;
                        } else if seq > link.next_seq {
                            let reason = format!("METRIC_BATCH gap: expected seq {}, got {seq}", link.next_seq);
                            lose(&mut links, idx, reason, &mut lost, &mut drain_deadline).await;
                        } else {
                            link.next_seq += 1;
                            link.records += batch.len() as u64;
                            store.push(counters);
                            if let Some(sink) = &options.sink {
                                let _ = sink.send(batch.clone());
                            }
                            records.extend(batch);
                        }
                    }
                    Ok(Message::Bye) => {
                        if links[idx].state == AgentState::Running {
                            links[idx].state = AgentState::Finished;
                        }
                    }
                    Ok(other) => tracing::warn!(kind = other.kind(), "unexpected message from agent"),
                    Err(err) => {
                        if links[idx].state == AgentState::Running {
                            lose(&mut links, idx, err.to_string(), &mut lost, &mut drain_deadline).await;
                        }
                    }
                }
            }
        }
        for release in due {
            let mut per_agent: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
            for v in &release.cohort {
                if let Some(&a) = plan.owner.get(v) {
                    per_agent.entry(a).or_default().push(*v);
                }
            }
            for (agent, cohort) in per_agent {
                links[agent]
                    .send(&Message::RdvRelease { name: release.name.clone(), cohort, at_ns: release.at_ns })
                    .await;
            }
            releases.push(release);
        }
    }

    for m in monitors {
        m.detach().await;
    }
    store.finish(unix_ms());
    let ended_ms = match options.virtual_epoch_ms {
        Some(_) => records.iter().map(|r| r.wall_end_ms().ceil() as u64).max().unwrap_or(started_ms),
        None => unix_ms(),
    };

    let levels = match &scenario.schedule.mode {
        RunMode::StepLoad(step) => level_windows(step, started_ms),
        _ => Vec::new(),
    };
    let pass = records.iter().filter(|r| r.status == Status::Pass).count() as u64;
    let result = RunResult {
        run_id,
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        started_ms,
        ended_ms,
        partial: lost.is_some(),
        pass,
        fail: records.len() as u64 - pass,
        agents: links
            .iter()
            .enumerate()
            .map(|(i, l)| AgentStatus {
                tag: l.tag.clone(),
                address: l.address.clone(),
                assigned: plan.assigned[i],
                state: l.state,
                batches: l.next_seq,
                records: l.records,
                duplicate_batches: l.duplicate_batches,
                received_seqs: l.received_seqs.clone(),
            })
            .collect(),
        releases,
        levels,
        omitted_counters: store.omitted(),
        records,
        counters: store.samples(),
    };
    match lost {
        Some((address, reason)) => Err(RunError::AgentLost { address, reason, result: Box::new(result) }),
        None => Ok(result),
    }
}

async fn lose(
    links: &mut [Link],
    idx: usize,
    reason: String,
    lost: &mut Option<(String, String)>,
    drain_deadline: &mut Option<Instant>,
) {
    tracing::error!(address = %links[idx].address, %reason, "agent lost; aborting run");
    links[idx].state = AgentState::Lost;
    if lost.is_none() {
        *lost = Some((links[idx].address.clone(), reason));
        *drain_deadline = Some(Instant::now() + DRAIN_AFTER_LOSS);
        for link in links.iter_mut() {
            link.send(&Message::Abort).await;
        }
    }
}

/// Measurement window per level, in wall ms from run start: the level's
/// hold minus its warm-up head.
pub fn level_windows(step: &StepLoad, started_ms: u64) -> Vec<LevelWindow> {
    step.levels
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let begin = started_ms + i as u64 * step.hold_ms;
            LevelWindow {
                level: level as u32,
                window: Window::new((begin + step.warmup_ms()) as f64, (begin + step.hold_ms) as f64),
            }
        })
        .collect()
}

/// Per-level rows of a step-load run, ascending by level.
#[derive(Debug, Clone)]
pub struct StepLoadReport {
    pub result: RunResult,
    pub rows: Vec<(u32, StatsMap)>,
}

pub async fn run_step_load(
    scenario: &Scenario,
    agents: Vec<AgentLink>,
    options: RunOptions,
) -> Result<StepLoadReport, RunError> {
    if !matches!(scenario.schedule.mode, RunMode::StepLoad(_)) {
        return Err(RunError::NotStepLoad);
    }
    let result = run_scenario(scenario, agents, options).await?;
    let rows = result
        .levels
        .iter()
        .map(|lw| (lw.level, crate::analysis::aggregate(&result.records, &lw.window)))
        .collect();
    Ok(StepLoadReport { result, rows })
}
