use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rendezvous::{RendezvousError, RendezvousPolicy};
use crate::scripting::{load_script, Script, ScriptError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario syntax error: {0}")]
    Syntax(String),
    #[error("group {group}: missing script {path}: {reason}")]
    MissingScript { group: String, path: PathBuf, reason: String },
    #[error("group {group}: invalid script: {source}")]
    InvalidScript {
        group: String,
        #[source]
        source: ScriptError,
    },
    #[error("unknown rendezvous {0}: not declared in the scenario's policy map")]
    UnknownRendezvous(String),
    #[error(transparent)]
    InvalidRendezvous(#[from] RendezvousError),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("step-load schedule has no levels")]
    EmptySchedule,
    #[error("scenario has zero vusers")]
    EmptyScenario,
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn default_generator() -> String {
    "default".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    /// Script path, relative to the scenario file.
    pub script: String,
    pub vusers: u64,
    #[serde(default = "default_generator")]
    pub generator: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ramp {
    pub initial: u64,
    pub step_size: u64,
    pub step_interval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLoad {
    pub levels: Vec<u64>,
    pub hold_ms: u64,
}

impl StepLoad {
    /// Discarded head of each level: 10% of the hold, at least 1s, never
    /// more than the hold itself.
    pub fn warmup_ms(&self) -> u64 {
        (self.hold_ms / 10).max(1000).min(self.hold_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    DurationMs(u64),
    Iterations(u64),
    StepLoad(StepLoad),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp: Option<Ramp>,
    pub mode: RunMode,
    #[serde(default)]
    pub pacing_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorSpec {
    pub interval_ms: u64,
    /// `"local"` or agent `host:port` addresses.
    pub hosts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub target: String,
    #[serde(default)]
    pub seed: u64,
    pub groups: Vec<Group>,
    pub schedule: Schedule,
    #[serde(default)]
    pub rendezvous: BTreeMap<String, RendezvousPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitor: Option<MonitorSpec>,
    /// Parsed scripts keyed by the groups' `script` field.
    #[serde(skip)]
    pub scripts: BTreeMap<String, Script>,
}

/// Reads a scenario file, loads every referenced script relative to it and
/// validates the whole thing.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_scenario(&text, base)
}

pub fn parse_scenario(text: &str, base_dir: &Path) -> Result<Scenario, ScenarioError> {
    let mut scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Syntax(e.to_string()))?;
    for group in &scenario.groups {
        if scenario.scripts.contains_key(&group.script) {
            continue;
        }
        let path = base_dir.join(&group.script);
        let script = load_script(&path).map_err(|err| match err {
            ScriptError::Io { source, .. } => ScenarioError::MissingScript {
                group: group.name.clone(),
                path: path.clone(),
                reason: source.to_string(),
            },
            other => ScenarioError::InvalidScript { group: group.name.clone(), source: other },
        })?;
        scenario.scripts.insert(group.script.clone(), script);
    }
    scenario.validate()?;
    Ok(scenario)
}

impl Scenario {
    pub fn new(name: impl Into<String>, target: impl Into<String>, mode: RunMode) -> Self {
        Scenario {
            name: name.into(),
            target: target.into(),
            seed: 0,
            groups: Vec::new(),
            schedule: Schedule { ramp: None, mode, pacing_ms: 0 },
            rendezvous: BTreeMap::new(),
            monitor: None,
            scripts: BTreeMap::new(),
        }
    }

    /// Adds a group running an in-memory script, registered under the
    /// script's name.
    pub fn with_group(mut self, name: &str, script: Script, vusers: u64, generator: &str) -> Self {
        self.groups.push(Group {
            name: name.to_string(),
            script: script.name.clone(),
            vusers,
            generator: generator.to_string(),
        });
        self.scripts.insert(script.name.clone(), script);
        self
    }

    pub fn with_rendezvous(mut self, name: &str, policy: RendezvousPolicy) -> Self {
        self.rendezvous.insert(name.to_string(), policy);
        self
    }

    pub fn total_vusers(&self) -> u64 {
        self.groups.iter().map(|g| g.vusers).sum()
    }

    pub fn script_for(&self, group: &Group) -> Option<&Script> {
        self.scripts.get(&group.script)
    }

    pub fn generator_tags(&self) -> BTreeSet<&str> {
        self.groups.iter().map(|g| g.generator.as_str()).collect()
    }

    /// Groups whose script steps through `rendezvous`.
    pub fn groups_referencing(&self, rendezvous: &str) -> Vec<String> {
        self.groups
            .iter()
            .filter(|g| self.script_for(g).is_some_and(|s| s.rendezvous_names().contains(rendezvous)))
            .map(|g| g.name.clone())
            .collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.total_vusers() == 0 {
            return Err(ScenarioError::EmptyScenario);
        }
        let mut names = BTreeSet::new();
        for g in &self.groups {
            if !names.insert(g.name.as_str()) {
                return Err(ScenarioError::Invalid(format!("duplicate group {}", g.name)));
            }
            let script = self.script_for(g).ok_or_else(|| ScenarioError::MissingScript {
                group: g.name.clone(),
                path: PathBuf::from(&g.script),
                reason: "not loaded".into(),
            })?;
            script
                .validate()
                .map_err(|source| ScenarioError::InvalidScript { group: g.name.clone(), source })?;
            for rdv in script.rendezvous_names() {
                if !self.rendezvous.contains_key(rdv) {
                    return Err(ScenarioError::UnknownRendezvous(rdv.to_string()));
                }
            }
        }
        for (name, policy) in &self.rendezvous {
            policy.validate(name)?;
        }
        let total = self.total_vusers();
        match &self.schedule.mode {
            RunMode::DurationMs(0) => return Err(ScenarioError::InvalidSchedule("duration_ms must be positive".into())),
            RunMode::Iterations(0) => return Err(ScenarioError::InvalidSchedule("iterations must be at least 1".into())),
            RunMode::StepLoad(step) => {
                if step.levels.is_empty() {
                    return Err(ScenarioError::EmptySchedule);
                }
                if step.hold_ms == 0 {
                    return Err(ScenarioError::InvalidSchedule("hold_ms must be positive".into()));
                }
                if step.levels[0] == 0 || step.levels.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(ScenarioError::InvalidSchedule(format!(
                        "step-load levels must be positive and strictly ascending, got {:?}",
                        step.levels
                    )));
                }
                let top = *step.levels.last().expect("non-empty");
                if top > total {
                    return Err(ScenarioError::InvalidSchedule(format!(
                        "top level {top} exceeds the {total} vusers the groups provide"
                    )));
                }
            }
            _ => {}
        }
        if let Some(ramp) = &self.schedule.ramp {
            schedule_ramp(ramp, total)?;
        }
        if let Some(m) = &self.monitor {
            if m.interval_ms < crate::monitor::MIN_INTERVAL_MS {
                return Err(ScenarioError::Invalid(format!("monitor interval {}ms below 100ms", m.interval_ms)));
            }
        }
        Ok(())
    }
}

/// Ramp law: `(0, initial)`, then `(k * interval, step_size)` until `target`
/// vusers have started, the last step clamped.
pub fn schedule_ramp(ramp: &Ramp, target: u64) -> Result<Vec<(u64, u64)>, ScenarioError> {
    if ramp.initial > target {
        return Err(ScenarioError::InvalidSchedule(format!(
            "ramp initial {} exceeds target {target}",
            ramp.initial
        )));
    }
    let mut events = vec![(0, ramp.initial)];
    let mut started = ramp.initial;
    let mut k = 1;
    while started < target {
        if ramp.step_interval_ms == 0 || ramp.step_size == 0 {
            return Err(ScenarioError::InvalidSchedule(
                "ramp needs a positive step_size and step_interval_ms to reach the target".into(),
            ));
        }
        let n = ramp.step_size.min(target - started);
        events.push((k * ramp.step_interval_ms, n));
        started += n;
        k += 1;
    }
    Ok(events)
}

/// A generator as seen by the assignment step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentInfo {
    pub tag: String,
    pub address: String,
    pub capacity: u64,
}

/// `count` vusers of `group` on `agents[agent]`, ids `first_id..first_id+count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub agent: usize,
    pub group: String,
    pub first_id: u64,
    pub count: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AssignError {
    #[error("no connected agent has generator tag {0}")]
    NoAgentForTag(String),
    #[error("agent {address} assigned {assigned} vusers but has capacity {capacity}")]
    CapacityExceeded { address: String, assigned: u64, capacity: u64 },
}

/// Splits each group evenly over the agents carrying its generator tag, the
/// remainder going to the lowest addresses, and hands out contiguous id
/// blocks group by group.
pub fn assign_vusers(groups: &[Group], agents: &[AgentInfo]) -> Result<Vec<Assignment>, AssignError> {
    let mut next_id = 0;
    let mut load = vec![0u64; agents.len()];
    let mut out = Vec::new();
    for group in groups {
        let mut matching: Vec<usize> = (0..agents.len()).filter(|&i| agents[i].tag == group.generator).collect();
        if matching.is_empty() {
            if group.vusers == 0 {
                continue;
            }
            return Err(AssignError::NoAgentForTag(group.generator.clone()));
        }
        matching.sort_by(|&a, &b| agents[a].address.cmp(&agents[b].address));
        let m = matching.len() as u64;
        for (rank, &agent) in matching.iter().enumerate() {
            let count = group.vusers / m + u64::from((rank as u64) < group.vusers % m);
            if count == 0 {
                continue;
            }
            out.push(Assignment { agent, group: group.name.clone(), first_id: next_id, count });
            next_id += count;
            load[agent] += count;
        }
    }
    for (i, agent) in agents.iter().enumerate() {
        if load[i] > agent.capacity {
            return Err(AssignError::CapacityExceeded {
                address: agent.address.clone(),
                assigned: load[i],
                capacity: agent.capacity,
            });
        }
    }
    Ok(out)
}

/// Global vuser start order: round-robin over the assignment blocks so
/// every ramp step spreads across agents and groups.
pub fn start_order(assignments: &[Assignment]) -> Vec<u64> {
    let longest = assignments.iter().map(|a| a.count).max().unwrap_or(0);
    let mut order = Vec::new();
    for j in 0..longest {
        for a in assignments {
            if j < a.count {
                order.push(a.first_id + j);
            }
        }
    }
    order
}
