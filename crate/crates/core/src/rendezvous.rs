//! Rendezvous points: named barriers that hold arriving vusers and release
//! them together.
//!
//! [`Coordinator`] is a pure state machine over (waiting sets, running
//! population, policies, clock). Callers feed it arrivals, vuser start/stop
//! events and timer expirations through one serialized queue and act on the
//! [`Release`]s it returns. [`LocalHub`] wraps it in a task for in-process
//! use; the controller drives it directly from its event loop.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::time::Instant;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RendezvousError {
    #[error("unknown rendezvous {0:?}")]
    UnknownRendezvous(String),
    #[error("invalid rendezvous policy {name:?}: {reason}")]
    InvalidPolicy { name: String, reason: String },
    #[error("rendezvous coordinator is gone")]
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quorum {
    All,
    Fraction(f64),
    Count(u32),
}

impl Quorum {
    /// Arrivals needed to release, given the current running population.
    pub fn required(self, population: usize) -> usize {
        let need = match self {
            Quorum::All => population,
            Quorum::Fraction(f) => (f * population as f64 - 1e-9).ceil() as usize,
            Quorum::Count(k) => (k as usize).min(population),
        };
        need.max(1)
    }
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

fn default_enabled() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RendezvousPolicy {
    pub quorum: Quorum,
    /// Restarts at every arrival.
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_enabled")]
    pub enabled: bool,
}

impl RendezvousPolicy {
    pub fn all(timeout_ms: u64) -> Self {
        RendezvousPolicy {
            quorum: Quorum::All,
            timeout_ms,
            enabled: true,
        }
    }

    pub fn validate(&self, name: &str) -> Result<(), RendezvousError> {
        let bad = |reason: &str| {
            Err(RendezvousError::InvalidPolicy {
                name: name.to_string(),
                reason: reason.to_string(),
            })
        };
        match self.quorum {
            Quorum::Fraction(f) if !(f > 0.0 && f <= 1.0) => return bad("fraction must be in (0, 1]"),
            Quorum::Count(0) => return bad("count must be at least 1"),
            _ => {}
        }
        if self.timeout_ms == 0 {
            return bad("timeout must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Release {
    pub name: String,
    /// Ascending vuser ids.
    pub cohort: Vec<u64>,
    /// Coordinator clock, nanoseconds.
    pub at_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Held,
    Released(Release),
}

#[derive(Debug)]
struct Point {
    policy: RendezvousPolicy,
    groups: BTreeSet<String>,
    waiting: BTreeSet<u64>,
    last_arrival_ns: Option<u64>,
}

impl Point {
    fn deadline(&self) -> Option<u64> {
        if self.waiting.is_empty() {
            return None;
        }
        self.last_arrival_ns
            .map(|t| t + self.policy.timeout_ms * 1_000_000)
    }
}

#[derive(Debug, Default)]
pub struct Coordinator {
    points: BTreeMap<String, Point>,
    running: HashMap<u64, String>,
    population: HashMap<String, usize>,
}

impl Coordinator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a rendezvous point and the vuser groups whose scripts
    /// reference it.
    pub fn register(
        &mut self,
        name: &str,
        policy: RendezvousPolicy,
        groups: impl IntoIterator<Item = String>,
    ) -> Result<(), RendezvousError> {
        policy.validate(name)?;
        self.points.insert(
            name.to_string(),
            Point {
                policy,
                groups: groups.into_iter().collect(),
                waiting: BTreeSet::new(),
                last_arrival_ns: None,
            },
        );
        Ok(())
    }

    pub fn is_registered(&self, name: &str) -> bool {
        self.points.contains_key(name)
    }

    pub fn vuser_started(&mut self, vuser: u64, group: &str) {
        if self.running.insert(vuser, group.to_string()).is_none() {
            *self.population.entry(group.to_string()).or_default() += 1;
        }
    }

    /// Removes a vuser from the running population and from any waiting set;
    /// the smaller population can satisfy a quorum.
    pub fn vuser_stopped(&mut self, vuser: u64, now_ns: u64) -> Vec<Release> {
        if let Some(group) = self.running.remove(&vuser) {
            if let Some(n) = self.population.get_mut(&group) {
                *n = n.saturating_sub(1);
            }
        }
        let names: Vec<String> = self.points.keys().cloned().collect();
        let mut releases = Vec::new();
        for name in names {
            let point = self.points.get_mut(&name).expect("listed");
            point.waiting.remove(&vuser);
            if !point.waiting.is_empty() {
                if let Some(r) = self.try_release(&name, now_ns) {
                    releases.push(r);
                }
            }
        }
        releases
    }

    pub fn population_for(&self, name: &str) -> usize {
        self.points
            .get(name)
            .map(|p| p.groups.iter().map(|g| self.population.get(g).copied().unwrap_or(0)).sum())
            .unwrap_or(0)
    }

    pub fn waiting(&self, name: &str) -> usize {
        self.points.get(name).map_or(0, |p| p.waiting.len())
    }

    pub fn arrive(&mut self, vuser: u64, name: &str, now_ns: u64) -> Result<Decision, RendezvousError> {
        let point = self
            .points
            .get_mut(name)
            .ok_or_else(|| RendezvousError::UnknownRendezvous(name.to_string()))?;
        if !point.policy.enabled {
            return Ok(Decision::Released(Release {
                name: name.to_string(),
                cohort: vec![vuser],
                at_ns: now_ns,
            }));
        }
        point.waiting.insert(vuser);
        point.last_arrival_ns = Some(now_ns);
        Ok(match self.try_release(name, now_ns) {
            Some(release) => Decision::Released(release),
            None => Decision::Held,
        })
    }

    /// Releases every point whose inter-arrival timer has run out by `now_ns`.
    pub fn expire(&mut self, now_ns: u64) -> Vec<Release> {
        let due: Vec<String> = self
            .points
            .iter()
            .filter(|(_, p)| p.deadline().is_some_and(|d| d <= now_ns))
            .map(|(n, _)| n.clone())
            .collect();
        due.into_iter()
            .filter_map(|name| self.release_all(&name, now_ns))
            .collect()
    }

    /// Earliest pending timer deadline, if any vuser is held.
    pub fn next_deadline(&self) -> Option<u64> {
        self.points.values().filter_map(Point::deadline).min()
    }

    fn try_release(&mut self, name: &str, now_ns: u64) -> Option<Release> {
        let population = self.population_for(name);
        let point = self.points.get(name)?;
        // Arrivals from vusers the coordinator was not told about still count
        // toward the population they are part of.
        let population = population.max(point.waiting.len());
        if point.waiting.len() >= point.policy.quorum.required(population) {
            self.release_all(name, now_ns)
        } else {
            None
        }
    }

    fn release_all(&mut self, name: &str, now_ns: u64) -> Option<Release> {
        let point = self.points.get_mut(name)?;
        if point.waiting.is_empty() {
            return None;
        }
        let cohort: Vec<u64> = std::mem::take(&mut point.waiting).into_iter().collect();
        point.last_arrival_ns = None;
        Some(Release {
            name: name.to_string(),
            cohort,
            at_ns: now_ns,
        })
    }
}

/// What a vuser calls when it reaches a rendezvous step.
#[async_trait]
pub trait RendezvousClient: Send + Sync {
    async fn arrive(&self, vuser_id: u64, name: &str) -> Result<(), RendezvousError>;
}

/// Releases every arrival immediately; for scripts without rendezvous steps.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoRendezvous;

#[async_trait]
impl RendezvousClient for NoRendezvous {
    async fn arrive(&self, _vuser_id: u64, _name: &str) -> Result<(), RendezvousError> {
        Ok(())
    }
}

enum HubEvent {
    Arrive {
        vuser: u64,
        name: String,
        reply: oneshot::Sender<Result<(), RendezvousError>>,
    },
    Started(u64, String),
    Stopped(u64),
}

/// An in-process coordinator service: one task serializes every event.
pub struct LocalHub {
    events: mpsc::UnboundedSender<HubEvent>,
    releases: Arc<parking_lot::Mutex<Vec<Release>>>,
}

impl LocalHub {
    pub fn spawn(coordinator: Coordinator) -> Arc<Self> {
        let (tx, rx) = mpsc::unbounded_channel();
        let releases = Arc::new(parking_lot::Mutex::new(Vec::new()));
        tokio::spawn(hub_loop(coordinator, rx, releases.clone()));
        Arc::new(LocalHub { events: tx, releases })
    }

    pub fn vuser_started(&self, vuser: u64, group: &str) {
        let _ = self.events.send(HubEvent::Started(vuser, group.to_string()));
    }

    pub fn vuser_stopped(&self, vuser: u64) {
        let _ = self.events.send(HubEvent::Stopped(vuser));
    }

    pub fn releases(&self) -> Vec<Release> {
        self.releases.lock().clone()
    }
}

#[async_trait]
impl RendezvousClient for LocalHub {
    async fn arrive(&self, vuser_id: u64, name: &str) -> Result<(), RendezvousError> {
        let (reply, wait) = oneshot::channel();
        self.events
            .send(HubEvent::Arrive {
                vuser: vuser_id,
                name: name.to_string(),
                reply,
            })
            .map_err(|_| RendezvousError::Disconnected)?;
        wait.await.map_err(|_| RendezvousError::Disconnected)?
    }
}

async fn hub_loop(
    mut coordinator: Coordinator,
    mut events: mpsc::UnboundedReceiver<HubEvent>,
    log: Arc<parking_lot::Mutex<Vec<Release>>>,
) {
    let epoch = Instant::now();
    let now_ns = || epoch.elapsed().as_nanos() as u64;
    let mut held: HashMap<u64, oneshot::Sender<Result<(), RendezvousError>>> = HashMap::new();
    let deliver = |releases: Vec<Release>, held: &mut HashMap<u64, oneshot::Sender<Result<(), RendezvousError>>>| {
        for release in releases {
            for vuser in &release.cohort {
                if let Some(reply) = held.remove(vuser) {
                    let _ = reply.send(Ok(()));
                }
            }
            log.lock().push(release);
        }
    };
    loop {
        let timer = coordinator
            .next_deadline()
            .map(|ns| epoch + Duration::from_nanos(ns));
        let event = tokio::select! {
            event = events.recv() => match event {
                Some(e) => e,
                None => return,
            },
            _ = sleep_until_opt(timer) => {
                let releases = coordinator.expire(now_ns());
                deliver(releases, &mut held);
                continue;
            }
        };
        match event {
            HubEvent::Arrive { vuser, name, reply } => match coordinator.arrive(vuser, &name, now_ns()) {
                Ok(Decision::Held) => {
                    held.insert(vuser, reply);
                }
                Ok(Decision::Released(release)) => {
                    held.insert(vuser, reply);
                    deliver(vec![release], &mut held);
                }
                Err(err) => {
                    let _ = reply.send(Err(err));
                }
            },
            HubEvent::Started(vuser, group) => coordinator.vuser_started(vuser, &group),
            HubEvent::Stopped(vuser) => {
                let releases = coordinator.vuser_stopped(vuser, now_ns());
                held.remove(&vuser);
                deliver(releases, &mut held);
            }
        }
    }
}

pub(crate) async fn sleep_until_opt(deadline: Option<Instant>) {
    match deadline {
        Some(d) => tokio::time::sleep_until(d).await,
        None => std::future::pending().await,
    }
}
