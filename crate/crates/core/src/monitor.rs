//! Host resource counters sampled during a run.
//!
//! Counters come from the OS statistics interface (`/proc` on Linux):
//! `available_mbytes` from `MemAvailable`, `pages_per_sec` from the hard
//! page-fault counter (`pgmajfault`) differenced over the tick, and
//! `cpu_percent` from the aggregate `cpu` line of `/proc/stat`. A counter the
//! host cannot provide is omitted, never filled in.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::runtime::clock::unix_ms;

pub const MIN_INTERVAL_MS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Counter {
    AvailableMbytes,
    PagesPerSec,
    CpuPercent,
}

impl Counter {
    pub const ALL: [Counter; 3] = [Counter::AvailableMbytes, Counter::PagesPerSec, Counter::CpuPercent];

    pub fn as_str(self) -> &'static str {
        match self {
            Counter::AvailableMbytes => "available_mbytes",
            Counter::PagesPerSec => "pages_per_sec",
            Counter::CpuPercent => "cpu_percent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Counter::ALL.into_iter().find(|c| c.as_str() == s)
    }

    fn in_range(self, value: f64) -> bool {
        value.is_finite()
            && match self {
                Counter::CpuPercent => (0.0..=100.0).contains(&value),
                _ => value >= 0.0,
            }
    }
}

impl fmt::Display for Counter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterSample {
    pub host: String,
    pub counter: Counter,
    pub timestamp_ms: u64,
    pub value: f64,
}

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("no counter source available on this platform")]
    UnsupportedPlatform,
    #[error("sampling interval {0} ms is below the {MIN_INTERVAL_MS} ms minimum")]
    IntervalTooShort(u64),
    #[error("cannot reach monitor target {target}: {reason}")]
    Connect { target: String, reason: String },
    #[error("run has already finished")]
    StaleRun,
}

/// Cumulative readings taken at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RawReading {
    pub available_kb: Option<u64>,
    pub major_faults: Option<u64>,
    /// (busy jiffies, total jiffies)
    pub cpu: Option<(u64, u64)>,
}

pub trait CounterSource: Send {
    fn read(&mut self) -> RawReading;
}

/// Reads `/proc`-style files under a configurable root.
#[derive(Debug, Clone)]
pub struct ProcSource {
    root: PathBuf,
}

impl ProcSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ProcSource { root: root.into() }
    }

    pub fn system() -> Self {
        Self::new("/proc")
    }

    fn file(&self, name: &str) -> Option<String> {
        std::fs::read_to_string(self.root.join(name)).ok()
    }
}

impl CounterSource for ProcSource {
    fn read(&mut self) -> RawReading {
        let available_kb = self.file("meminfo").and_then(|text| {
            text.lines()
                .find_map(|l| l.strip_prefix("MemAvailable:"))
                .and_then(|rest| rest.split_whitespace().next()?.parse().ok())
        });
        let major_faults = self.file("vmstat").and_then(|text| {
            text.lines()
                .find_map(|l| l.strip_prefix("pgmajfault "))
                .and_then(|v| v.trim().parse().ok())
        });
        let cpu = self.file("stat").and_then(|text| {
            let line = text.lines().find(|l| l.starts_with("cpu "))?;
            let fields: Vec<u64> = line
                .split_whitespace()
                .skip(1)
                .filter_map(|v| v.parse().ok())
                .collect();
            if fields.len() < 4 {
                return None;
            }
            // user nice system idle iowait irq softirq steal [guest guest_nice]
            let counted = &fields[..fields.len().min(8)];
            let total: u64 = counted.iter().sum();
            let idle = fields[3] + fields.get(4).copied().unwrap_or(0);
            Some((total - idle, total))
        });
        RawReading {
            available_kb,
            major_faults,
            cpu,
        }
    }
}

/// Turns cumulative readings into per-tick samples.
pub struct Sampler {
    host: String,
    source: Box<dyn CounterSource>,
    previous: RawReading,
    previous_ms: u64,
    last_ts: [Option<u64>; 3],
    available: BTreeSet<Counter>,
}

impl Sampler {
    /// Takes a baseline reading. Fails when no counter can be read at all.
    pub fn new(host: impl Into<String>, mut source: Box<dyn CounterSource>) -> Result<Self, MonitorError> {
        let baseline = source.read();
        let mut available = BTreeSet::new();
        if baseline.available_kb.is_some() {
            available.insert(Counter::AvailableMbytes);
        }
        if baseline.major_faults.is_some() {
            available.insert(Counter::PagesPerSec);
        }
        if baseline.cpu.is_some() {
            available.insert(Counter::CpuPercent);
        }
        if available.is_empty() {
            return Err(MonitorError::UnsupportedPlatform);
        }
        Ok(Sampler {
            host: host.into(),
            source,
            previous: baseline,
            previous_ms: unix_ms(),
            last_ts: [None; 3],
            available,
        })
    }

    pub fn local() -> Result<Self, MonitorError> {
        Self::new("local", Box::new(ProcSource::system()))
    }

    pub fn available(&self) -> &BTreeSet<Counter> {
        &self.available
    }

    pub fn omitted(&self) -> Vec<Counter> {
        Counter::ALL
            .into_iter()
            .filter(|c| !self.available.contains(c))
            .collect()
    }

    /// Reads the source and emits one sample per available counter.
    pub fn tick(&mut self, now_ms: u64) -> Vec<CounterSample> {
        let reading = self.source.read();
        let elapsed_s = now_ms.saturating_sub(self.previous_ms) as f64 / 1000.0;
        let mut samples = Vec::with_capacity(3);
        for counter in Counter::ALL {
            if !self.available.contains(&counter) {
                continue;
            }
            let value = match counter {
                Counter::AvailableMbytes => reading.available_kb.map(|kb| kb as f64 / 1024.0),
                Counter::PagesPerSec => match (reading.major_faults, self.previous.major_faults) {
                    (Some(now), Some(before)) if elapsed_s > 0.0 => {
                        Some(now.saturating_sub(before) as f64 / elapsed_s)
                    }
                    _ => None,
                },
                Counter::CpuPercent => match (reading.cpu, self.previous.cpu) {
                    (Some((busy, total)), Some((busy0, total0))) => {
                        let dt = total.saturating_sub(total0);
                        let db = busy.saturating_sub(busy0);
                        Some(if dt == 0 { 0.0 } else { (100.0 * db as f64 / dt as f64).clamp(0.0, 100.0) })
                    }
                    _ => None,
                },
            };
            let Some(value) = value.filter(|v| counter.in_range(*v)) else { continue };
            let slot = &mut self.last_ts[counter as usize];
            let ts = match *slot {
                Some(last) if now_ms <= last => last + 1,
                _ => now_ms,
            };
            *slot = Some(ts);
            samples.push(CounterSample {
                host: self.host.clone(),
                counter,
                timestamp_ms: ts,
                value,
            });
        }
        self.previous = reading;
        self.previous_ms = now_ms;
        samples
    }
}

/// Samples every `interval` until `stop` fires, sending each tick's samples
/// to `sink`. The first tick lands one interval after the baseline.
pub fn sample_counters(
    mut sampler: Sampler,
    interval: Duration,
    stop: CancellationToken,
    sink: mpsc::UnboundedSender<Vec<CounterSample>>,
) -> Result<JoinHandle<()>, MonitorError> {
    let interval_ms = interval.as_millis() as u64;
    if interval_ms < MIN_INTERVAL_MS {
        return Err(MonitorError::IntervalTooShort(interval_ms));
    }
    Ok(tokio::spawn(async move {
        let start = tokio::time::Instant::now();
        let mut ticker = tokio::time::interval_at(start + interval, interval);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = stop.cancelled() => return,
                _ = ticker.tick() => {
                    let samples = sampler.tick(unix_ms());
                    if sink.send(samples).is_err() {
                        return;
                    }
                }
            }
        }
    }))
}

/// Where counter samples for a run accumulate.
#[derive(Debug, Default)]
pub struct CounterStore {
    inner: parking_lot::Mutex<StoreInner>,
}

#[derive(Debug, Default)]
struct StoreInner {
    samples: Vec<CounterSample>,
    omitted: BTreeSet<(String, Counter)>,
    monitors: Vec<CancellationToken>,
    finished: bool,
    started_ms: Option<u64>,
    ended_ms: Option<u64>,
}

impl CounterStore {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn mark_started(&self, at_ms: u64) {
        self.inner.lock().started_ms = Some(at_ms);
    }

    /// Stops every attached monitor and rejects later samples.
    pub fn finish(&self, at_ms: u64) {
        let mut inner = self.inner.lock();
        inner.finished = true;
        inner.ended_ms = Some(at_ms);
        for m in inner.monitors.drain(..) {
            m.cancel();
        }
    }

    pub fn is_finished(&self) -> bool {
        self.inner.lock().finished
    }

    pub fn push(&self, samples: impl IntoIterator<Item = CounterSample>) {
        let mut inner = self.inner.lock();
        if !inner.finished {
            inner.samples.extend(samples);
        }
    }

    pub fn note_omitted(&self, host: &str, counter: Counter) {
        self.inner.lock().omitted.insert((host.to_string(), counter));
    }

    pub fn samples(&self) -> Vec<CounterSample> {
        self.inner.lock().samples.clone()
    }

    /// `host:counter` strings for counters a monitored host could not provide.
    pub fn omitted(&self) -> Vec<String> {
        self.inner
            .lock()
            .omitted
            .iter()
            .map(|(h, c)| format!("{h}:{c}"))
            .collect()
    }

    fn register(&self, token: CancellationToken) -> Result<(), MonitorError> {
        let mut inner = self.inner.lock();
        if inner.finished {
            return Err(MonitorError::StaleRun);
        }
        inner.monitors.push(token);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MonitorTarget {
    Local,
    /// A generator agent's `host:port`.
    Agent(String),
}

impl MonitorTarget {
    pub fn parse(s: &str) -> Self {
        if s == "local" {
            MonitorTarget::Local
        } else {
            MonitorTarget::Agent(s.to_string())
        }
    }
}

/// Stops sampling when detached or dropped.
pub struct MonitorHandle {
    stop: CancellationToken,
    task: JoinHandle<()>,
}

impl MonitorHandle {
    pub async fn detach(mut self) {
        self.stop.cancel();
        let _ = (&mut self.task).await;
    }
}

impl Drop for MonitorHandle {
    fn drop(&mut self) {
        self.stop.cancel();
    }
}

/// Attaches a sampler to a run's counter store. Local targets sample this
/// host; agent targets open a monitoring session on the agent, which ships
/// counters in METRIC_BATCH frames.
pub async fn attach_monitor(
    store: &Arc<CounterStore>,
    target: MonitorTarget,
    interval: Duration,
) -> Result<MonitorHandle, MonitorError> {
    if store.is_finished() {
        return Err(MonitorError::StaleRun);
    }
    let interval_ms = interval.as_millis() as u64;
    if interval_ms < MIN_INTERVAL_MS {
        return Err(MonitorError::IntervalTooShort(interval_ms));
    }
    let stop = CancellationToken::new();
    let task = match target {
        MonitorTarget::Local => {
            let sampler = match Sampler::local() {
                Ok(s) => s,
                Err(err) => {
                    tracing::warn!(%err, "local monitoring disabled");
                    return Err(err);
                }
            };
            for counter in sampler.omitted() {
                store.note_omitted("local", counter);
            }
            let (tx, mut rx) = mpsc::unbounded_channel();
            let sampling = sample_counters(sampler, interval, stop.clone(), tx)?;
            let sink = store.clone();
            tokio::spawn(async move {
                while let Some(batch) = rx.recv().await {
                    sink.push(batch);
                }
                let _ = sampling.await;
            })
        }
        MonitorTarget::Agent(address) => {
            crate::controller::fleet::remote_monitor(store.clone(), address, interval_ms, stop.clone()).await?
        }
    };
    store.register(stop.clone())?;
    Ok(MonitorHandle { stop, task })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fake {
        readings: Vec<RawReading>,
        at: usize,
    }

    impl CounterSource for Fake {
        fn read(&mut self) -> RawReading {
            let r = self.readings[self.at.min(self.readings.len() - 1)];
            self.at += 1;
            r
        }
    }

    fn reading(kb: u64, faults: u64, busy: u64, total: u64) -> RawReading {
        RawReading {
            available_kb: Some(kb),
            major_faults: Some(faults),
            cpu: Some((busy, total)),
        }
    }

    #[test]
    fn derived_counters() {
        let source = Fake {
            readings: vec![reading(2048, 100, 10, 100), reading(1024, 150, 60, 200)],
            at: 0,
        };
        let mut sampler = Sampler::new("h", Box::new(source)).unwrap();
        sampler.previous_ms = 1_000;
        let samples = sampler.tick(1_500);
        let get = |c| samples.iter().find(|s| s.counter == c).unwrap().value;
        assert_eq!(get(Counter::AvailableMbytes), 1.0);
        assert_eq!(get(Counter::PagesPerSec), 100.0);
        assert_eq!(get(Counter::CpuPercent), 50.0);
    }

    #[test]
    fn missing_counter_is_omitted_not_zeroed() {
        let r = RawReading {
            available_kb: Some(4096),
            major_faults: None,
            cpu: None,
        };
        let mut sampler = Sampler::new("h", Box::new(Fake { readings: vec![r], at: 0 })).unwrap();
        assert_eq!(sampler.omitted(), vec![Counter::PagesPerSec, Counter::CpuPercent]);
        let samples = sampler.tick(unix_ms());
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].counter, Counter::AvailableMbytes);
    }

    #[test]
    fn no_source_is_unsupported() {
        let fake = Fake {
            readings: vec![RawReading::default()],
            at: 0,
        };
        assert!(matches!(
            Sampler::new("h", Box::new(fake)),
            Err(MonitorError::UnsupportedPlatform)
        ));
    }

    #[test]
    fn timestamps_never_repeat() {
        let fake = Fake {
            readings: vec![reading(1, 1, 1, 1)],
            at: 0,
        };
        let mut sampler = Sampler::new("h", Box::new(fake)).unwrap();
        let a = sampler.tick(5_000);
        let b = sampler.tick(5_000);
        for (x, y) in a.iter().zip(&b) {
            assert!(y.timestamp_ms > x.timestamp_ms);
        }
    }

    #[test]
    fn proc_source_parses_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("meminfo"), "MemTotal: 100 kB\nMemAvailable:    51200 kB\n").unwrap();
        std::fs::write(dir.path().join("vmstat"), "pgfault 9\npgmajfault 42\n").unwrap();
        std::fs::write(dir.path().join("stat"), "cpu  10 0 10 70 10 0 0 0 0 0\ncpu0 1 1 1 1\n").unwrap();
        let r = ProcSource::new(dir.path()).read();
        assert_eq!(r.available_kb, Some(51200));
        assert_eq!(r.major_faults, Some(42));
        assert_eq!(r.cpu, Some((20, 100)));
    }

    #[tokio::test]
    async fn short_interval_rejected() {
        let store = CounterStore::new();
        assert!(matches!(
            attach_monitor(&store, MonitorTarget::Local, Duration::from_millis(50)).await,
            Err(MonitorError::IntervalTooShort(50))
        ));
    }

    #[tokio::test]
    async fn attach_after_finish_is_stale() {
        let store = CounterStore::new();
        store.finish(unix_ms());
        assert!(matches!(
            attach_monitor(&store, MonitorTarget::Local, Duration::from_millis(500)).await,
            Err(MonitorError::StaleRun)
        ));
    }

    #[cfg(target_os = "linux")]
    #[tokio::test]
    async fn local_sampling_ticks_on_interval() {
        let sampler = Sampler::local().unwrap();
        let stop = CancellationToken::new();
        let (tx, mut rx) = mpsc::unbounded_channel();
        let task = sample_counters(sampler, Duration::from_millis(100), stop.clone(), tx).unwrap();
        tokio::time::sleep(Duration::from_millis(1_030)).await;
        stop.cancel();
        task.await.unwrap();
        let mut ticks = 0;
        let mut last = 0;
        while let Ok(batch) = rx.try_recv() {
            ticks += 1;
            let mem = batch.iter().find(|s| s.counter == Counter::AvailableMbytes).unwrap();
            assert!(mem.value >= 0.0);
            assert!(mem.timestamp_ms >= last);
            last = mem.timestamp_ms;
            let names: BTreeSet<_> = batch.iter().map(|s| s.counter.as_str()).collect();
            assert!(names.contains("available_mbytes") && names.contains("pages_per_sec"));
        }
        assert!((9..=11).contains(&ticks), "{ticks} ticks");
    }
}
