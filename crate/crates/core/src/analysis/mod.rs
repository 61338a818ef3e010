//! Statistics over transaction records: nearest-rank percentiles,
//! per-transaction aggregates over a measurement window, 1 s latency buckets
//! and counter overlays.
//!
//! Per-transaction work runs on rayon when the `parallel` feature is on;
//! [`aggregate_sequential`] is always available and produces identical
//! results.

mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::{Counter, CounterSample};
use crate::runtime::{Status, TransactionRecord};
pub use report::{
    emit_report, read_counters_csv, read_records_csv, write_counters_csv, write_records_csv, RecordsWriter, ReportError,
    COUNTERS_HEADER, RECORDS_HEADER, TRANSACTIONS_HEADER,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("no data{}", .0.as_ref().map(|t| format!(" for transaction {t:?}")).unwrap_or_default())]
    NoData(Option<String>),
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(q * N)` of the
/// ascending sort, with `q = 0` mapping to rank 1.
pub fn percentile<T: Copy + Ord>(values: &[T], q: f64) -> Result<T, AnalysisError> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    percentile_sorted(&sorted, q)
}

/// [`percentile`] over an already ascending slice.
pub fn percentile_sorted<T: Copy>(sorted: &[T], q: f64) -> Result<T, AnalysisError> {
    if sorted.is_empty() {
        return Err(AnalysisError::NoData(None));
    }
    Ok(sorted[nearest_rank(sorted.len(), q) - 1])
}

/// `ceil(q * n)` clamped to `[1, n]`. `q` is rounded to a millionth first so
/// decimal quantiles like 0.95 do not pick up binary rounding error.
fn nearest_rank(n: usize, q: f64) -> usize {
    const SCALE: u128 = 1_000_000;
    let q_scaled = (q.clamp(0.0, 1.0) * SCALE as f64).round() as u128;
    let rank = (q_scaled * n as u128).div_ceil(SCALE) as usize;
    rank.clamp(1, n)
}

/// Half-open wall-clock window `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start_ms: f64,
    pub end_ms: f64,
}

impl Window {
    pub fn new(start_ms: f64, end_ms: f64) -> Self {
        assert!(end_ms > start_ms, "window must have positive length");
        Window { start_ms, end_ms }
    }

    pub fn contains(&self, t_ms: f64) -> bool {
        t_ms >= self.start_ms && t_ms < self.end_ms
    }

    pub fn seconds(&self) -> f64 {
        (self.end_ms - self.start_ms) / 1000.0
    }

    /// The span covered by `records`: earliest start to latest completion.
    pub fn spanning(records: &[TransactionRecord]) -> Option<Self> {
        let start = records.iter().map(|r| r.wall_start_ms as f64).reduce(f64::min)?;
        let end = records.iter().map(|r| r.wall_end_ms()).reduce(f64::max)?;
        // Completions exactly at the span end must still fall inside.
        let end = end.max(start + 1.0) + 1e-6;
        Some(Window::new(start, end))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionStats {
    pub transaction: String,
    pub count: u64,
    pub pass: u64,
    pub fail: u64,
    pub min_ms: f64,
    pub avg_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    /// Completions per second within the window.
    pub throughput_per_s: f64,
    pub error_rate: f64,
}

impl TransactionStats {
    /// `durations_ns` must be non-empty; `completed` counts records of this
    /// transaction whose end fell inside the window.
    fn compute(name: &str, mut durations_ns: Vec<u64>, fail: u64, completed: u64, window: &Window) -> Self {
        durations_ns.sort_unstable();
        let count = durations_ns.len() as u64;
        let ms = |ns: u64| ns as f64 / 1e6;
        let pct = |q| ms(percentile_sorted(&durations_ns, q).expect("non-empty"));
        let sum: u128 = durations_ns.iter().map(|&d| d as u128).sum();
        TransactionStats {
            transaction: name.to_string(),
            count,
            pass: count - fail,
            fail,
            min_ms: ms(durations_ns[0]),
            avg_ms: sum as f64 / count as f64 / 1e6,
            p50_ms: pct(0.5),
            p90_ms: pct(0.9),
            p95_ms: pct(0.95),
            max_ms: ms(*durations_ns.last().unwrap()),
            throughput_per_s: completed as f64 / window.seconds(),
            error_rate: fail as f64 / count as f64,
        }
    }
}

pub type StatsMap = BTreeMap<String, TransactionStats>;

#[derive(Default)]
struct Bucket {
    durations: Vec<u64>,
    fail: u64,
    completed: u64,
}

fn bucket_by_transaction<'a>(records: &'a [TransactionRecord], window: &Window) -> BTreeMap<&'a str, Bucket> {
    let mut buckets: BTreeMap<&str, Bucket> = BTreeMap::new();
    for r in records {
        let started = window.contains(r.wall_start_ms as f64);
        let ended = window.contains(r.wall_end_ms());
        if !(started || ended) {
            continue;
        }
        let b = buckets.entry(&r.transaction).or_default();
        if started {
            b.durations.push(r.duration_ns());
            if r.status == Status::Fail {
                b.fail += 1;
            }
        }
        if ended {
            b.completed += 1;
        }
    }
    buckets.retain(|_, b| !b.durations.is_empty());
    buckets
}

/// Latency stats use records that started inside the window; throughput
/// counts records that completed inside it. FAIL records count toward
/// latency and error rate alike.
pub fn aggregate(records: &[TransactionRecord], window: &Window) -> StatsMap {
    #[cfg(feature = "parallel")]
    {
        aggregate_parallel(records, window)
    }
    #[cfg(not(feature = "parallel"))]
    {
        aggregate_sequential(records, window)
    }
}

pub fn aggregate_sequential(records: &[TransactionRecord], window: &Window) -> StatsMap {
    bucket_by_transaction(records, window)
        .into_iter()
        .map(|(name, b)| {
            (
                name.to_string(),
                TransactionStats::compute(name, b.durations, b.fail, b.completed, window),
            )
        })
        .collect()
}

#[cfg(feature = "parallel")]
pub fn aggregate_parallel(records: &[TransactionRecord], window: &Window) -> StatsMap {
    use rayon::prelude::*;

    bucket_by_transaction(records, window)
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(name, b)| {
            (
                name.to_string(),
                TransactionStats::compute(name, b.durations, b.fail, b.completed, window),
            )
        })
        .collect()
}

/// Stats for one transaction; `NoData` when it has no records in the window.
pub fn transaction_stats(
    records: &[TransactionRecord],
    window: &Window,
    transaction: &str,
) -> Result<TransactionStats, AnalysisError> {
    let subset: Vec<TransactionRecord> = records
        .iter()
        .filter(|r| r.transaction == transaction)
        .cloned()
        .collect();
    aggregate_sequential(&subset, window)
        .remove(transaction)
        .ok_or_else(|| AnalysisError::NoData(Some(transaction.to_string())))
}

/// One step-load level's measurement window (warm-up already excluded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelWindow {
    pub level: u32,
    pub window: Window,
}

/// 1 s buckets starting at `start_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketAxis {
    pub start_ms: f64,
    pub buckets: usize,
}

impl BucketAxis {
    pub const WIDTH_MS: f64 = 1000.0;

    pub fn covering(window: &Window) -> Self {
        BucketAxis {
            start_ms: window.start_ms,
            buckets: ((window.end_ms - window.start_ms) / Self::WIDTH_MS).ceil().max(1.0) as usize,
        }
    }

    pub fn bucket_end(&self, i: usize) -> f64 {
        self.start_ms + (i + 1) as f64 * Self::WIDTH_MS
    }

    fn index(&self, t_ms: f64) -> Option<usize> {
        if t_ms < self.start_ms {
            return None;
        }
        let i = ((t_ms - self.start_ms) / Self::WIDTH_MS) as usize;
        (i < self.buckets).then_some(i)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyPoint {
    pub completed: u64,
    pub avg_ms: Option<f64>,
}

/// Per-bucket completions and mean latency, bucketed by completion time.
pub fn latency_series(records: &[TransactionRecord], axis: &BucketAxis) -> Vec<LatencyPoint> {
    let mut sums = vec![(0u64, 0f64); axis.buckets];
    for r in records {
        if let Some(i) = axis.index(r.wall_end_ms()) {
            sums[i].0 += 1;
            sums[i].1 += r.duration_ms();
        }
    }
    sums.into_iter()
        .map(|(n, total)| LatencyPoint {
            completed: n,
            avg_ms: (n > 0).then(|| total / n as f64),
        })
        .collect()
}

pub type Overlay = BTreeMap<(String, Counter), Vec<Option<f64>>>;

/// Resamples each (host, counter) series onto the buckets: each bucket takes
/// the last sample strictly before its end. Buckets before a series' first
/// sample stay empty.
pub fn correlate_counters(axis: &BucketAxis, samples: &[CounterSample]) -> Overlay {
    let mut series: BTreeMap<(String, Counter), Vec<(u64, f64)>> = BTreeMap::new();
    for s in samples {
        series
            .entry((s.host.clone(), s.counter))
            .or_default()
            .push((s.timestamp_ms, s.value));
    }
    series
        .into_iter()
        .map(|(key, mut points)| {
            points.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let mut out = Vec::with_capacity(axis.buckets);
            let mut next = 0;
            let mut last = None;
            for i in 0..axis.buckets {
                let end = axis.bucket_end(i);
                while next < points.len() && (points[next].0 as f64) < end {
                    last = Some(points[next].1);
                    next += 1;
                }
                out.push(last);
            }
            (key, out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub run_id: String,
    pub scenario: String,
    pub seed: u64,
    pub partial: bool,
    /// Step-load measurement windows, ascending by level; empty otherwise.
    #[serde(default)]
    pub levels: Vec<LevelWindow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub meta: ReportMeta,
    pub window: Option<Window>,
    pub overall: StatsMap,
    pub per_level: Vec<(u32, StatsMap)>,
    pub axis: Option<BucketAxis>,
    pub latency: Vec<LatencyPoint>,
    pub overlay: Overlay,
    pub records: Vec<TransactionRecord>,
    pub counters: Vec<CounterSample>,
}

impl RunReport {
    /// Builds every aggregate. The overall window spans the records
    /// themselves so re-analysis of the same records is exact.
    pub fn build(meta: ReportMeta, mut records: Vec<TransactionRecord>, mut counters: Vec<CounterSample>) -> Self {
        records.sort_by(|a, b| {
            (a.vuser_id, a.start_ns, a.end_ns, &a.transaction, a.iteration)
                .cmp(&(b.vuser_id, b.start_ns, b.end_ns, &b.transaction, b.iteration))
        });
        counters.sort_by(|a, b| {
            (&a.host, a.counter, a.timestamp_ms)
                .cmp(&(&b.host, b.counter, b.timestamp_ms))
                .then(a.value.total_cmp(&b.value))
        });
        let window = Window::spanning(&records);
        let overall = window.map(|w| aggregate(&records, &w)).unwrap_or_default();
        let per_level = meta
            .levels
            .iter()
            .map(|lw| (lw.level, aggregate(&records, &lw.window)))
            .collect();
        let axis = window.map(|w| BucketAxis::covering(&w));
        let latency = axis.map(|a| latency_series(&records, &a)).unwrap_or_default();
        let overlay = axis.map(|a| correlate_counters(&a, &counters)).unwrap_or_default();
        RunReport {
            meta,
            window,
            overall,
            per_level,
            axis,
            latency,
            overlay,
            records,
            counters,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rec(name: &str, wall_start_ms: u64, duration_ms: u64, status: Status) -> TransactionRecord {
        TransactionRecord {
            run_id: "r".into(),
            group: "g".into(),
            vuser_id: 0,
            iteration: 0,
            transaction: name.into(),
            start_ns: wall_start_ms * 1_000_000,
            end_ns: (wall_start_ms + duration_ms) * 1_000_000,
            wall_start_ms,
            status,
            connect_ns: 0,
        }
    }

    #[test]
    fn percentile_single_and_extremes() {
        assert_eq!(percentile(&[7], 0.0).unwrap(), 7);
        assert_eq!(percentile(&[7], 0.37).unwrap(), 7);
        assert_eq!(percentile(&[7], 1.0).unwrap(), 7);
        let v = [5, 3, 9, 1];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1);
        assert_eq!(percentile(&v, 1.0).unwrap(), 9);
        assert_eq!(percentile::<u64>(&[], 0.5), Err(AnalysisError::NoData(None)));
    }

    #[test]
    fn percentile_one_to_hundred() {
        let v: Vec<u32> = (1..=100).rev().collect();
        assert_eq!(percentile(&v, 0.90).unwrap(), 90);
        assert_eq!(percentile(&v, 0.95).unwrap(), 95);
        assert_eq!(percentile(&v, 0.5).unwrap(), 50);
    }

    #[test]
    fn basic_aggregate() {
        let records = vec![
            rec("t", 0, 10, Status::Pass),
            rec("t", 100, 20, Status::Pass),
            rec("t", 200, 30, Status::Pass),
        ];
        let stats = &aggregate(&records, &Window::new(0.0, 1000.0))["t"];
        assert_eq!((stats.min_ms, stats.avg_ms, stats.max_ms), (10.0, 20.0, 30.0));
        assert_eq!(stats.count, 3);
    }

    #[test]
    fn error_rate() {
        let mut records: Vec<_> = (0..8).map(|i| rec("t", i, 1, Status::Pass)).collect();
        records.extend((0..2).map(|i| rec("t", 50 + i, 1, Status::Fail)));
        let stats = &aggregate(&records, &Window::new(0.0, 1000.0))["t"];
        assert_eq!(stats.error_rate, 0.2);
        assert_eq!((stats.pass, stats.fail), (8, 2));
    }

    #[test]
    fn throughput_counts_completions() {
        // 100 records completing uniformly over [0, 10 s)
        let records: Vec<_> = (0..100).map(|i| rec("t", i * 100, 0, Status::Pass)).collect();
        let stats = &aggregate(&records, &Window::new(0.0, 10_000.0))["t"];
        assert_eq!(stats.throughput_per_s, 10.0);
    }

    #[test]
    fn window_excludes_outside_starts() {
        let records = vec![rec("t", 50, 10, Status::Pass), rec("t", 5_000, 10, Status::Pass)];
        let stats = &aggregate(&records, &Window::new(0.0, 1000.0))["t"];
        assert_eq!(stats.count, 1);
        assert!(aggregate(&records, &Window::new(2_000.0, 3_000.0)).is_empty());
    }

    #[test]
    fn absent_transaction_is_no_data() {
        let records = vec![rec("t", 0, 1, Status::Pass)];
        assert_eq!(
            transaction_stats(&records, &Window::new(0.0, 10.0), "other"),
            Err(AnalysisError::NoData(Some("other".into())))
        );
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential() {
        let records: Vec<_> = (0..500)
            .map(|i| rec(["a", "b", "c"][i % 3], i as u64 * 7, (i as u64 * 13) % 97, Status::Pass))
            .collect();
        let w = Window::new(0.0, 4000.0);
        assert_eq!(aggregate_parallel(&records, &w), aggregate_sequential(&records, &w));
    }

    fn sample(t: u64, v: f64) -> CounterSample {
        CounterSample {
            host: "local".into(),
            counter: Counter::AvailableMbytes,
            timestamp_ms: t,
            value: v,
        }
    }

    #[test]
    fn overlay_takes_last_value_before_bucket_end() {
        let axis = BucketAxis { start_ms: 0.0, buckets: 2 };
        let overlay = correlate_counters(&axis, &[sample(400, 100.0), sample(1400, 90.0)]);
        assert_eq!(
            overlay[&("local".to_string(), Counter::AvailableMbytes)],
            vec![Some(100.0), Some(90.0)]
        );
    }

    #[test]
    fn overlay_never_extrapolates_backwards() {
        let axis = BucketAxis { start_ms: 0.0, buckets: 3 };
        let overlay = correlate_counters(&axis, &[sample(1500, 7.0)]);
        assert_eq!(
            overlay[&("local".to_string(), Counter::AvailableMbytes)],
            vec![None, Some(7.0), Some(7.0)]
        );
        assert!(correlate_counters(&axis, &[]).is_empty());
    }

    #[test]
    fn latency_series_buckets_by_completion() {
        let axis = BucketAxis { start_ms: 0.0, buckets: 2 };
        let records = vec![rec("t", 100, 10, Status::Pass), rec("t", 900, 200, Status::Pass)];
        let series = latency_series(&records, &axis);
        assert_eq!(series[0], LatencyPoint { completed: 1, avg_ms: Some(10.0) });
        assert_eq!(series[1], LatencyPoint { completed: 1, avg_ms: Some(200.0) });
    }
}
