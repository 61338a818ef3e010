use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use futures::future::BoxFuture;

/// Time source for a vuser. Durations come from `now_ns` only; `wall_ms` is
/// report metadata.
pub trait Clock: Send + Sync {
    /// Monotonic nanoseconds since the clock's epoch.
    fn now_ns(&self) -> u64;
    fn wall_ms(&self) -> u64;
    fn sleep(&self, duration: Duration) -> BoxFuture<'static, ()>;
}

pub fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy)]
pub struct RealClock {
    epoch: Instant,
}

impl RealClock {
    pub fn new() -> Self {
        RealClock { epoch: Instant::now() }
    }

    pub fn starting_at(epoch: Instant) -> Self {
        RealClock { epoch }
    }

    pub fn epoch(&self) -> Instant {
        self.epoch
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RealClock {
    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    fn wall_ms(&self) -> u64 {
        unix_ms()
    }

    fn sleep(&self, duration: Duration) -> BoxFuture<'static, ()> {
        Box::pin(tokio::time::sleep(duration))
    }
}

/// A clock that only moves when something sleeps on it. Each vuser gets its
/// own instance so concurrent interleavings cannot change recorded times.
#[derive(Debug)]
pub struct VirtualClock {
    now_ns: AtomicU64,
    epoch_wall_ms: u64,
}

impl VirtualClock {
    pub fn new(start_ns: u64, epoch_wall_ms: u64) -> Self {
        VirtualClock {
            now_ns: AtomicU64::new(start_ns),
            epoch_wall_ms,
        }
    }

    pub fn advance(&self, duration: Duration) {
        self.now_ns.fetch_add(duration.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now_ns(&self) -> u64 {
        self.now_ns.load(Ordering::SeqCst)
    }

    fn wall_ms(&self) -> u64 {
        self.epoch_wall_ms + self.now_ns() / 1_000_000
    }

    fn sleep(&self, duration: Duration) -> BoxFuture<'static, ()> {
        self.advance(duration);
        Box::pin(tokio::task::yield_now())
    }
}
