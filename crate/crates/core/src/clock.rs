//! Time source for timestamps and retry backoff.

use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

pub trait Clock: Send {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
    fn sleep_ms(&mut self, ms: u64);
    /// Milliseconds elapsed since the clock was created.
    fn elapsed_ms(&self) -> u64;
}

/// Deterministic clock. Sleeping advances time instantly.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    start_ms: u64,
    now_ms: u64,
}

impl VirtualClock {
    /// 2025-01-01T00:00:00Z
    pub const DEFAULT_EPOCH_MS: u64 = 1_735_689_600_000;

    pub fn new(start_ms: u64) -> Self {
        Self {
            start_ms,
            now_ms: start_ms,
        }
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new(Self::DEFAULT_EPOCH_MS)
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now_ms
    }

    fn sleep_ms(&mut self, ms: u64) {
        self.now_ms = self.now_ms.saturating_add(ms);
    }

    fn elapsed_ms(&self) -> u64 {
        self.now_ms - self.start_ms
    }
}

#[derive(Debug, Clone)]
pub struct SystemClock {
    started: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { started: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    }

    fn sleep_ms(&mut self, ms: u64) {
        std::thread::sleep(Duration::from_millis(ms));
    }

    fn elapsed_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }
}
