//! Injected time source.
//!
//! Ledger entries carry millisecond timestamps that must be monotone
//! non-decreasing, and tests need reproducible runs, so nothing reads the
//! ambient system clock directly. The engine asks a [`Clock`] for the next
//! timestamp and clamps it to the current ledger tip.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Source of millisecond timestamps.
pub trait Clock {
    fn now_ms(&mut self) -> u64;
}

/// Wall-clock time.
#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&mut self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Deterministic clock that starts at `start_ms` and advances by `step_ms`
/// per reading.
#[derive(Debug)]
pub struct FixedClock {
    next: u64,
    step: u64,
}

impl FixedClock {
    pub fn new(start_ms: u64, step_ms: u64) -> Self {
        FixedClock { next: start_ms, step: step_ms }
    }
}

impl Clock for FixedClock {
    fn now_ms(&mut self) -> u64 {
        let now = self.next;
        self.next = self.next.saturating_add(self.step);
        now
    }
}

/// Persisted clock configuration for an engine data directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClockMode {
    System,
    Fixed { start_ms: u64, step_ms: u64 },
}

impl ClockMode {
    pub fn build(&self) -> Box<dyn Clock> {
        match *self {
            ClockMode::System => Box::new(SystemClock),
            ClockMode::Fixed { start_ms, step_ms } => Box::new(FixedClock::new(start_ms, step_ms)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_clock_steps() {
        let mut clock = FixedClock::new(1_000, 250);
        assert_eq!(clock.now_ms(), 1_000);
        assert_eq!(clock.now_ms(), 1_250);
        assert_eq!(clock.now_ms(), 1_500);
    }

    #[test]
    fn system_clock_is_plausible() {
        let mut clock = SystemClock;
        let t = clock.now_ms();
        // After 2020-01-01 and before 2100-01-01.
        assert!(t > 1_577_836_800_000);
        assert!(t < 4_102_444_800_000);
    }

    #[test]
    fn clock_mode_round_trips_through_json() {
        for mode in [ClockMode::System, ClockMode::Fixed { start_ms: 5, step_ms: 7 }] {
            let json = serde_json::to_string(&mode).unwrap();
            assert_eq!(serde_json::from_str::<ClockMode>(&json).unwrap(), mode);
        }
    }
}
