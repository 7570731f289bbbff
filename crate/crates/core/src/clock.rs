//! Wall-clock abstraction so replayed runs produce byte-identical documents.

use std::time::Instant;

use chrono::{DateTime, Utc};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
    fn stopwatch(&self) -> Stopwatch;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn stopwatch(&self) -> Stopwatch {
        Stopwatch(Some(Instant::now()))
    }
}

/// Always reports the same instant; stopwatches read zero.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }

    fn stopwatch(&self) -> Stopwatch {
        Stopwatch(None)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Stopwatch(Option<Instant>);

impl Stopwatch {
    pub fn elapsed_ms(&self) -> u64 {
        self.0.map(|s| s.elapsed().as_millis() as u64).unwrap_or(0)
    }
}
