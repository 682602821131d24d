//! Time sources. Everything that reads time takes a [`Clock`] so tests and
//! replays can run against a virtual timeline.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Milliseconds since the Unix epoch (or since an arbitrary origin for virtual clocks).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_secs(secs: i64) -> Self {
        Timestamp(secs * 1000)
    }

    pub fn from_mins(mins: i64) -> Self {
        Timestamp(mins * 60_000)
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    pub fn plus(self, d: Duration) -> Self {
        Timestamp(self.0 + d.as_millis() as i64)
    }

    pub fn minus(self, d: Duration) -> Self {
        Timestamp(self.0 - d.as_millis() as i64)
    }

    /// Saturating distance `self - earlier`.
    pub fn since(self, earlier: Timestamp) -> Duration {
        Duration::from_millis((self.0 - earlier.0).max(0) as u64)
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;

    /// Block the calling thread until `now() >= deadline`.
    fn sleep_until(&self, deadline: Timestamp);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let d = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default();
        Timestamp(d.as_millis() as i64)
    }

    fn sleep_until(&self, deadline: Timestamp) {
        let now = self.now();
        if deadline > now {
            std::thread::sleep(deadline.since(now));
        }
    }
}

/// A clock that only moves when told to. Sleepers wake when the clock is
/// advanced past their deadline.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: Mutex<Timestamp>,
    moved: Condvar,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock {
            now: Mutex::new(start),
            moved: Condvar::new(),
        }
    }

    pub fn set(&self, t: Timestamp) {
        let mut now = self.now.lock().unwrap();
        if t > *now {
            *now = t;
        }
        self.moved.notify_all();
    }

    pub fn advance(&self, d: Duration) {
        let mut now = self.now.lock().unwrap();
        *now = now.plus(d);
        self.moved.notify_all();
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        *self.now.lock().unwrap()
    }

    fn sleep_until(&self, deadline: Timestamp) {
        let mut now = self.now.lock().unwrap();
        while *now < deadline {
            now = self.moved.wait(now).unwrap();
        }
    }
}
