//! Virtual simulation clock.
//!
//! All simulated physics and every timestamp written by the kernel derive from
//! this clock, so repeated runs with the same seed are bit-reproducible. Time
//! only moves when a component calls [`SimClock::advance`]; an optional pace
//! factor makes the advancing thread sleep a scaled amount of real time.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};

/// Virtual time in microseconds since the clock epoch.
pub type Micros = u64;

pub const MICROS_PER_SEC: u64 = 1_000_000;

/// Converts seconds to whole microseconds, rounding to nearest.
pub fn secs_to_micros(secs: f64) -> Micros {
    if secs <= 0.0 {
        0
    } else {
        (secs * MICROS_PER_SEC as f64).round() as Micros
    }
}

pub fn micros_to_secs(us: Micros) -> f64 {
    us as f64 / MICROS_PER_SEC as f64
}

type Listener = Box<dyn FnMut(Micros, Micros) + Send>;

struct ClockState {
    next_listener: u64,
    listeners: Vec<(u64, Listener)>,
}

struct ClockInner {
    now: AtomicU64,
    state: Mutex<ClockState>,
    epoch: DateTime<Utc>,
    // virtual seconds per real second; None runs unpaced
    pace: Option<f64>,
}

/// Shared handle to the virtual clock.
#[derive(Clone)]
pub struct SimClock {
    inner: Arc<ClockInner>,
}

/// Identifies a registered advance listener.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ListenerId(u64);

impl SimClock {
    /// The default epoch is the date of the reference measurement session.
    pub fn new() -> Self {
        Self::with_epoch(Utc.with_ymd_and_hms(2002, 5, 15, 8, 0, 0).unwrap(), None)
    }

    pub fn with_epoch(epoch: DateTime<Utc>, pace: Option<f64>) -> Self {
        Self {
            inner: Arc::new(ClockInner {
                now: AtomicU64::new(0),
                state: Mutex::new(ClockState {
                    next_listener: 0,
                    listeners: Vec::new(),
                }),
                epoch,
                pace: pace.filter(|f| f.is_finite() && *f > 0.0),
            }),
        }
    }

    /// Same epoch, new pace factor; shares nothing with `self`.
    pub fn paced(factor: Option<f64>) -> Self {
        let base = Self::new();
        Self::with_epoch(base.epoch(), factor)
    }

    pub fn now(&self) -> Micros {
        self.inner.now.load(Ordering::Acquire)
    }

    pub fn epoch(&self) -> DateTime<Utc> {
        self.inner.epoch
    }

    /// Moves time forward by `dt` and runs every listener with `(from, to)`.
    /// Advances are serialized; listeners must not advance the clock.
    pub fn advance(&self, dt: Micros) -> Micros {
        let (from, to) = {
            let mut st = self.inner.state.lock().unwrap();
            let from = self.inner.now.load(Ordering::Acquire);
            let to = from + dt;
            self.inner.now.store(to, Ordering::Release);
            for (_, l) in st.listeners.iter_mut() {
                l(from, to);
            }
            (from, to)
        };
        if let Some(factor) = self.inner.pace {
            let real = micros_to_secs(to - from) / factor;
            if real > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(real));
            }
        }
        to
    }

    /// Advances to `t` if it lies in the future; otherwise a no-op.
    pub fn advance_to(&self, t: Micros) -> Micros {
        let now = self.now();
        if t > now {
            self.advance(t - now)
        } else {
            now
        }
    }

    pub fn add_listener(&self, f: impl FnMut(Micros, Micros) + Send + 'static) -> ListenerId {
        let mut st = self.inner.state.lock().unwrap();
        let id = st.next_listener;
        st.next_listener += 1;
        st.listeners.push((id, Box::new(f)));
        ListenerId(id)
    }

    pub fn remove_listener(&self, id: ListenerId) {
        let mut st = self.inner.state.lock().unwrap();
        st.listeners.retain(|(i, _)| *i != id.0);
    }

    /// Absolute UTC time of virtual instant `t`.
    pub fn datetime(&self, t: Micros) -> DateTime<Utc> {
        self.inner.epoch + chrono::Duration::microseconds(t as i64)
    }

    /// ISO-8601 rendering with microsecond resolution, e.g. `2002-05-15T08:00:00.000000Z`.
    pub fn iso(&self, t: Micros) -> String {
        format_iso(self.datetime(t))
    }
}

impl Default for SimClock {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for SimClock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimClock")
            .field("now", &self.now())
            .finish()
    }
}

pub fn format_iso(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%S%.6fZ").to_string()
}

pub fn parse_iso(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advance_moves_time_and_notifies() {
        let clock = SimClock::new();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s = seen.clone();
        let id = clock.add_listener(move |a, b| s.lock().unwrap().push((a, b)));
        clock.advance(5);
        clock.advance_to(3);
        clock.advance_to(12);
        clock.remove_listener(id);
        clock.advance(1);
        assert_eq!(clock.now(), 13);
        assert_eq!(*seen.lock().unwrap(), vec![(0, 5), (5, 12)]);
    }

    #[test]
    fn iso_rendering_round_trips() {
        let clock = SimClock::new();
        let s = clock.iso(1_600_000);
        assert_eq!(s, "2002-05-15T08:00:01.600000Z");
        assert_eq!(parse_iso(&s), Some(clock.datetime(1_600_000)));
    }

    #[test]
    fn seconds_conversion() {
        assert_eq!(secs_to_micros(1.6), 1_600_000);
        assert_eq!(secs_to_micros(-1.0), 0);
        assert_eq!(micros_to_secs(2_500_000), 2.5);
    }
}
