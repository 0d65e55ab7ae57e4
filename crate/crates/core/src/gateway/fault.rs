//! Random nonfatal and fatal faults as two Poisson processes in virtual time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::clock::Micros;
use crate::supervisor::FaultKind;

const DAY: f64 = 86_400e6;
const WEEK: f64 = 7.0 * DAY;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultModel {
    /// Expected nonfatal faults per simulated day.
    pub nonfatal_rate: f64,
    /// Expected fatal faults per simulated week.
    pub fatal_rate: f64,
    pub seed: u64,
}

impl Default for FaultModel {
    fn default() -> Self {
        Self {
            nonfatal_rate: 1.0,
            fatal_rate: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultEvent {
    pub at: Micros,
    pub kind: FaultKind,
}

struct Stream {
    rng: ChaCha8Rng,
    exp: Option<Exp<f64>>,
    next: Option<Micros>,
}

impl Stream {
    fn new(rate_per_us: f64, seed: u64, start: Micros) -> Self {
        let exp = (rate_per_us > 0.0 && rate_per_us.is_finite())
            .then(|| Exp::new(rate_per_us).expect("positive rate"));
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            exp,
            next: None,
        };
        s.next = s.draw(start);
        s
    }

    fn draw(&mut self, after: Micros) -> Option<Micros> {
        let gap = self.exp.as_ref()?.sample(&mut self.rng);
        // at least one microsecond apart
        Some(after.saturating_add((gap.ceil() as Micros).max(1)))
    }
}

/// Running state of a [`FaultModel`] from some start time on.
pub struct FaultProcess {
    nonfatal: Stream,
    fatal: Stream,
}

impl FaultProcess {
    pub fn new(model: &FaultModel, start: Micros) -> Self {
        assert!(
            model.nonfatal_rate >= 0.0 && model.fatal_rate >= 0.0,
            "fault rates must be non-negative"
        );
        Self {
            nonfatal: Stream::new(model.nonfatal_rate / DAY, model.seed, start),
            fatal: Stream::new(
                model.fatal_rate / WEEK,
                model.seed ^ 0x9e37_79b9_7f4a_7c15,
                start,
            ),
        }
    }

    /// Earliest fault due at or before `now`, if any. Call repeatedly to
    /// drain every fault of an interval in time order.
    pub fn tick(&mut self, now: Micros) -> Option<FaultEvent> {
        let due = |s: &Stream| s.next.filter(|&t| t <= now);
        let (stream, kind) = match (due(&self.nonfatal), due(&self.fatal)) {
            (None, None) => return None,
            (Some(a), Some(b)) if b < a => (&mut self.fatal, FaultKind::Fatal),
            (Some(_), _) => (&mut self.nonfatal, FaultKind::Nonfatal),
            (None, Some(_)) => (&mut self.fatal, FaultKind::Fatal),
        };
        let at = stream.next.expect("due");
        stream.next = stream.draw(at);
        Some(FaultEvent { at, kind })
    }

    /// All faults up to `now`.
    pub fn drain(&mut self, now: Micros) -> Vec<FaultEvent> {
        std::iter::from_fn(|| self.tick(now)).collect()
    }
}

/// One step of `process` at `now`.
pub fn fault_tick(process: &mut FaultProcess, now: Micros) -> Option<FaultEvent> {
    process.tick(now)
}
