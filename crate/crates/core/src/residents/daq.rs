//! Time-of-flight acquisition with a synthetic event source.
//!
//! Events are drawn from a deterministic PRNG seeded by
//! `(run_seed, detector, sweep)`: a Poisson number of events per time step,
//! each placed either in a Gaussian peak or uniformly on a flat background.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{parse_num, split_kv, Command, Device, ResidentCore};
use crate::clock::{micros_to_secs, secs_to_micros};

pub const DEFAULT_TOF_CHANNELS: usize = 1024;

/// Row-major n-dimensional detector counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub dims: Vec<usize>,
    pub counts: Vec<u64>,
    pub monitor: u64,
    pub live_time: f64,
}

impl Histogram {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            counts: vec![0; dims.iter().product()],
            monitor: 0,
            live_time: 0.0,
        }
    }

    pub fn cells(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Channel sums along the last axis (the time-of-flight axis).
    pub fn tof_projection(&self) -> Vec<u64> {
        let Some(&t) = self.dims.last() else {
            return Vec::new();
        };
        let mut out = vec![0u64; t];
        if t == 0 {
            return out;
        }
        for (i, c) in self.counts.iter().enumerate() {
            out[i % t] += c;
        }
        out
    }

    /// Flat index of the first maximum.
    pub fn argmax(&self) -> Option<usize> {
        let max = self.counts.iter().max()?;
        self.counts.iter().position(|c| c == max)
    }

    pub fn is_consistent(&self) -> bool {
        self.counts.len() == self.dims.iter().product::<usize>()
    }
}

/// Peak-on-background event distribution over the histogram cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    /// Peak centre per axis, in channels.
    pub center: Vec<f64>,
    /// Peak width (standard deviation) per axis, in channels.
    pub sigma: Vec<f64>,
    /// Fraction of events in the peak; the rest is flat background.
    pub peak_fraction: f64,
}

impl SpectrumModel {
    fn place(&self, dims: &[usize], rng: &mut ChaCha8Rng) -> usize {
        let mut index = 0usize;
        if rng.random::<f64>() < self.peak_fraction {
            for (axis, &extent) in dims.iter().enumerate() {
                let normal = Normal::new(self.center[axis], self.sigma[axis].max(1e-9))
                    .expect("finite width");
                let coord = loop {
                    let x = normal.sample(rng).round();
                    if x >= 0.0 && x < extent as f64 {
                        break x as usize;
                    }
                };
                index = index * extent + coord;
            }
        } else {
            for &extent in dims {
                index = index * extent + rng.random_range(0..extent);
            }
        }
        index
    }

    /// Fills a histogram with `events` events from `seed`.
    pub fn synthesize(&self, dims: &[usize], events: u64, seed: u64) -> Histogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = Histogram::zeros(dims);
        if h.cells() > 0 {
            for _ in 0..events {
                let i = self.place(dims, &mut rng);
                h.counts[i] += 1;
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaqParams {
    pub dims: Vec<usize>,
    pub model: SpectrumModel,
    /// Detector events per second of live time.
    pub event_rate: f64,
    /// Monitor counts per second of live time.
    pub monitor_rate: f64,
    /// Acquisition time step, seconds.
    pub step: f64,
}

impl Default for DaqParams {
    fn default() -> Self {
        Self {
            dims: vec![DEFAULT_TOF_CHANNELS],
            model: SpectrumModel {
                center: vec![400.0],
                sigma: vec![30.0],
                peak_fraction: 0.6,
            },
            event_rate: 400.0,
            monitor_rate: 10.0,
            step: 1.0,
        }
    }
}

/// Stable 64-bit seed derived from the run seed, detector name and sweep.
pub fn seed_for(run_seed: u64, detector: &str, sweep: u64) -> u64 {
    // FNV-1a then a splitmix finaliser
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&run_seed.to_le_bytes());
    eat(detector.as_bytes());
    eat(&[0xff]);
    eat(&sweep.to_le_bytes());
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Default)]
struct MemoryState {
    hist: Option<Histogram>,
    events: u64,
}

/// Histogram memory shared between the acquisition and its readers.
/// Readers always get a copy taken between two acquisition steps.
#[derive(Debug, Clone, Default)]
pub struct HistogramMemory {
    inner: Arc<Mutex<MemoryState>>,
}

impl HistogramMemory {
    /// Point-in-time copy, `None` before the first acquisition.
    pub fn sample(&self) -> Option<Histogram> {
        self.inner.lock().unwrap().hist.clone()
    }

    /// Copy plus the number of events generated into it.
    pub fn sample_with_events(&self) -> Option<(Histogram, u64)> {
        let st = self.inner.lock().unwrap();
        st.hist.clone().map(|h| (h, st.events))
    }

    fn reset(&self, dims: &[usize]) {
        let mut st = self.inner.lock().unwrap();
        st.hist = Some(Histogram::zeros(dims));
        st.events = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionLimits {
    pub count_limit: u64,
    pub time_limit: f64,
}

/// One acquisition in progress.
pub struct Acquisition {
    params: DaqParams,
    limits: AcquisitionLimits,
    memory: HistogramMemory,
    rng: ChaCha8Rng,
    monitor_poisson: Option<Poisson<f64>>,
    event_poisson: Option<Poisson<f64>>,
    live_us: u64,
}

impl Acquisition {
    /// Zeroes the histogram memory and prepares the event source.
    pub fn new(
        params: DaqParams,
        limits: AcquisitionLimits,
        seed: u64,
        memory: HistogramMemory,
    ) -> Self {
        memory.reset(&params.dims);
        let poisson = |rate: f64| (rate > 0.0).then(|| Poisson::new(rate).expect("positive rate"));
        Self {
            monitor_poisson: poisson(params.monitor_rate * params.step),
            event_poisson: poisson(params.event_rate * params.step),
            rng: ChaCha8Rng::seed_from_u64(seed),
            params,
            limits,
            memory,
            live_us: 0,
        }
    }

    pub fn done(&self) -> bool {
        let st = self.memory.inner.lock().unwrap();
        let h = st.hist.as_ref().expect("reset in new");
        h.monitor >= self.limits.count_limit || h.live_time >= self.limits.time_limit
    }

    /// Runs one time step. Returns the virtual microseconds it covered,
    /// or `None` when a limit was already reached.
    pub fn step(&mut self) -> Option<u64> {
        if self.done() {
            return None;
        }
        let full = secs_to_micros(self.params.step);
        let limit_us = secs_to_micros(self.limits.time_limit);
        let dt = full.min(limit_us.saturating_sub(self.live_us));
        // a partial last step scales the rates
        let frac = dt as f64 / full as f64;
        let draw = |p: &Option<Poisson<f64>>, rate: f64, rng: &mut ChaCha8Rng| -> u64 {
            if frac >= 1.0 {
                p.as_ref().map_or(0, |p| p.sample(rng) as u64)
            } else if rate * self.params.step * frac > 0.0 {
                Poisson::new(rate * self.params.step * frac)
                    .unwrap()
                    .sample(rng) as u64
            } else {
                0
            }
        };
        let monitor = draw(
            &self.monitor_poisson,
            self.params.monitor_rate,
            &mut self.rng,
        );
        let n = draw(&self.event_poisson, self.params.event_rate, &mut self.rng);
        let cells: Vec<usize> = (0..n)
            .map(|_| self.params.model.place(&self.params.dims, &mut self.rng))
            .collect();
        self.live_us += dt;
        let mut st = self.memory.inner.lock().unwrap();
        let h = st.hist.as_mut().expect("reset in new");
        for c in cells {
            h.counts[c] += 1;
        }
        h.monitor += monitor;
        h.live_time = micros_to_secs(self.live_us);
        st.events += n;
        Some(dt)
    }

    pub fn histogram(&self) -> Histogram {
        self.memory.sample().expect("reset in new")
    }

    pub fn events_generated(&self) -> u64 {
        self.memory.inner.lock().unwrap().events
    }
}

/// Writes the `HIST1` text spectrum format.
pub fn write_dat(path: &Path, h: &Histogram) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::with_capacity(h.cells() * 4 + 64);
    out.push_str(&format!("HIST1 {}", h.dims.len()));
    for d in &h.dims {
        out.push_str(&format!(" {d}"));
    }
    out.push_str(&format!(
        "\nmonitor={} live_time={}\n",
        h.monitor, h.live_time
    ));
    for c in &h.counts {
        out.push_str(&c.to_string());
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())
}

pub fn read_dat(path: &Path) -> io::Result<Histogram> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty"))?
        .split(' ')
        .collect();
    if header.first() != Some(&"HIST1") {
        return Err(bad("bad magic"));
    }
    let ndims: usize = header
        .get(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad ndims"))?;
    let dims: Vec<usize> = header[2..]
        .iter()
        .map(|s| s.parse().map_err(|_| bad("bad dim")))
        .collect::<Result<_, _>>()?;
    if dims.len() != ndims {
        return Err(bad("dim count"));
    }
    let meta = lines.next().ok_or_else(|| bad("missing meta"))?;
    let (m, l) = meta.split_once(' ').ok_or_else(|| bad("bad meta"))?;
    let monitor = m
        .strip_prefix("monitor=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("monitor"))?;
    let live_time = l
        .strip_prefix("live_time=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("live_time"))?;
    let counts: Vec<u64> = lines
        .map(|s| s.parse().map_err(|_| bad("bad count")))
        .collect::<Result<_, _>>()?;
    let h = Histogram {
        dims,
        counts,
        monitor,
        live_time,
    };
    if !h.is_consistent() {
        return Err(bad("count length"));
    }
    Ok(h)
}

pub(crate) struct Daq {
    params: DaqParams,
}

fn valid_base(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"_.-".contains(&b))
}

impl Daq {
    pub fn new(params: DaqParams) -> Self {
        Self { params }
    }

    fn flags(core: &ResidentCore) -> Vec<String> {
        core.get_text("flags")
            .unwrap_or_default()
            .split(',')
            .filter(|f| !f.is_empty())
            .map(str::to_string)
            .collect()
    }

    fn set_flags(core: &ResidentCore, flags: &[String]) -> Result<(), String> {
        core.set("flags", flags.join(","))?;
        Ok(())
    }

    fn start(&mut self, core: &mut ResidentCore, cmd: &Command) -> Result<(), String> {
        let (pos, kv) = split_kv(&cmd.args);
        let count_limit: u64 = parse_num("count limit", pos.first().copied())?;
        let time_limit: f64 = parse_num("time limit", pos.get(1).copied())?;
        if !(time_limit >= 0.0 && time_limit.is_finite()) {
            return Err("time limit must be >= 0".into());
        }
        let mut sweep = 0u64;
        let mut detector = core.name().to_string();
        let mut tag = String::new();
        for (k, v) in kv {
            match k {
                "sweep" => sweep = parse_num("sweep", Some(v))?,
                "det" => detector = v.to_string(),
                "tag" if valid_base(v) => tag = v.to_string(),
                _ => return Err(format!("bad option {k}={v}")),
            }
        }
        let base = core
            .get_text("file")
            .filter(|b| !b.is_empty())
            .ok_or("no file base set")?;
        for flag in Self::flags(core) {
            if flag == "temperature" && core.ctx.db.get_int("/temp/stable") == Some(0) {
                return Err("gate closed: temperature".into());
            }
        }

        let seed = seed_for(core.ctx.seed, &detector, sweep);
        let limits = AcquisitionLimits {
            count_limit,
            time_limit,
        };
        let mut acq = Acquisition::new(
            self.params.clone(),
            limits,
            seed,
            core.ctx.histogram.clone(),
        );
        core.set("state", "running")?;
        let mut stopped_by = None;
        while stopped_by.is_none() {
            if core.stopping() {
                return Err("resident stopped".into());
            }
            let Some(dt) = acq.step() else { break };
            core.clock().advance(dt);
            for other in core.poll_commands() {
                match other.verb.as_str() {
                    "stop" => stopped_by = Some(other.seq),
                    "ping" => core.reply(other.seq, "ok")?,
                    _ => core.reply(other.seq, "error: busy")?,
                }
            }
        }

        let h = acq.histogram();
        let file = format!("{base}{tag}.dat");
        let path: PathBuf = core.ctx.root.join("data").join(&file);
        write_dat(&path, &h).map_err(|e| format!("io: {e}"))?;
        core.set("state", "idle")?;
        core.set("monitor", h.monitor as i64)?;
        core.set("live_time", h.live_time)?;
        core.set("events", acq.events_generated() as i64)?;
        core.set("last_file", file.as_str())?;
        core.record(&format!(
            "acq {file} det={detector} sweep={sweep} monitor={} live_time={} events={}{}",
            h.monitor,
            h.live_time,
            acq.events_generated(),
            if stopped_by.is_some() { " stopped" } else { "" }
        ))?;
        if let Some(seq) = stopped_by {
            core.reply(seq, "ok")?;
        }
        Ok(())
    }
}

impl Device for Daq {
    fn init(&mut self, core: &mut ResidentCore) -> Result<(), String> {
        core.default("file", "")?;
        core.default("flags", "temperature")?;
        core.default("monitor", 0i64)?;
        core.default("live_time", 0.0)?;
        core.default("events", 0i64)?;
        core.default("last_file", "")?;
        // an acquisition cut short by a restart is not resumed
        core.set("state", "idle")?;
        Ok(())
    }

    fn handle(&mut self, core: &mut ResidentCore, cmd: &Command) -> Result<(), String> {
        let arg = cmd.args.first().map(String::as_str);
        match cmd.verb.as_str() {
            "file" => {
                let base = arg
                    .filter(|b| valid_base(b))
                    .ok_or("file expects a base name")?;
                core.set("file", base)?;
                core.record(&format!("file {base}"))
            }
            "flagoff" | "flagon" => {
                let flag = arg.ok_or("missing flag")?;
                let mut flags = Self::flags(core);
                flags.retain(|f| f != flag);
                if cmd.verb == "flagon" {
                    flags.push(flag.to_string());
                }
                Self::set_flags(core, &flags)?;
                core.record(&format!("{} {flag}", cmd.verb))
            }
            "start" => self.start(core, cmd),
            "stop" => Ok(()),
            other => Err(format!("unknown command {other}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residents::testutil::Bench;
    use crate::rtdb::VarValue;

    #[test]
    fn start_writes_dat_and_stops_at_limit() {
        let mut b = Bench::standard("Tofa");
        assert_eq!(b.cmd("start 2000 1000"), "error: no file base set");
        assert_eq!(b.cmd("file PB160502a"), "ok");
        assert_eq!(b.cmd("start 2000 1000"), "ok");
        let h = read_dat(&b.dir.path().join("data/PB160502a.dat")).unwrap();
        assert!(h.monitor >= 2000 || h.live_time >= 1000.0);
        // at 10 monitor counts/s the count limit ends it well before 1000 s
        assert!(h.monitor >= 2000 && h.live_time < 1000.0);
        assert_eq!(h.dims, vec![1024]);
        assert_eq!(
            Some(h.total() as i64),
            b.var("events").and_then(|v| v.as_int())
        );
        assert_eq!(b.db().clock().now(), secs_to_micros(h.live_time));
    }

    #[test]
    fn zero_count_limit_is_immediate() {
        let mut b = Bench::standard("Tofa");
        b.cmd("file empty");
        assert_eq!(b.cmd("start 0 1000"), "ok");
        let h = read_dat(&b.dir.path().join("data/empty.dat")).unwrap();
        assert_eq!(h.total(), 0);
        assert_eq!(h.monitor, 0);
        assert_eq!(b.db().clock().now(), 0);
    }

    #[test]
    fn identical_seeds_give_identical_files() {
        let run = || {
            let mut b = Bench::standard("Tofa");
            b.cmd("file x");
            assert_eq!(b.cmd("start 500 1000 sweep=3 det=vanady1_1det"), "ok");
            std::fs::read(b.dir.path().join("data/x.dat")).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn temperature_gate() {
        let mut b = Bench::standard("Tofa");
        b.cmd("file g");
        b.db().set("/temp/stable", 0i64, "test").unwrap();
        assert_eq!(b.cmd("start 10 10"), "error: gate closed: temperature");
        assert_eq!(b.cmd("flagoff temperature"), "ok");
        assert_eq!(b.var("flags"), Some(VarValue::Text(String::new())));
        assert_eq!(b.cmd("start 10 10"), "ok");
    }

    #[test]
    fn acquisition_conserves_events() {
        let memory = HistogramMemory::default();
        let limits = AcquisitionLimits {
            count_limit: u64::MAX,
            time_limit: 50.5,
        };
        let mut acq = Acquisition::new(DaqParams::default(), limits, 11, memory.clone());
        let mut last = (0u64, 0.0f64);
        let mut steps = 0;
        while acq.step().is_some() {
            steps += 1;
            let (h, events) = memory.sample_with_events().unwrap();
            assert_eq!(h.total(), events);
            assert!(h.monitor >= last.0 && h.live_time >= last.1);
            last = (h.monitor, h.live_time);
        }
        assert_eq!(steps, 51);
        assert_eq!(acq.histogram().live_time, 50.5);
    }

    #[test]
    fn seeds_differ_by_detector_and_sweep() {
        let a = seed_for(1, "vanady1_1det", 0);
        assert_ne!(a, seed_for(1, "vanady1_2det", 0));
        assert_ne!(a, seed_for(1, "vanady1_1det", 1));
        assert_ne!(a, seed_for(2, "vanady1_1det", 0));
        assert_eq!(a, seed_for(1, "vanady1_1det", 0));
    }

    #[test]
    fn peak_lands_at_model_center() {
        let p = DaqParams::default();
        let h = p.model.synthesize(&p.dims, 200_000, 5);
        let proj = h.tof_projection();
        let (peak, _) = proj.iter().enumerate().max_by_key(|(_, c)| **c).unwrap();
        assert!((peak as i64 - 400).abs() <= 10, "peak at {peak}");
    }
}
