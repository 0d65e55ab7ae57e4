use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{seed_for, Command, Device, Protocol, ResidentCore};
use crate::clock::{secs_to_micros, ListenerId, Micros};
use crate::rtdb::{Db, VarPath};

/// Environment monitor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMonParams {
    /// Seconds between samples.
    pub period: f64,
}

impl Default for EnvMonParams {
    fn default() -> Self {
        Self { period: 10.0 }
    }
}

#[derive(Debug, Default)]
struct Schedule {
    running: bool,
    task: String,
    next_due: Micros,
    next_index: i64,
}

/// Simulated pressure (hPa), humidity (%) and room temperature (°C) of
/// sample `index`.
fn reading(seed: u64, index: i64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, "envmon", index as u64));
    (
        1013.0 + rng.random_range(-2.0..2.0),
        45.0 + rng.random_range(-5.0..5.0),
        21.0 + rng.random_range(-0.5..0.5),
    )
}

struct Sampler {
    db: Db,
    ns: VarPath,
    name: String,
    seed: u64,
    period: Micros,
    protocol: Arc<Mutex<Protocol>>,
    schedule: Arc<Mutex<Schedule>>,
    stop: Arc<AtomicBool>,
}

impl Sampler {
    fn put(&self, leaf: &str, v: impl Into<crate::rtdb::VarValue>) {
        let path = self.ns.child(leaf).expect("valid leaf");
        let _ = self.db.set_var(&path, v.into(), &self.name);
    }

    fn on_advance(&self, to: Micros) {
        let mut s = self.schedule.lock().unwrap();
        if !s.running || s.next_due > to || self.stop.load(Ordering::Acquire) {
            return;
        }
        while s.next_due <= to {
            let (p, rh, t) = reading(self.seed, s.next_index);
            let event = format!(
                "sample {} #{} p={p:.2} rh={rh:.2} t={t:.2}",
                s.task, s.next_index
            );
            let _ = self.protocol.lock().unwrap().record_at(s.next_due, &event);
            self.put("pressure", p);
            self.put("humidity", rh);
            self.put("room_temp", t);
            s.next_index += 1;
            s.next_due += self.period;
        }
        self.put("next_due_us", s.next_due as i64);
        self.put("next_index", s.next_index);
    }
}

pub(crate) struct EnvMonitor {
    params: EnvMonParams,
    schedule: Arc<Mutex<Schedule>>,
    listener: Option<ListenerId>,
}

impl EnvMonitor {
    pub fn new(params: EnvMonParams) -> Self {
        Self {
            params,
            schedule: Arc::default(),
            listener: None,
        }
    }

    fn mirror(core: &ResidentCore, s: &Schedule) -> Result<(), String> {
        core.set("running", s.running as i64)?;
        core.set("task", s.task.as_str())?;
        core.set("next_due_us", s.next_due as i64)?;
        core.set("next_index", s.next_index)?;
        Ok(())
    }
}

impl Device for EnvMonitor {
    fn init(&mut self, core: &mut ResidentCore) -> Result<(), String> {
        let period = secs_to_micros(self.params.period);
        if period == 0 {
            return Err("poll period must be positive".into());
        }
        {
            let mut s = self.schedule.lock().unwrap();
            s.running = core.get_int("running").unwrap_or(0) != 0;
            s.task = core.get_text("task").unwrap_or_default();
            s.next_due = core.get_int("next_due_us").unwrap_or(0).max(0) as Micros;
            s.next_index = core.get_int("next_index").unwrap_or(0);
            Self::mirror(core, &s)?;
        }
        let sampler = Sampler {
            db: core.ctx.db.clone(),
            ns: core.desc.namespace.clone(),
            name: core.desc.name.clone(),
            seed: core.ctx.seed,
            period,
            protocol: core.protocol.clone(),
            schedule: self.schedule.clone(),
            stop: core.ctx.stop.clone(),
        };
        self.listener = Some(
            core.clock()
                .add_listener(move |_, to| sampler.on_advance(to)),
        );
        Ok(())
    }

    fn handle(&mut self, core: &mut ResidentCore, cmd: &Command) -> Result<(), String> {
        let mut s = self.schedule.lock().unwrap();
        match cmd.verb.as_str() {
            "start" => {
                if s.running {
                    return Err(format!("already running task {}", s.task));
                }
                let task = cmd
                    .args
                    .first()
                    .cloned()
                    .unwrap_or_else(|| "default".into());
                s.running = true;
                s.task = task;
                s.next_due = core.clock().now() + secs_to_micros(self.params.period);
                s.next_index = 0;
                Self::mirror(core, &s)?;
                core.record(&format!("start {} period={}", s.task, self.params.period))
            }
            "stop" => {
                if !s.running {
                    return Ok(());
                }
                s.running = false;
                Self::mirror(core, &s)?;
                core.record(&format!("stop {} samples={}", s.task, s.next_index))
            }
            other => Err(format!("unknown command {other}")),
        }
    }

    fn shutdown(&mut self, core: &mut ResidentCore) {
        if let Some(id) = self.listener.take() {
            core.clock().remove_listener(id);
        }
    }
}
