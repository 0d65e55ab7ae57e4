//! Simulated device residents and the instrument macro library.
//!
//! A resident owns one database namespace. It receives commands by watching
//! `<ns>/cmd`, and answers through `<ns>/status`, `<ns>/busy` and
//! `<ns>/done`. Residents are handed a database handle, the virtual clock and
//! a data directory; they have no access to the gateway or any socket.
//!
//! Command frames written to `<ns>/cmd` are tab-separated text:
//! `<seq>\t<command>\t<arg>...`. After executing one, the resident writes
//! `<ns>/status` (`ok` or `error: ...`), then `<ns>/busy = 0`, then
//! `<ns>/done = <seq>`.

mod daq;
mod envmon;
pub mod macros;
mod motor;
mod protocol;
mod shutter;
mod temp;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimClock;
use crate::rtdb::{Db, RtdbError, Subscription, VarPath, VarValue};

pub use daq::{
    read_dat, seed_for, write_dat, Acquisition, AcquisitionLimits, DaqParams, Histogram,
    HistogramMemory, SpectrumModel, DEFAULT_TOF_CHANNELS,
};
pub use envmon::EnvMonParams;
pub use motor::MotorParams;
pub use protocol::{read_protocol, Protocol, ProtocolRecord};
pub use shutter::ShutterParams;
pub use temp::{settle_time, TempParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Motor,
    Shutter,
    Temp,
    Daq,
    EnvMon,
}

/// Kind-specific simulation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SimParams {
    Motor(MotorParams),
    Shutter(ShutterParams),
    Temp(TempParams),
    Daq(DaqParams),
    EnvMon(EnvMonParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub name: String,
    pub namespace: VarPath,
    pub sim: SimParams,
}

impl DeviceDescriptor {
    pub fn kind(&self) -> DeviceKind {
        match self.sim {
            SimParams::Motor(_) => DeviceKind::Motor,
            SimParams::Shutter(_) => DeviceKind::Shutter,
            SimParams::Temp(_) => DeviceKind::Temp,
            SimParams::Daq(_) => DeviceKind::Daq,
            SimParams::EnvMon(_) => DeviceKind::EnvMon,
        }
    }

    /// Default protocol location when `open_prot` gets no path.
    pub fn default_protocol_path(&self) -> PathBuf {
        PathBuf::from(format!("prot/{}.txt", self.name))
    }
}

/// The standard instrument: sample-changer motor, beam shutters, temperature
/// controller, TOF acquisition and environment monitor.
pub fn standard_devices() -> Vec<DeviceDescriptor> {
    let dev = |name: &str, ns: &str, sim| DeviceDescriptor {
        name: name.into(),
        namespace: crate::rtdb::p(ns),
        sim,
    };
    vec![
        dev("Motor", "/motor", SimParams::Motor(MotorParams::default())),
        dev(
            "Shutter",
            "/shutter",
            SimParams::Shutter(ShutterParams::default()),
        ),
        dev("Temp", "/temp", SimParams::Temp(TempParams::default())),
        dev("Tofa", "/tofa", SimParams::Daq(DaqParams::default())),
        dev(
            "Unipa",
            "/unipa",
            SimParams::EnvMon(EnvMonParams::default()),
        ),
    ]
}

#[derive(Debug, Error)]
pub enum ResidentError {
    #[error("database: {0}")]
    Db(#[from] RtdbError),
    #[error("init of {device} failed: {reason}")]
    Init { device: String, reason: String },
}

/// What a resident is given to run: no network handles.
#[derive(Clone)]
pub struct ResidentCtx {
    pub db: Db,
    pub root: PathBuf,
    pub seed: u64,
    pub stop: Arc<AtomicBool>,
    pub histogram: HistogramMemory,
}

impl ResidentCtx {
    pub fn clock(&self) -> &SimClock {
        self.db.clock()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }
}

/// A decoded command frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Command {
    pub seq: i64,
    pub verb: String,
    pub args: Vec<String>,
}

impl Command {
    pub fn encode(seq: i64, verb: &str, args: &[String]) -> String {
        let mut s = format!("{seq}\t{verb}");
        for a in args {
            s.push('\t');
            s.push_str(a);
        }
        s
    }

    pub fn decode(text: &str) -> Option<Self> {
        let mut it = text.split('\t');
        let seq = it.next()?.parse().ok()?;
        let verb = it.next().filter(|v| !v.is_empty())?.to_string();
        Some(Self {
            seq,
            verb,
            args: it.map(str::to_string).collect(),
        })
    }
}

/// Shared plumbing available to every device implementation.
pub(crate) struct ResidentCore {
    pub ctx: ResidentCtx,
    pub desc: DeviceDescriptor,
    pub protocol: Arc<Mutex<Protocol>>,
    inbox: Subscription,
}

impl ResidentCore {
    pub fn name(&self) -> &str {
        &self.desc.name
    }

    pub fn clock(&self) -> &SimClock {
        self.ctx.clock()
    }

    pub fn path(&self, leaf: &str) -> VarPath {
        let mut p = self.desc.namespace.clone();
        for seg in leaf.split('/') {
            p = p.child(seg).expect("valid leaf");
        }
        p
    }

    pub fn set(&self, leaf: &str, v: impl Into<VarValue>) -> Result<u64, String> {
        self.ctx
            .db
            .set_var(&self.path(leaf), v.into(), &self.desc.name)
            .map_err(|e| e.to_string())
    }

    /// Writes `v` only when the variable does not exist yet.
    pub fn default(&self, leaf: &str, v: impl Into<VarValue>) -> Result<(), String> {
        if self.get(leaf).is_none() {
            self.set(leaf, v)?;
        }
        Ok(())
    }

    pub fn get(&self, leaf: &str) -> Option<VarValue> {
        self.ctx.db.get_var(&self.path(leaf)).ok().map(|e| e.value)
    }

    pub fn get_int(&self, leaf: &str) -> Option<i64> {
        self.get(leaf).and_then(|v| v.as_int())
    }

    pub fn get_real(&self, leaf: &str) -> Option<f64> {
        self.get(leaf).and_then(|v| v.as_real())
    }

    pub fn get_text(&self, leaf: &str) -> Option<String> {
        self.get(leaf).and_then(|v| v.as_text().map(str::to_string))
    }

    pub fn record(&self, event: &str) -> Result<(), String> {
        self.protocol
            .lock()
            .unwrap()
            .record(event)
            .map_err(|e| format!("io: {e}"))
    }

    pub fn stopping(&self) -> bool {
        self.ctx.stop.load(Ordering::Acquire)
    }

    /// Completes command `seq` with `status`.
    pub fn reply(&self, seq: i64, status: &str) -> Result<(), String> {
        self.set("status", status)?;
        self.set("busy", 0i64)?;
        self.set("done", seq)?;
        Ok(())
    }

    /// Commands that arrived while a long operation runs.
    pub fn poll_commands(&self) -> Vec<Command> {
        self.inbox
            .drain()
            .into_iter()
            .filter_map(|e| e.value.as_text().and_then(Command::decode))
            .collect()
    }

    fn open_protocol(&self, arg: Option<&str>) -> Result<(), String> {
        let rel = arg
            .map(PathBuf::from)
            .unwrap_or_else(|| self.desc.default_protocol_path());
        let full = self.ctx.resolve(&rel);
        self.protocol
            .lock()
            .unwrap()
            .open(&full)
            .map_err(|e| format!("io: cannot open {}: {e}", rel.display()))?;
        self.set("prot", rel.to_string_lossy().as_ref())?;
        self.record(&format!("open_prot {}", rel.display()))
    }
}

/// Behaviour of one simulated device.
pub(crate) trait Device: Send {
    /// Creates missing state variables and reattaches after a restart.
    fn init(&mut self, core: &mut ResidentCore) -> Result<(), String>;
    fn handle(&mut self, core: &mut ResidentCore, cmd: &Command) -> Result<(), String>;
    fn shutdown(&mut self, _core: &mut ResidentCore) {}
}

fn build_device(sim: &SimParams) -> Box<dyn Device> {
    match sim {
        SimParams::Motor(p) => Box::new(motor::Motor::new(p.clone())),
        SimParams::Shutter(p) => Box::new(shutter::Shutters::new(p.clone())),
        SimParams::Temp(p) => Box::new(temp::TempController::new(p.clone())),
        SimParams::Daq(p) => Box::new(daq::Daq::new(p.clone())),
        SimParams::EnvMon(p) => Box::new(envmon::EnvMonitor::new(p.clone())),
    }
}

/// A resident that has initialised its namespace and is ready to run.
pub struct PreparedResident {
    core: ResidentCore,
    device: Box<dyn Device>,
}

/// Initialises the device namespace synchronously. Separate from the loop so
/// a kernel can bring all namespaces up in a fixed order before threads start.
pub fn prepare_resident(
    desc: DeviceDescriptor,
    ctx: ResidentCtx,
) -> Result<PreparedResident, ResidentError> {
    let inbox = ctx.db.subscribe(Some(&desc.namespace.child("cmd")?));
    let protocol = Arc::new(Mutex::new(Protocol::new(&desc.name, ctx.clock().clone())));
    let mut core = ResidentCore {
        ctx,
        desc,
        protocol,
        inbox,
    };
    let mut device = build_device(&core.desc.sim);
    let init = |core: &mut ResidentCore, device: &mut Box<dyn Device>| -> Result<(), String> {
        core.default("status", "ok")?;
        core.default("busy", 0i64)?;
        core.default("done", 0i64)?;
        core.default("prot", "")?;
        if let Some(rel) = core.get_text("prot").filter(|p| !p.is_empty()) {
            let full = core.ctx.resolve(Path::new(&rel));
            core.protocol
                .lock()
                .unwrap()
                .reopen(&full)
                .map_err(|e| format!("io: {e}"))?;
        }
        device.init(core)
    };
    init(&mut core, &mut device).map_err(|reason| ResidentError::Init {
        device: core.desc.name.clone(),
        reason,
    })?;
    Ok(PreparedResident { core, device })
}

impl PreparedResident {
    /// Serves commands until the stop flag is raised.
    pub fn run(mut self) {
        let core = &mut self.core;
        while !core.stopping() {
            let entry = match core.inbox.recv_timeout(Duration::from_millis(20)) {
                Ok(Some(e)) => e,
                Ok(None) => continue,
                Err(_) => break,
            };
            let Some(cmd) = entry.value.as_text().and_then(Command::decode) else {
                let _ = core.set("status", "error: malformed command frame");
                continue;
            };
            if core.set("busy", 1i64).is_err() {
                break;
            }
            let result = match cmd.verb.as_str() {
                "ping" => Ok(()),
                "open_prot" => core.open_protocol(cmd.args.first().map(String::as_str)),
                "note" => core.record(&cmd.args.join(" ")),
                _ => self.device.handle(core, &cmd),
            };
            if core.stopping() {
                break;
            }
            let status = match result {
                Ok(()) => "ok".to_string(),
                Err(e) => format!("error: {e}"),
            };
            if core.reply(cmd.seq, &status).is_err() {
                break;
            }
        }
        self.device.shutdown(&mut self.core);
    }
}

/// Runs one resident on the current thread until its stop flag is raised.
pub fn resident_loop(desc: DeviceDescriptor, ctx: ResidentCtx) -> Result<(), ResidentError> {
    prepare_resident(desc, ctx)?.run();
    Ok(())
}

/// A resident running on its own thread.
pub struct ResidentHandle {
    pub name: String,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ResidentHandle {
    pub fn spawn(prepared: PreparedResident) -> Self {
        let name = prepared.core.desc.name.clone();
        let stop = prepared.core.ctx.stop.clone();
        let join = std::thread::Builder::new()
            .name(format!("resident-{name}"))
            .spawn(move || prepared.run())
            .expect("spawn resident thread");
        Self {
            name,
            stop,
            join: Some(join),
        }
    }

    pub fn is_running(&self) -> bool {
        self.join.as_ref().is_some_and(|j| !j.is_finished())
    }

    /// Asks the thread to stop without waiting for it.
    pub fn raise_stop(&self) {
        self.stop.store(true, Ordering::Release);
    }

    /// Raises the stop flag and joins the thread.
    pub fn stop(&mut self) {
        self.raise_stop();
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for ResidentHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Splits `key=value` arguments from positional ones.
pub(crate) fn split_kv(args: &[String]) -> (Vec<&str>, Vec<(&str, &str)>) {
    let mut pos = Vec::new();
    let mut kv = Vec::new();
    for a in args {
        match a.split_once('=') {
            Some((k, v)) => kv.push((k, v)),
            None => pos.push(a.as_str()),
        }
    }
    (pos, kv)
}

pub(crate) fn parse_num<T: std::str::FromStr>(what: &str, s: Option<&str>) -> Result<T, String> {
    let s = s.ok_or_else(|| format!("missing {what}"))?;
    s.parse().map_err(|_| format!("bad {what} {s:?}"))
}


#[cfg(test)]
mod tests {
    use super::testutil::Bench;
    use super::*;

    #[test]
    fn command_frame_round_trip() {
        let c = Command::encode(3, "start", &["2000".into(), "sweep=1".into()]);
        assert_eq!(c, "3\tstart\t2000\tsweep=1");
        assert_eq!(
            Command::decode(&c).unwrap(),
            Command {
                seq: 3,
                verb: "start".into(),
                args: vec!["2000".into(), "sweep=1".into()]
            }
        );
        assert!(Command::decode("x\tstart").is_none());
        assert!(Command::decode("1\t").is_none());
    }

    #[test]
    fn unknown_command_keeps_resident_alive() {
        let mut b = Bench::standard("Motor");
        assert_eq!(b.cmd("fly"), "error: unknown command fly");
        assert_eq!(b.var("busy"), Some(VarValue::Int(0)));
        assert_eq!(b.cmd("ping"), "ok");
    }

    #[test]
    fn open_prot_default_path_and_header() {
        let mut b = Bench::standard("Motor");
        assert_eq!(b.cmd("open_prot"), "ok");
        assert_eq!(
            b.protocol("prot/Motor.txt"),
            vec!["open_prot prot/Motor.txt"]
        );
        let mut t = Bench::standard("Tofa");
        assert_eq!(t.cmd("open_prot txt/pb160502a.txt"), "ok");
        assert!(t.dir.path().join("txt/pb160502a.txt").exists());
        assert_eq!(
            t.protocol("txt/pb160502a.txt"),
            vec!["open_prot txt/pb160502a.txt"]
        );
    }

    #[test]
    fn open_prot_unwritable_reports_io_error() {
        let mut b = Bench::standard("Motor");
        // a regular file where a directory is expected cannot be created under
        std::fs::write(b.dir.path().join("blocked"), "x").unwrap();
        let status = b.cmd("open_prot blocked/p.txt");
        assert!(status.starts_with("error: io"), "{status}");
        assert_eq!(b.cmd("ping"), "ok");
    }

    #[test]
    fn restarted_resident_serves_from_db_state() {
        let mut b = Bench::standard("Motor");
        assert_eq!(b.cmd("open_prot p.txt"), "ok");
        assert_eq!(b.cmd("move changer 60"), "ok");
        b.handle.take().unwrap().stop();
        let ctx = ResidentCtx {
            stop: Arc::new(AtomicBool::new(false)),
            ..b.ctx.clone()
        };
        b.handle = Some(ResidentHandle::spawn(
            prepare_resident(b.desc.clone(), ctx).unwrap(),
        ));
        assert_eq!(b.cmd("getpos"), "ok");
        assert_eq!(b.var("pos/changer"), Some(VarValue::Real(60.0)));
        let events = b.protocol("p.txt");
        assert_eq!(events.last().unwrap(), "getpos changer=60.000");
    }
}
