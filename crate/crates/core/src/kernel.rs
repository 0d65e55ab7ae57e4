//! One boot of the instrument: residents, the command dispatcher and the
//! script runner.
//!
//! Everything here is in-memory and discarded on restart. State that must
//! survive lives in the database; the supervisor restores it from the
//! recovery slot and boots a fresh kernel on top.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::clock::{ListenerId, Micros};
use crate::residents::macros::{self, DeviceBus};
use crate::residents::{
    prepare_resident, standard_devices, Command, DeviceDescriptor, HistogramMemory, ResidentCtx,
    ResidentError, ResidentHandle,
};
use crate::rtdb::{p, Db, RtdbError, Snapshot, SnapshotRecord, VarPath, VarValue};
use crate::script::{
    self, Engine, EngineError, ExecState, ParseError, Program, RunHooks, ScriptError, StatementKind,
};
use crate::supervisor::{RecoverySlot, Watchdog};

/// Watchdog component name of the kernel.
pub const KERNEL_COMPONENT: &str = "kernel";
const WRITER: &str = "kernel";
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone)]
pub struct KernelConfig {
    /// Directory for protocol files, spectra and recovery state.
    pub root: PathBuf,
    pub devices: Vec<DeviceDescriptor>,
    pub seed: u64,
}

impl KernelConfig {
    pub fn standard(root: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            root: root.into(),
            devices: standard_devices(),
            seed,
        }
    }
}

#[derive(Debug, Error)]
pub enum KernelError {
    #[error(transparent)]
    Resident(#[from] ResidentError),
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Db(#[from] RtdbError),
    #[error("no script loaded")]
    NoProgram,
    #[error("a script is already running")]
    AlreadyRunning,
    #[error("no question pending")]
    NotWaiting,
    #[error("no checkpoint {0}")]
    NoCheckpoint(u32),
    #[error("start index {0} out of range")]
    BadIndex(usize),
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("kernel halted")]
    Halted,
}

pub type RunOutcome = Result<ExecState, ScriptError>;

/// Recovery hooks supplied by the supervisor.
#[derive(Clone, Default)]
pub struct Supervision {
    pub watchdog: Option<Arc<Watchdog>>,
    pub slot: Option<RecoverySlot>,
}

/// Called on the runner thread before each statement starts.
pub type Observer = Arc<dyn Fn(usize) + Send + Sync>;

#[derive(Default)]
struct Control {
    stop: AtomicBool,
    paused: AtomicBool,
    answer: Mutex<Option<String>>,
    answer_cv: Condvar,
}

struct ResidentSlot {
    desc: DeviceDescriptor,
    handle: Option<ResidentHandle>,
}

pub struct Kernel {
    config: KernelConfig,
    db: Db,
    histogram: HistogramMemory,
    supervision: Supervision,
    residents: Mutex<Vec<ResidentSlot>>,
    frozen: Arc<AtomicBool>,
    seq: AtomicI64,
    heartbeat: Mutex<Option<ListenerId>>,
    program: Mutex<Option<Program>>,
    runner: Mutex<Option<JoinHandle<RunOutcome>>>,
    control: Control,
    crash_after: Mutex<Option<usize>>,
    observer: Mutex<Option<Observer>>,
}

impl Kernel {
    /// Initialises every device namespace in descriptor order, then starts
    /// the resident threads.
    pub fn boot(
        config: KernelConfig,
        db: Db,
        supervision: Supervision,
    ) -> Result<Arc<Self>, KernelError> {
        let histogram = HistogramMemory::default();
        let mut prepared = Vec::new();
        for desc in &config.devices {
            let ctx = ResidentCtx {
                db: db.clone(),
                root: config.root.clone(),
                seed: config.seed,
                stop: Arc::new(AtomicBool::new(false)),
                histogram: histogram.clone(),
            };
            prepared.push((desc.clone(), prepare_resident(desc.clone(), ctx)?));
        }
        let residents = prepared
            .into_iter()
            .map(|(desc, p)| ResidentSlot {
                desc,
                handle: Some(ResidentHandle::spawn(p)),
            })
            .collect();

        let next_seq = config
            .devices
            .iter()
            .filter_map(|d| db.get_int(&format!("{}/done", d.namespace)))
            .max()
            .unwrap_or(0)
            + 1;
        let frozen = Arc::new(AtomicBool::new(false));
        let heartbeat = supervision.watchdog.clone().map(|wd| {
            let frozen = frozen.clone();
            let _ = wd.heartbeat(KERNEL_COMPONENT, db.clock().now());
            db.clock().add_listener(move |_, to| {
                if !frozen.load(Ordering::Acquire) {
                    let _ = wd.heartbeat(KERNEL_COMPONENT, to);
                }
            })
        });
        Ok(Arc::new(Self {
            config,
            db,
            histogram,
            supervision,
            residents: Mutex::new(residents),
            frozen,
            seq: AtomicI64::new(next_seq),
            heartbeat: Mutex::new(heartbeat),
            program: Mutex::new(None),
            runner: Mutex::new(None),
            control: Control::default(),
            crash_after: Mutex::new(None),
            observer: Mutex::new(None),
        }))
    }

    pub fn db(&self) -> &Db {
        &self.db
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn histogram(&self) -> &HistogramMemory {
        &self.histogram
    }

    pub fn devices(&self) -> &[DeviceDescriptor] {
        &self.config.devices
    }

    fn descriptor(&self, name: &str) -> Option<&DeviceDescriptor> {
        self.config.devices.iter().find(|d| d.name == name)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Acquire)
    }

    /// Simulates a hang: heartbeats cease, residents stop and every pending
    /// dispatch returns `Halted`.
    pub fn freeze(&self) {
        self.frozen.store(true, Ordering::Release);
        for slot in self.residents.lock().unwrap().iter() {
            if let Some(h) = &slot.handle {
                h.raise_stop();
            }
        }
        self.control.answer_cv.notify_all();
    }

    /// Freezes the kernel and joins every thread it owns.
    pub fn teardown(&self) {
        self.freeze();
        self.control.stop.store(true, Ordering::Release);
        let handles: Vec<_> = self
            .residents
            .lock()
            .unwrap()
            .iter_mut()
            .filter_map(|s| s.handle.take())
            .collect();
        for mut h in handles {
            h.stop();
        }
        if let Some(id) = self.heartbeat.lock().unwrap().take() {
            self.db.clock().remove_listener(id);
        }
        let runner = self.runner.lock().unwrap().take();
        if let Some(r) = runner {
            let _ = r.join();
        }
    }

    pub fn resident_running(&self, name: &str) -> bool {
        self.residents
            .lock()
            .unwrap()
            .iter()
            .any(|s| s.desc.name == name && s.handle.as_ref().is_some_and(|h| h.is_running()))
    }

    /// Stops one resident thread; the rest of the kernel keeps running.
    pub fn stop_resident(&self, name: &str) -> Result<(), KernelError> {
        let handle = {
            let mut rs = self.residents.lock().unwrap();
            let slot = rs
                .iter_mut()
                .find(|s| s.desc.name == name)
                .ok_or_else(|| KernelError::UnknownDevice(name.into()))?;
            slot.handle.take()
        };
        if let Some(mut h) = handle {
            h.stop();
        }
        Ok(())
    }

    /// Relaunches a stopped resident from the current database state.
    pub fn start_resident(&self, name: &str) -> Result<(), KernelError> {
        let mut rs = self.residents.lock().unwrap();
        let slot = rs
            .iter_mut()
            .find(|s| s.desc.name == name)
            .ok_or_else(|| KernelError::UnknownDevice(name.into()))?;
        if slot.handle.as_ref().is_some_and(|h| h.is_running()) {
            return Ok(());
        }
        let ctx = ResidentCtx {
            db: self.db.clone(),
            root: self.config.root.clone(),
            seed: self.config.seed,
            stop: Arc::new(AtomicBool::new(false)),
            histogram: self.histogram.clone(),
        };
        slot.handle = Some(ResidentHandle::spawn(prepare_resident(
            slot.desc.clone(),
            ctx,
        )?));
        Ok(())
    }

    /// Sends one command to a resident and waits for its completion.
    /// `timeout` bounds the real-time wait.
    pub fn command(
        &self,
        device: &str,
        verb: &str,
        args: &[String],
        timeout: Option<Duration>,
    ) -> Result<(), EngineError> {
        if self.is_frozen() {
            return Err(EngineError::Halted);
        }
        let desc = self
            .descriptor(device)
            .ok_or_else(|| EngineError::Unknown(format!("device {device}")))?;
        if !self.resident_running(device) {
            return Err(EngineError::Failed(format!(
                "resident {device} not running"
            )));
        }
        let seq = self.seq.fetch_add(1, Ordering::AcqRel);
        let sub = self.db.subscribe(Some(&desc.namespace));
        let cmd_path = desc.namespace.child("cmd").expect("valid leaf");
        self.db
            .set_var(&cmd_path, Command::encode(seq, verb, args).into(), WRITER)
            .map_err(|e| EngineError::Failed(e.to_string()))?;
        let started = Instant::now();
        let mut status = String::new();
        loop {
            if self.is_frozen() {
                return Err(EngineError::Halted);
            }
            if timeout.is_some_and(|t| started.elapsed() > t) {
                return Err(EngineError::Failed(format!("no reply from {device}")));
            }
            match sub.recv_timeout(POLL) {
                Ok(Some(e)) => match e.path.last() {
                    "status" => status = e.value.as_text().unwrap_or_default().to_string(),
                    "done" if e.value.as_int() == Some(seq) => break,
                    _ => {}
                },
                Ok(None) => {
                    if !self.resident_running(device) && !self.is_frozen() {
                        return Err(EngineError::Failed(format!(
                            "resident {device} not running"
                        )));
                    }
                }
                Err(e) => return Err(EngineError::Failed(e.to_string())),
            }
        }
        match status.strip_prefix("error: ") {
            None => Ok(()),
            Some(reason) => Err(EngineError::Failed(format!("{device}: {reason}"))),
        }
    }

    /// Parses and stores a script; it replaces any previous one.
    pub fn load_script(&self, text: &str) -> Result<Program, KernelError> {
        if self.is_running() {
            return Err(KernelError::AlreadyRunning);
        }
        let program = script::parse(text)?;
        self.db.set("/script/source", text, WRITER)?;
        self.db
            .set("/script/hash", program.source_hash.as_str(), WRITER)?;
        *self.program.lock().unwrap() = Some(program.clone());
        Ok(program)
    }

    pub fn program(&self) -> Option<Program> {
        self.program.lock().unwrap().clone()
    }

    pub fn is_running(&self) -> bool {
        self.runner
            .lock()
            .unwrap()
            .as_ref()
            .is_some_and(|r| !r.is_finished())
    }

    /// Statement index of checkpoint `ordinal` (1-based).
    pub fn checkpoint_index(&self, ordinal: u32) -> Result<usize, KernelError> {
        let program = self.program().ok_or(KernelError::NoProgram)?;
        program
            .checkpoint_index(ordinal)
            .ok_or(KernelError::NoCheckpoint(ordinal))
    }

    /// Starts the loaded script at statement `from` on a runner thread.
    pub fn start(self: &Arc<Self>, from: usize) -> Result<(), KernelError> {
        if self.is_frozen() {
            return Err(KernelError::Halted);
        }
        let program = self.program().ok_or(KernelError::NoProgram)?;
        if from > program.len() {
            return Err(KernelError::BadIndex(from));
        }
        let mut runner = self.runner.lock().unwrap();
        if runner.as_ref().is_some_and(|r| !r.is_finished()) {
            return Err(KernelError::AlreadyRunning);
        }
        self.control.stop.store(false, Ordering::Release);
        self.control.paused.store(false, Ordering::Release);
        *self.control.answer.lock().unwrap() = None;
        self.db.set("/script/run_from", from as i64, WRITER)?;
        self.capture_anchor(from)?;
        let kernel = self.clone();
        *runner = Some(
            std::thread::Builder::new()
                .name("script".into())
                .spawn(move || {
                    let mut engine = Dispatcher {
                        kernel: kernel.clone(),
                    };
                    let mut hooks = Hooks {
                        kernel: kernel.clone(),
                        program: &program,
                    };
                    script::run(&program, &mut engine, from, &kernel.db, &mut hooks)
                })
                .expect("spawn script thread"),
        );
        Ok(())
    }

    /// Blocks until the current run ends. `None` if nothing was started.
    pub fn wait(&self) -> Option<RunOutcome> {
        let r = self.runner.lock().unwrap().take()?;
        Some(
            r.join()
                .unwrap_or_else(|_| Err(ScriptError::Engine("script thread panicked".into()))),
        )
    }

    /// Asks the run to end before its next statement.
    pub fn stop_run(&self) {
        self.control.stop.store(true, Ordering::Release);
        self.control.answer_cv.notify_all();
    }

    pub fn pause(&self, paused: bool) {
        self.control.paused.store(paused, Ordering::Release);
        let _ = self.db.set("/script/paused", paused as i64, WRITER);
    }

    pub fn is_paused(&self) -> bool {
        self.control.paused.load(Ordering::Acquire)
    }

    /// Answers the pending question; an empty text accepts the default.
    pub fn answer(&self, text: &str) -> Result<(), KernelError> {
        if self.db.get_text("/script/status").as_deref() != Some("waiting") {
            return Err(KernelError::NotWaiting);
        }
        *self.control.answer.lock().unwrap() = Some(text.to_string());
        self.control.answer_cv.notify_all();
        Ok(())
    }

    /// Freezes the kernel right after statement `index` has been made durable.
    pub fn set_crash_after(&self, index: Option<usize>) {
        *self.crash_after.lock().unwrap() = index;
    }

    pub fn set_observer(&self, f: Observer) {
        *self.observer.lock().unwrap() = Some(f);
    }

    fn capture_anchor(&self, index: usize) -> Result<(), RtdbError> {
        let anchor = capture_anchor(&self.db, &anchor_prefixes(&self.config.devices));
        self.db.set("/script/anchor", anchor.to_text(), WRITER)?;
        self.db.set("/script/anchor_index", index as i64, WRITER)?;
        self.db
            .set("/script/anchor_us", self.db.clock().now() as i64, WRITER)?;
        Ok(())
    }
}

impl Drop for Kernel {
    fn drop(&mut self) {
        self.frozen.store(true, Ordering::Release);
        if let Some(id) = self.heartbeat.get_mut().unwrap().take() {
            self.db.clock().remove_listener(id);
        }
    }
}

/// Routes script statements to residents and the macro library.
pub struct Dispatcher {
    kernel: Arc<Kernel>,
}

impl Dispatcher {
    pub fn new(kernel: Arc<Kernel>) -> Self {
        Self { kernel }
    }
}

impl Engine for Dispatcher {
    fn device(&mut self, device: &str, command: &str, args: &[String]) -> Result<(), EngineError> {
        self.kernel.command(device, command, args, None)
    }

    fn call_macro(&mut self, name: &str, args: &[String]) -> Result<(), EngineError> {
        macros::call(self, name, args)
    }
}

impl DeviceBus for Dispatcher {
    fn command(&mut self, device: &str, verb: &str, args: &[String]) -> Result<(), EngineError> {
        self.kernel.command(device, verb, args, None)
    }

    fn probe(&mut self, device: &str, timeout: Duration) -> Result<(), EngineError> {
        self.kernel.command(device, "ping", &[], Some(timeout))
    }

    fn devices(&self) -> Vec<DeviceDescriptor> {
        self.kernel.config.devices.clone()
    }

    fn db(&self) -> &Db {
        &self.kernel.db
    }
}

struct Hooks<'a> {
    kernel: Arc<Kernel>,
    program: &'a Program,
}

impl Hooks<'_> {
    fn interrupted(&self) -> Result<(), ScriptError> {
        if self.kernel.is_frozen() {
            Err(ScriptError::Halted)
        } else if self.kernel.control.stop.load(Ordering::Acquire) {
            Err(ScriptError::Stopped)
        } else {
            Ok(())
        }
    }
}

impl RunHooks for Hooks<'_> {
    fn before_statement(&mut self, _exec: &ExecState, index: usize) -> Result<(), ScriptError> {
        self.interrupted()?;
        while self.kernel.is_paused() {
            std::thread::sleep(POLL);
            self.interrupted()?;
        }
        let observer = self.kernel.observer.lock().unwrap().clone();
        if let Some(f) = observer {
            f(index);
        }
        Ok(())
    }

    fn statement_done(&mut self, _exec: &ExecState, index: usize) -> Result<(), ScriptError> {
        let k = &self.kernel;
        if k.is_frozen() {
            return Err(ScriptError::Halted);
        }
        let now = k.db.clock().now();
        if let Some(wd) = &k.supervision.watchdog {
            let _ = wd.heartbeat(KERNEL_COMPONENT, now);
        }
        if matches!(
            self.program.statements[index].kind,
            StatementKind::Checkpoint(_)
        ) {
            k.capture_anchor(index)?;
        }
        if let Some(slot) = &k.supervision.slot {
            slot.write(&k.db.save_snapshot())
                .map_err(|e| ScriptError::Engine(format!("recovery slot: {e}")))?;
        }
        let mut crash = k.crash_after.lock().unwrap();
        if *crash == Some(index) {
            *crash = None;
            drop(crash);
            k.freeze();
            return Err(ScriptError::Halted);
        }
        Ok(())
    }

    fn await_answer(&mut self, _exec: &ExecState) -> Result<String, ScriptError> {
        let c = &self.kernel.control;
        let mut slot = c.answer.lock().unwrap();
        loop {
            if let Some(a) = slot.take() {
                return Ok(a);
            }
            self.interrupted()?;
            slot = c.answer_cv.wait_timeout(slot, POLL).unwrap().0;
        }
    }
}

/// Database subtrees that hold device and session state: every device
/// namespace, `/meta` and `/script/vars`.
pub fn anchor_prefixes(devices: &[DeviceDescriptor]) -> Vec<VarPath> {
    let mut v: Vec<VarPath> = devices.iter().map(|d| d.namespace.clone()).collect();
    v.push(p("/meta"));
    v.push(p("/script/vars"));
    v
}

fn under(path: &VarPath, prefixes: &[VarPath]) -> bool {
    prefixes.iter().any(|pre| path.starts_with(pre))
}

/// The records of `db` under `prefixes`.
pub fn capture_anchor(db: &Db, prefixes: &[VarPath]) -> Snapshot {
    let mut snap = db.save_snapshot();
    snap.records.retain(|r| under(&r.path, prefixes));
    snap
}

/// Replaces everything under `prefixes` in `base` by the anchor's records.
/// Integer variables whose name ends in `_us` are virtual times and move
/// forward by `shift`.
pub fn apply_anchor(
    base: &Snapshot,
    anchor: &Snapshot,
    prefixes: &[VarPath],
    shift: Micros,
) -> Snapshot {
    let mut records: Vec<SnapshotRecord> = base
        .records
        .iter()
        .filter(|r| !under(&r.path, prefixes))
        .cloned()
        .collect();
    for r in anchor.records.iter().filter(|r| under(&r.path, prefixes)) {
        let value = match &r.value {
            VarValue::Int(t) if r.path.last().ends_with("_us") => VarValue::Int(t + shift as i64),
            v => v.clone(),
        };
        records.push(SnapshotRecord {
            path: r.path.clone(),
            value,
            revision: 0,
        });
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    let revision = base.revision.max(records.len() as u64);
    let n = records.len() as u64;
    for (i, r) in records.iter_mut().enumerate() {
        r.revision = revision - (n - 1 - i as u64);
    }
    Snapshot {
        created: base.created,
        revision,
        records,
    }
}
