//! Watchdog and recovery.
//!
//! The kernel heartbeats on every clock advance and after every statement.
//! When it stops (a fatal fault), the watchdog deadline passes, the
//! supervisor tears the kernel down, lets the restart delay elapse, restores
//! the database from the recovery slot and resumes the script at the nearest
//! checkpoint.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Micros, SimClock};
use crate::kernel::{
    anchor_prefixes, apply_anchor, Kernel, KernelConfig, KernelError, Observer, Supervision,
    KERNEL_COMPONENT,
};
use crate::rtdb::{Db, RtdbError, Snapshot};
use crate::script::{self, resume_point, ExecState, ExecStatus, Program, ScriptError};

/// Default virtual time from the last heartbeat to a hang verdict.
pub const DEFAULT_WATCHDOG_TIMEOUT: Micros = 10_000_000;
/// Virtual reboot time.
pub const DEFAULT_RESTART_DELAY: Micros = 1_600_000;

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error("unknown component {0}")]
    UnknownComponent(String),
    #[error("kernel is healthy")]
    NotHung,
    #[error("recovery slot unreadable: {0}")]
    Restore(RtdbError),
    #[error("recovery anchor at statement {anchor} does not match resume point {resume}")]
    AnchorMismatch { anchor: usize, resume: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Db(#[from] RtdbError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Health {
    Healthy,
    Hung(Vec<String>),
}

/// Heartbeat deadlines per component.
#[derive(Debug)]
pub struct Watchdog {
    timeout: Micros,
    restart_delay: Micros,
    deadlines: Mutex<BTreeMap<String, Micros>>,
    crash_count: AtomicU64,
}

impl Watchdog {
    pub fn new(timeout: Micros, restart_delay: Micros) -> Self {
        assert!(timeout > 0, "watchdog timeout must be positive");
        Self {
            timeout,
            restart_delay,
            deadlines: Mutex::default(),
            crash_count: AtomicU64::new(0),
        }
    }

    pub fn timeout(&self) -> Micros {
        self.timeout
    }

    pub fn restart_delay(&self) -> Micros {
        self.restart_delay
    }

    pub fn register(&self, component: &str, now: Micros) {
        self.deadlines
            .lock()
            .unwrap()
            .insert(component.to_string(), now + self.timeout);
    }

    pub fn heartbeat(&self, component: &str, now: Micros) -> Result<(), SupervisorError> {
        let mut d = self.deadlines.lock().unwrap();
        let deadline = d
            .get_mut(component)
            .ok_or_else(|| SupervisorError::UnknownComponent(component.into()))?;
        *deadline = (*deadline).max(now + self.timeout);
        Ok(())
    }

    pub fn deadline(&self, component: &str) -> Option<Micros> {
        self.deadlines.lock().unwrap().get(component).copied()
    }

    /// Components whose deadline lies before `now`.
    pub fn check(&self, now: Micros) -> Health {
        let hung: Vec<String> = self
            .deadlines
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, &d)| now > d)
            .map(|(c, _)| c.clone())
            .collect();
        if hung.is_empty() {
            Health::Healthy
        } else {
            Health::Hung(hung)
        }
    }

    /// Number of hangs handled so far.
    pub fn crash_count(&self) -> u64 {
        self.crash_count.load(Ordering::Acquire)
    }

    fn count_crash(&self) {
        self.crash_count.fetch_add(1, Ordering::AcqRel);
    }
}

/// The single on-disk database image, replaced atomically.
#[derive(Debug, Clone)]
pub struct RecoverySlot {
    path: PathBuf,
}

impl RecoverySlot {
    /// `<root>/state/recovery.snix`
    pub fn new(root: &Path) -> Self {
        Self {
            path: root.join("state").join("recovery.snix"),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes a new image next to the slot, then renames it over the slot.
    pub fn write(&self, snap: &Snapshot) -> io::Result<()> {
        self.write_bytes(&snap.to_bytes())
    }

    pub(crate) fn write_bytes(&self, bytes: &[u8]) -> io::Result<()> {
        let dir = self.path.parent().expect("slot has a parent");
        fs::create_dir_all(dir)?;
        let tmp = self.path.with_extension("snix.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_data()?;
        }
        fs::rename(&tmp, &self.path)
    }

    /// `Ok(None)` when no image was written yet.
    pub fn read(&self) -> Result<Option<Snapshot>, SupervisorError> {
        match fs::read(&self.path) {
            Ok(bytes) => Snapshot::from_bytes(&bytes)
                .map(Some)
                .map_err(SupervisorError::Restore),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

/// What a restart needs: the image, the script and where to resume.
#[derive(Debug, Clone)]
pub struct RestartPlan {
    pub snapshot: Snapshot,
    pub source_hash: String,
    pub resume_index: usize,
}

impl RestartPlan {
    /// Resume at the last checkpoint at or before the recorded
    /// `last_completed`, but never before the index the run started from.
    pub fn new(snapshot: Snapshot, program: &Program) -> Self {
        let last = snapshot
            .get("/script/last_completed")
            .and_then(|v| v.as_int())
            .filter(|i| *i >= 0)
            .map(|i| i as usize);
        let run_from = snapshot
            .get("/script/run_from")
            .and_then(|v| v.as_int())
            .unwrap_or(0)
            .max(0) as usize;
        Self {
            snapshot,
            source_hash: program.source_hash.clone(),
            resume_index: resume_point(program, last).max(run_from),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultKind {
    Nonfatal,
    Fatal,
}

impl FromStr for FaultKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nonfatal" => Ok(Self::Nonfatal),
            "fatal" => Ok(Self::Fatal),
            other => Err(format!("unknown fault kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisorConfig {
    pub watchdog_timeout: Micros,
    pub restart_delay: Micros,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            watchdog_timeout: DEFAULT_WATCHDOG_TIMEOUT,
            restart_delay: DEFAULT_RESTART_DELAY,
        }
    }
}

/// Outcome of one restart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestartReport {
    /// When the watchdog declared the hang.
    pub hung_at: Micros,
    /// When the new kernel resumed.
    pub resumed_at: Micros,
    /// Where the script resumed, if one was running.
    pub resume_index: Option<usize>,
    /// Virtual time between the recovery anchor and the resume.
    pub shift: Micros,
}

/// Owns the current kernel and replaces it after a hang.
pub struct Supervisor {
    config: KernelConfig,
    sup: SupervisorConfig,
    db: Db,
    watchdog: Arc<Watchdog>,
    slot: RecoverySlot,
    log_path: PathBuf,
    kernel: Mutex<Arc<Kernel>>,
    // the loaded script and its source text
    program: Mutex<Option<(Program, String)>>,
    io_blocked: Arc<AtomicBool>,
    observer: Mutex<Option<Observer>>,
    // serialises restarts
    restarting: Mutex<()>,
}

impl Supervisor {
    pub fn boot(
        config: KernelConfig,
        clock: SimClock,
        sup: SupervisorConfig,
    ) -> Result<Arc<Self>, SupervisorError> {
        let db = Db::new(clock);
        let watchdog = Arc::new(Watchdog::new(sup.watchdog_timeout, sup.restart_delay));
        watchdog.register(KERNEL_COMPONENT, db.clock().now());
        let slot = RecoverySlot::new(&config.root);
        let kernel = Kernel::boot(
            config.clone(),
            db.clone(),
            Supervision {
                watchdog: Some(watchdog.clone()),
                slot: Some(slot.clone()),
            },
        )?;
        let s = Arc::new(Self {
            log_path: config.root.join("state").join("supervisor.log"),
            config,
            sup,
            db,
            watchdog,
            slot,
            kernel: Mutex::new(kernel),
            program: Mutex::new(None),
            io_blocked: Arc::new(AtomicBool::new(false)),
            observer: Mutex::new(None),
            restarting: Mutex::new(()),
        });
        s.log("boot")?;
        Ok(s)
    }

    pub fn kernel(&self) -> Arc<Kernel> {
        self.kernel.lock().unwrap().clone()
    }

    pub fn db(&self) -> &Db {
        &self.db
    }

    pub fn clock(&self) -> &SimClock {
        self.db.clock()
    }

    pub fn watchdog(&self) -> &Watchdog {
        &self.watchdog
    }

    pub fn slot(&self) -> &RecoverySlot {
        &self.slot
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    fn log(&self, event: &str) -> io::Result<()> {
        fs::create_dir_all(self.log_path.parent().expect("log has a parent"))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.log_path)?;
        writeln!(f, "{}\t{event}", self.clock().iso(self.clock().now()))
    }

    /// Installs a statement observer on this and every later kernel.
    pub fn set_observer(&self, f: Observer) {
        self.kernel().set_observer(f.clone());
        *self.observer.lock().unwrap() = Some(f);
    }

    /// Shared flag the gateway consults before any I/O.
    pub fn io_flag(&self) -> Arc<AtomicBool> {
        self.io_blocked.clone()
    }

    pub fn io_blocked(&self) -> bool {
        self.io_blocked.load(Ordering::Acquire)
    }

    /// Operator reset of a nonfatal fault.
    pub fn reset_io(&self) {
        if self.io_blocked.swap(false, Ordering::AcqRel) {
            let _ = self.log("io reset");
        }
    }

    pub fn inject_fault(&self, kind: FaultKind) {
        match kind {
            FaultKind::Nonfatal => self.io_blocked.store(true, Ordering::Release),
            FaultKind::Fatal => self.kernel().freeze(),
        }
        let _ = self.log(&format!(
            "inject {}",
            if kind == FaultKind::Fatal {
                "fatal"
            } else {
                "nonfatal"
            }
        ));
    }

    pub fn check(&self) -> Health {
        self.watchdog.check(self.clock().now())
    }

    /// Loads a script into the current kernel and remembers it for restarts.
    pub fn load_script(&self, text: &str) -> Result<Program, SupervisorError> {
        let program = self.kernel().load_script(text)?;
        *self.program.lock().unwrap() = Some((program.clone(), text.to_string()));
        Ok(program)
    }

    pub fn start(&self, from: usize) -> Result<(), SupervisorError> {
        Ok(self.kernel().start(from)?)
    }

    /// Lets virtual time run past the watchdog deadline of a frozen kernel.
    /// A live kernel is left alone.
    pub fn await_hang(&self) -> Result<Vec<String>, SupervisorError> {
        if !self.kernel().is_frozen() {
            return match self.check() {
                Health::Healthy => Err(SupervisorError::NotHung),
                Health::Hung(c) => Ok(c),
            };
        }
        if let Some(deadline) = self.watchdog.deadline(KERNEL_COMPONENT) {
            self.clock().advance_to(deadline + 1);
        }
        match self.check() {
            Health::Healthy => Err(SupervisorError::NotHung),
            Health::Hung(c) => Ok(c),
        }
    }

    /// Replaces a hung kernel: teardown, restart delay, restore, relaunch
    /// residents and resume the script.
    pub fn restart(&self) -> Result<RestartReport, SupervisorError> {
        let _guard = self.restarting.lock().unwrap();
        let hung = match self.check() {
            Health::Hung(c) => c,
            Health::Healthy => return Err(SupervisorError::NotHung),
        };
        let hung_at = self.clock().now();
        self.log(&format!("hung {}", hung.join(",")))?;
        self.watchdog.count_crash();
        self.kernel().teardown();

        self.clock().advance(self.sup.restart_delay);
        self.io_blocked.store(false, Ordering::Release);
        let now = self.clock().now();

        let snapshot = match self.slot.read() {
            Ok(s) => s,
            Err(e) => {
                let _ = self.log(&format!("restore failed: {e}"));
                return Err(e);
            }
        };
        let program = self.program.lock().unwrap().clone().or_else(|| {
            let text = snapshot
                .as_ref()?
                .get("/script/source")?
                .as_text()?
                .to_string();
            Some((script::parse(&text).ok()?, text))
        });
        let mut report = RestartReport {
            hung_at,
            resumed_at: now,
            resume_index: None,
            shift: 0,
        };
        if let Some(snap) = snapshot {
            let image = match &program {
                Some((program, _)) => {
                    let plan = RestartPlan::new(snap, program);
                    let (image, shift) = self.anchored_image(&plan)?;
                    report.resume_index = Some(plan.resume_index);
                    report.shift = shift;
                    image
                }
                None => snap,
            };
            self.db.restore_snapshot(&image)?;
        }

        self.watchdog.register(KERNEL_COMPONENT, now);
        let kernel = Kernel::boot(
            self.config.clone(),
            self.db.clone(),
            Supervision {
                watchdog: Some(self.watchdog.clone()),
                slot: Some(self.slot.clone()),
            },
        )?;
        if let Some(f) = self.observer.lock().unwrap().clone() {
            kernel.set_observer(f);
        }
        *self.kernel.lock().unwrap() = kernel.clone();
        if let (Some((program, text)), Some(index)) = (&program, report.resume_index) {
            kernel.load_script(text)?;
            if index < program.len() {
                kernel.start(index)?;
            }
        }
        self.log(&format!(
            "restart delay={}s resume={}",
            self.sup.restart_delay as f64 / 1e6,
            report
                .resume_index
                .map_or("none".to_string(), |i| i.to_string())
        ))?;
        Ok(report)
    }

    fn anchored_image(&self, plan: &RestartPlan) -> Result<(Snapshot, Micros), SupervisorError> {
        let snap = &plan.snapshot;
        let Some(text) = snap.get("/script/anchor").and_then(|v| v.as_text()) else {
            return Ok((snap.clone(), 0));
        };
        let anchor = Snapshot::parse(text).map_err(SupervisorError::Restore)?;
        let anchor_index = snap
            .get("/script/anchor_index")
            .and_then(|v| v.as_int())
            .unwrap_or(0) as usize;
        if anchor_index != plan.resume_index {
            return Err(SupervisorError::AnchorMismatch {
                anchor: anchor_index,
                resume: plan.resume_index,
            });
        }
        let anchor_us = snap
            .get("/script/anchor_us")
            .and_then(|v| v.as_int())
            .unwrap_or(0)
            .max(0) as Micros;
        let shift = self.clock().now().saturating_sub(anchor_us);
        let prefixes = anchor_prefixes(&self.config.devices);
        Ok((apply_anchor(snap, &anchor, &prefixes, shift), shift))
    }

    /// Detects the hang of a frozen kernel and restarts it.
    pub fn recover(&self) -> Result<RestartReport, SupervisorError> {
        self.await_hang()?;
        self.restart()
    }

    /// Waits for the running script, recovering from every hang on the way.
    pub fn wait_with_recovery(&self) -> Result<ExecState, SupervisorError> {
        loop {
            let kernel = self.kernel();
            match kernel.wait() {
                Some(Ok(exec)) => return Ok(exec),
                Some(Err(ScriptError::Halted)) => {
                    self.recover()?;
                }
                Some(Err(e)) => {
                    let mut exec = self.exec_state();
                    exec.status = ExecStatus::Aborted(e.to_string());
                    return Ok(exec);
                }
                None if kernel.is_frozen() => {
                    self.recover()?;
                }
                // restarted past the last statement
                None => return Ok(self.exec_state()),
            }
        }
    }

    /// Loads `text`, runs it from statement `from` and recovers from hangs.
    pub fn run_script(&self, text: &str, from: usize) -> Result<ExecState, SupervisorError> {
        self.load_script(text)?;
        self.start(from)?;
        self.wait_with_recovery()
    }

    fn exec_state(&self) -> ExecState {
        let status = match self.db.get_text("/script/status").as_deref() {
            Some("finished") => ExecStatus::Finished,
            Some("aborted") => {
                ExecStatus::Aborted(self.db.get_text("/script/reason").unwrap_or_default())
            }
            Some("running") => ExecStatus::Running,
            _ => ExecStatus::Idle,
        };
        ExecState {
            source_hash: self.db.get_text("/script/hash").unwrap_or_default(),
            last_completed: ExecState::recorded_last_completed(&self.db),
            env: ExecState::load_env(&self.db),
            status,
        }
    }

    /// Stops the current kernel for good.
    pub fn shutdown(&self) {
        self.kernel().teardown();
        let _ = self.log("shutdown");
    }

    pub fn restart_delay_secs(&self) -> f64 {
        self.sup.restart_delay as f64 / 1e6
    }
}
