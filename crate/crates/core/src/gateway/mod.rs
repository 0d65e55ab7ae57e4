//! Remote access to the kernel: JSON-lines requests over a TCP stream or
//! the dual-port-memory window, plus the random fault model.

mod client;
pub mod dpm;
pub mod fault;

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::clock::{format_iso, ListenerId};
use crate::rtdb::{DbEntry, TypeTag, VarPath, VarValue};
use crate::script::ExecState;
use crate::supervisor::{FaultKind, Supervisor};
use crate::viz::{self, Mode};

pub use client::Client;
use dpm::{DpmError, DpmWindow, Ring};
pub use fault::{fault_tick, FaultEvent, FaultModel, FaultProcess};

pub const DEFAULT_PORT: u16 = 4690;

pub const VERBS: &[&str] = &[
    "get",
    "set",
    "list",
    "subscribe",
    "load_script",
    "start",
    "stop",
    "pause",
    "answer",
    "fetch_spectrum",
    "status",
    "inject_fault",
];

const WRITER: &str = "gateway";
const MAX_FRAME: usize = 64 << 20;
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    /// `host:port`
    Stream(String),
    /// Path of the 128 KiB window file.
    Dpm(PathBuf),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Dpm(#[from] DpmError),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("no reply within the timeout")]
    Timeout,
    #[error("{0}")]
    Remote(String),
}

/// Called with every outgoing frame of a session.
pub type Sink = Arc<dyn Fn(String) -> bool + Send + Sync>;

pub struct Gateway {
    sup: Arc<Supervisor>,
    shutdown: Arc<AtomicBool>,
}

fn error_reply(id: u64, msg: impl std::fmt::Display) -> Value {
    json!({"id": id, "ok": false, "error": msg.to_string()})
}

fn str_field<'a>(req: &'a Map<String, Value>, key: &str) -> Result<&'a str, String> {
    req.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| format!("missing string field {key:?}"))
}

fn path_field(req: &Map<String, Value>, key: &str) -> Result<VarPath, String> {
    VarPath::parse(str_field(req, key)?).map_err(|e| e.to_string())
}

fn opt_prefix(req: &Map<String, Value>) -> Result<Option<VarPath>, String> {
    match req.get("prefix") {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s == "/" => Ok(None),
        Some(Value::String(s)) => VarPath::parse(s).map(Some).map_err(|e| e.to_string()),
        Some(_) => Err("prefix must be a string".into()),
    }
}

/// `{"I": 3}` style, the serde form of [`VarValue`].
pub fn value_to_json(v: &VarValue) -> Value {
    serde_json::to_value(v).expect("values serialize")
}

/// Accepts the tagged form or a bare JSON scalar/array, coerced towards
/// `stored` where that is lossless.
pub fn value_from_json(v: &Value, stored: Option<TypeTag>) -> Result<VarValue, String> {
    if let Value::Object(m) = v {
        if m.len() == 1
            && m.keys()
                .all(|k| matches!(k.as_str(), "I" | "R" | "T" | "A"))
        {
            return serde_json::from_value(v.clone()).map_err(|e| format!("bad value: {e}"));
        }
    }
    let value = match v {
        Value::String(s) => VarValue::Text(s.clone()),
        Value::Number(n) => match (n.as_i64(), stored) {
            (Some(i), Some(TypeTag::Real)) => VarValue::Real(i as f64),
            (Some(i), Some(TypeTag::Text)) => VarValue::Text(i.to_string()),
            (Some(i), _) => VarValue::Int(i),
            (None, Some(TypeTag::Text)) => VarValue::Text(n.to_string()),
            (None, _) => VarValue::Real(n.as_f64().ok_or("number out of range")?),
        },
        Value::Array(items) => VarValue::IntArray(
            items
                .iter()
                .map(|x| x.as_i64().ok_or("array items must be integers"))
                .collect::<Result<_, _>>()?,
        ),
        _ => return Err(format!("unsupported value {v}")),
    };
    Ok(value)
}

fn entry_json(e: &DbEntry) -> Value {
    json!({
        "path": e.path.as_str(),
        "value": value_to_json(&e.value),
        "rev": e.revision,
        "writer": e.writer,
        "time": format_iso(e.wall_time),
    })
}

/// Parsed `{id, verb, ...}` frame.
#[derive(Debug, Clone)]
pub struct Request {
    pub id: u64,
    pub verb: String,
    pub fields: Map<String, Value>,
}

impl Request {
    pub fn parse(frame: &str) -> Result<Self, String> {
        let v: Value = serde_json::from_str(frame).map_err(|e| format!("malformed frame: {e}"))?;
        let Value::Object(fields) = v else {
            return Err("malformed frame: not an object".into());
        };
        let id = fields
            .get("id")
            .and_then(Value::as_u64)
            .ok_or("malformed frame: missing integer id")?;
        let verb = fields
            .get("verb")
            .and_then(Value::as_str)
            .ok_or("malformed frame: missing verb")?
            .to_string();
        Ok(Self { id, verb, fields })
    }
}

impl Gateway {
    pub fn new(sup: Arc<Supervisor>) -> Arc<Self> {
        Arc::new(Self {
            sup,
            shutdown: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn supervisor(&self) -> &Arc<Supervisor> {
        &self.sup
    }

    /// Stops every server loop and subscription of this gateway.
    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::Release);
    }

    fn stopping(&self) -> bool {
        self.shutdown.load(Ordering::Acquire)
    }

    fn hung(&self) -> bool {
        self.sup.kernel().is_frozen()
    }

    /// Answers one request other than `subscribe`.
    pub fn handle(&self, req: &Request) -> Value {
        match self.dispatch(&req.verb, &req.fields) {
            Ok(mut m) => {
                m.insert("id".into(), req.id.into());
                m.insert("ok".into(), true.into());
                Value::Object(m)
            }
            Err(e) => error_reply(req.id, e),
        }
    }

    fn dispatch(&self, verb: &str, req: &Map<String, Value>) -> Result<Map<String, Value>, String> {
        let db = self.sup.db();
        let kernel = self.sup.kernel();
        let mut out = Map::new();
        match verb {
            "get" => {
                let path = path_field(req, "path")?;
                let e = db.get_var(&path).map_err(|e| e.to_string())?;
                let Value::Object(m) = entry_json(&e) else {
                    unreachable!()
                };
                out = m;
            }
            "set" => {
                let path = path_field(req, "path")?;
                let raw = req.get("value").ok_or("missing field \"value\"")?;
                let stored = db.get_var(&path).ok().map(|e| e.value.tag());
                let value = value_from_json(raw, stored)?;
                let rev = db
                    .set_var(&path, value, WRITER)
                    .map_err(|e| e.to_string())?;
                out.insert("rev".into(), rev.into());
            }
            "list" => {
                let prefix = opt_prefix(req)?;
                let vars: Vec<Value> = db
                    .list_vars(prefix.as_ref())
                    .iter()
                    .filter_map(|p| db.get_var(p).ok())
                    .map(|e| json!({"path": e.path.as_str(), "value": value_to_json(&e.value)}))
                    .collect();
                out.insert("vars".into(), vars.into());
            }
            "load_script" => {
                let text = str_field(req, "text")?;
                let program = self.sup.load_script(text).map_err(|e| e.to_string())?;
                let checkpoints: Vec<usize> =
                    (1..).map_while(|n| program.checkpoint_index(n)).collect();
                out.insert("statements".into(), program.len().into());
                out.insert("checkpoints".into(), checkpoints.into());
                out.insert(
                    "hash".into(),
                    db.get_text("/script/hash").unwrap_or_default().into(),
                );
            }
            "start" => {
                let from = match (req.get("from"), req.get("checkpoint")) {
                    (Some(f), None) => f.as_u64().ok_or("from must be a statement index")? as usize,
                    (None, Some(c)) => {
                        let n = c.as_u64().ok_or("checkpoint must be an ordinal")? as u32;
                        kernel.checkpoint_index(n).map_err(|e| e.to_string())?
                    }
                    (None, None) => 0,
                    (Some(_), Some(_)) => return Err("give from or checkpoint, not both".into()),
                };
                self.sup.start(from).map_err(|e| e.to_string())?;
                out.insert("from".into(), from.into());
            }
            "stop" => kernel.stop_run(),
            "pause" => {
                let paused = req
                    .get("paused")
                    .map_or(Some(true), Value::as_bool)
                    .ok_or("paused must be a boolean")?;
                kernel.pause(paused);
                out.insert("paused".into(), paused.into());
            }
            "answer" => {
                let text = req.get("text").and_then(Value::as_str).unwrap_or("");
                kernel.answer(text).map_err(|e| e.to_string())?;
            }
            "fetch_spectrum" => {
                let mode: Mode = req
                    .get("mode")
                    .and_then(Value::as_str)
                    .unwrap_or("compressed")
                    .parse()?;
                let h = viz::sample(kernel.histogram()).ok_or("no spectrum acquired yet")?;
                let factors: Vec<usize> = match req.get("rebin") {
                    None | Some(Value::Null) => vec![1; h.dims.len()],
                    Some(Value::Array(a)) => a
                        .iter()
                        .map(|x| {
                            x.as_u64()
                                .map(|f| f as usize)
                                .ok_or("rebin factors must be integers")
                        })
                        .collect::<Result<_, _>>()?,
                    Some(_) => return Err("rebin must be an array".into()),
                };
                let spectrum = match mode {
                    Mode::Compressed => viz::compress(&h, &factors).map_err(|e| e.to_string())?,
                    Mode::Direct if factors.iter().all(|&f| f == 1) => viz::direct(&h),
                    Mode::Direct => return Err("direct mode sends the histogram unbinned".into()),
                };
                let bytes = spectrum.to_bytes();
                let dims: Vec<usize> = h.dims.iter().zip(&factors).map(|(d, f)| d / f).collect();
                out.insert("mode".into(), mode.to_string().into());
                out.insert("dims".into(), dims.into());
                out.insert("total".into(), h.total().into());
                out.insert("bytes".into(), bytes.len().into());
                out.insert(
                    "data".into(),
                    base64::engine::general_purpose::STANDARD
                        .encode(bytes)
                        .into(),
                );
            }
            "status" => {
                let status = db
                    .get_text("/script/status")
                    .unwrap_or_else(|| "idle".into());
                out.insert("status".into(), status.clone().into());
                out.insert("running".into(), kernel.is_running().into());
                out.insert("paused".into(), kernel.is_paused().into());
                out.insert("frozen".into(), kernel.is_frozen().into());
                out.insert("io_blocked".into(), self.sup.io_blocked().into());
                out.insert(
                    "crash_count".into(),
                    self.sup.watchdog().crash_count().into(),
                );
                out.insert(
                    "last_completed".into(),
                    ExecState::recorded_last_completed(db).into(),
                );
                if status == "waiting" {
                    out.insert(
                        "ask".into(),
                        db.get_text("/script/ask/prompt").unwrap_or_default().into(),
                    );
                    out.insert(
                        "default".into(),
                        db.get_text("/script/ask/default")
                            .unwrap_or_default()
                            .into(),
                    );
                }
                if status == "aborted" {
                    out.insert(
                        "reason".into(),
                        db.get_text("/script/reason").unwrap_or_default().into(),
                    );
                }
                out.insert(
                    "now".into(),
                    self.sup.clock().iso(self.sup.clock().now()).into(),
                );
            }
            "inject_fault" => {
                let kind: FaultKind = str_field(req, "kind")?.parse()?;
                self.sup.inject_fault(kind);
                out.insert("kind".into(), str_field(req, "kind")?.into());
            }
            "subscribe" => return Err("subscribe needs a session".into()),
            other => return Err(format!("unknown verb {other:?}")),
        }
        Ok(out)
    }

    pub fn session(self: &Arc<Self>, sink: Sink) -> Session {
        Session {
            gw: self.clone(),
            sink,
            closed: Arc::new(AtomicBool::new(false)),
            subs: Vec::new(),
        }
    }

    /// Binds `addr` and serves connections on background threads.
    pub fn serve_stream(self: &Arc<Self>, addr: &str) -> Result<Server, GatewayError> {
        let listener = TcpListener::bind(addr).map_err(|source| GatewayError::Bind {
            addr: addr.to_string(),
            source,
        })?;
        let local = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let gw = self.clone();
        let thread = std::thread::Builder::new()
            .name("gateway-accept".into())
            .spawn(move || gw.accept_loop(listener))?;
        Ok(Server {
            addr: Some(local),
            threads: vec![thread],
            gw: self.clone(),
        })
    }

    fn accept_loop(self: Arc<Self>, listener: TcpListener) {
        let mut conns = Vec::new();
        while !self.stopping() {
            if self.sup.io_blocked() || self.hung() {
                std::thread::sleep(POLL);
                continue;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    let gw = self.clone();
                    if let Ok(t) = std::thread::Builder::new()
                        .name("gateway-conn".into())
                        .spawn(move || gw.connection(stream))
                    {
                        conns.push(t);
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(POLL),
                Err(_) => std::thread::sleep(POLL),
            }
            conns.retain(|t| !t.is_finished());
        }
        for t in conns {
            let _ = t.join();
        }
    }

    fn connection(self: Arc<Self>, stream: TcpStream) {
        let _ = stream.set_nonblocking(false);
        let _ = stream.set_read_timeout(Some(Duration::from_millis(100)));
        let Ok(write_half) = stream.try_clone() else {
            return;
        };
        let writer = Arc::new(Mutex::new(write_half));
        let sink: Sink = Arc::new(move |frame: String| {
            let mut w = writer.lock().unwrap();
            w.write_all(frame.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .is_ok()
        });
        let mut session = self.session(sink);
        let mut reader = BufReader::new(stream);
        let mut buf = Vec::new();
        let kernel = self.sup.kernel();
        // a hung system takes its connections down with it, even when the
        // restart beat us to the check
        let lost = || kernel.is_frozen() || !Arc::ptr_eq(&kernel, &self.sup.kernel());
        while !self.stopping() && !session.is_closed() {
            if lost() {
                break;
            }
            if self.sup.io_blocked() {
                std::thread::sleep(POLL);
                continue;
            }
            match reader.read_until(b'\n', &mut buf) {
                Ok(0) => break,
                Ok(_) if buf.ends_with(b"\n") => {
                    let frame = String::from_utf8_lossy(&buf)
                        .trim_end_matches(['\r', '\n'])
                        .to_string();
                    buf.clear();
                    if lost() {
                        break;
                    }
                    if !frame.trim().is_empty() {
                        session.handle_frame(&frame);
                    }
                }
                Ok(_) => break,
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    if buf.len() > MAX_FRAME {
                        session.reply(error_reply(0, "frame too long"));
                        buf.clear();
                    }
                }
                Err(_) => break,
            }
        }
        let _ = reader.get_ref().shutdown(std::net::Shutdown::Both);
    }

    /// Creates the window file at `path` and serves one client through it.
    pub fn serve_dpm(self: &Arc<Self>, path: &Path) -> Result<Server, GatewayError> {
        let window = DpmWindow::create(path)?;
        let mut reader = window.reader(Ring::HostToKernel)?;
        let writer = Arc::new(Mutex::new(window.writer(Ring::KernelToHost)?));
        let gw = self.clone();
        let thread = std::thread::Builder::new()
            .name("gateway-dpm".into())
            .spawn(move || {
                let sink: Sink = Arc::new(move |frame: String| {
                    writer
                        .lock()
                        .unwrap()
                        .write_message_timeout(frame.as_bytes(), Some(Duration::from_secs(5)))
                        .is_ok()
                });
                let mut session = gw.session(sink);
                while !gw.stopping() {
                    if gw.sup.io_blocked() || gw.hung() {
                        std::thread::sleep(POLL);
                        continue;
                    }
                    match reader.read_message_timeout(Some(Duration::from_millis(100))) {
                        Ok(Some(msg)) => match String::from_utf8(msg) {
                            Ok(frame) => session.handle_frame(&frame),
                            Err(_) => session.reply(error_reply(0, "malformed frame: not UTF-8")),
                        },
                        Ok(None) => {}
                        Err(_) => break,
                    }
                }
            })?;
        Ok(Server {
            addr: None,
            threads: vec![thread],
            gw: self.clone(),
        })
    }

    /// Restarts the kernel whenever it is found frozen.
    pub fn spawn_supervision(self: &Arc<Self>) -> JoinHandle<()> {
        let gw = self.clone();
        std::thread::Builder::new()
            .name("gateway-supervision".into())
            .spawn(move || {
                while !gw.stopping() {
                    if gw.sup.kernel().is_frozen() {
                        let _ = gw.sup.recover();
                    }
                    std::thread::sleep(POLL);
                }
            })
            .expect("spawn supervision thread")
    }

    /// Draws faults from `model` as virtual time passes and injects them.
    pub fn attach_faults(self: &Arc<Self>, model: &FaultModel) -> FaultDriver {
        let clock = self.sup.clock().clone();
        let process = Mutex::new(FaultProcess::new(model, clock.now()));
        let (tx, rx) = mpsc::channel::<FaultEvent>();
        let listener = clock.add_listener(move |_, to| {
            for e in process.lock().unwrap().drain(to) {
                let _ = tx.send(e);
            }
        });
        let sup = self.sup.clone();
        let thread = std::thread::Builder::new()
            .name("gateway-faults".into())
            .spawn(move || {
                for e in rx {
                    sup.inject_fault(e.kind);
                }
            })
            .expect("spawn fault thread");
        FaultDriver {
            clock,
            listener: Some(listener),
            thread: Some(thread),
        }
    }
}

/// Background server threads; `stop` ends them.
pub struct Server {
    addr: Option<SocketAddr>,
    threads: Vec<JoinHandle<()>>,
    gw: Arc<Gateway>,
}

impl Server {
    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.addr
    }

    pub fn stop(self) {
        self.gw.shutdown();
        for t in self.threads {
            let _ = t.join();
        }
    }

    /// Blocks until the gateway shuts down.
    pub fn join(self) {
        for t in self.threads {
            let _ = t.join();
        }
    }
}

/// Detaches from the clock on drop.
pub struct FaultDriver {
    clock: crate::clock::SimClock,
    listener: Option<ListenerId>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for FaultDriver {
    fn drop(&mut self) {
        if let Some(id) = self.listener.take() {
            self.clock.remove_listener(id);
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Requests of one client connection, answered in order.
pub struct Session {
    gw: Arc<Gateway>,
    sink: Sink,
    closed: Arc<AtomicBool>,
    subs: Vec<JoinHandle<()>>,
}

impl Session {
    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    fn reply(&self, v: Value) {
        if !(self.sink)(v.to_string()) {
            self.closed.store(true, Ordering::Release);
        }
    }

    pub fn handle_frame(&mut self, frame: &str) {
        let req = match Request::parse(frame) {
            Ok(r) => r,
            Err(e) => return self.reply(error_reply(0, e)),
        };
        if req.verb != "subscribe" {
            let reply = self.gw.handle(&req);
            return self.reply(reply);
        }
        let prefix = match opt_prefix(&req.fields) {
            Ok(p) => p,
            Err(e) => return self.reply(error_reply(req.id, e)),
        };
        let sub = self.gw.sup.db().subscribe(prefix.as_ref());
        self.reply(json!({
            "id": req.id,
            "ok": true,
            "subscribed": prefix.as_ref().map_or("/", |p| p.as_str()),
        }));
        let (sink, closed, gw, id) = (
            self.sink.clone(),
            self.closed.clone(),
            self.gw.clone(),
            req.id,
        );
        let t = std::thread::Builder::new()
            .name("gateway-sub".into())
            .spawn(move || {
                while !closed.load(Ordering::Acquire) && !gw.stopping() {
                    match sub.recv_timeout(Duration::from_millis(100)) {
                        Ok(Some(e)) => {
                            let mut ev = entry_json(&e);
                            ev["id"] = id.into();
                            ev["event"] = "update".into();
                            if !sink(ev.to_string()) {
                                closed.store(true, Ordering::Release);
                            }
                        }
                        Ok(None) => {}
                        Err(_) => break,
                    }
                }
            });
        if let Ok(t) = t {
            self.subs.push(t);
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.closed.store(true, Ordering::Release);
        for t in self.subs.drain(..) {
            let _ = t.join();
        }
    }
}
