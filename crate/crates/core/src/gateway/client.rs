use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use serde_json::{Map, Value};

use super::dpm::{DpmWindow, Ring, RingReader, RingWriter};
use super::{GatewayError, Transport};

enum Conn {
    Stream {
        reader: BufReader<TcpStream>,
        writer: TcpStream,
        buf: Vec<u8>,
    },
    Dpm {
        writer: RingWriter,
        reader: RingReader,
    },
}

/// Synchronous gateway client. Subscription events that arrive while a
/// reply is awaited are queued for [`Client::next_event`].
pub struct Client {
    conn: Conn,
    next_id: u64,
    events: VecDeque<Value>,
    timeout: Duration,
}

impl Client {
    pub fn connect(transport: &Transport) -> Result<Self, GatewayError> {
        let conn = match transport {
            Transport::Stream(addr) => {
                let s = TcpStream::connect(addr)?;
                s.set_nodelay(true)?;
                Conn::Stream {
                    reader: BufReader::new(s.try_clone()?),
                    writer: s,
                    buf: Vec::new(),
                }
            }
            Transport::Dpm(path) => {
                let window = DpmWindow::open(path)?;
                let writer = window.writer(Ring::HostToKernel)?;
                let mut reader = window.reader(Ring::KernelToHost)?;
                // leftovers addressed to an earlier client
                reader.clear();
                Conn::Dpm { writer, reader }
            }
        };
        Ok(Self {
            conn,
            next_id: 1,
            events: VecDeque::new(),
            timeout: Duration::from_secs(30),
        })
    }

    /// How long [`Client::request`] waits for its reply.
    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    /// Sends one frame as is.
    pub fn send_frame(&mut self, frame: &str) -> Result<(), GatewayError> {
        match &mut self.conn {
            Conn::Stream { writer, .. } => {
                writer.write_all(frame.as_bytes())?;
                writer.write_all(b"\n")?;
            }
            Conn::Dpm { writer, .. } => {
                writer.write_message_timeout(frame.as_bytes(), Some(self.timeout))?;
            }
        }
        Ok(())
    }

    /// Next incoming frame, or `None` after `timeout`.
    pub fn recv_frame(&mut self, timeout: Duration) -> Result<Option<String>, GatewayError> {
        match &mut self.conn {
            Conn::Stream { reader, buf, .. } => {
                let deadline = Instant::now() + timeout;
                loop {
                    let left = deadline.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Ok(None);
                    }
                    reader.get_ref().set_read_timeout(Some(left))?;
                    match reader.read_until(b'\n', buf) {
                        Ok(0) => return Err(GatewayError::Protocol("connection closed".into())),
                        Ok(_) if buf.ends_with(b"\n") => {
                            let line = String::from_utf8_lossy(buf).trim_end().to_string();
                            buf.clear();
                            return Ok(Some(line));
                        }
                        Ok(_) => {
                            return Err(GatewayError::Protocol(
                                "connection closed mid-frame".into(),
                            ))
                        }
                        Err(e)
                            if matches!(
                                e.kind(),
                                io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                            ) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            Conn::Dpm { reader, .. } => Ok(reader
                .read_message_timeout(Some(timeout))?
                .map(|m| String::from_utf8_lossy(&m).into_owned())),
        }
    }

    /// Sends a frame and returns the first reply carrying `id`.
    pub fn exchange(&mut self, id: u64, frame: &str) -> Result<Value, GatewayError> {
        self.send_frame(frame)?;
        self.await_reply(id)
    }

    fn await_reply(&mut self, id: u64) -> Result<Value, GatewayError> {
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let Some(line) = self.recv_frame(left)? else {
                return Err(GatewayError::Timeout);
            };
            let v: Value = serde_json::from_str(&line)
                .map_err(|e| GatewayError::Protocol(format!("bad reply {line:?}: {e}")))?;
            if v.get("event").is_some() {
                self.events.push_back(v);
            } else if v.get("id").and_then(Value::as_u64) == Some(id) {
                return Ok(v);
            }
        }
    }

    /// Sends `verb` with `fields` and returns the whole reply object.
    pub fn request(&mut self, verb: &str, fields: Value) -> Result<Value, GatewayError> {
        let id = self.next_id;
        self.next_id += 1;
        let mut frame = match fields {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => {
                return Err(GatewayError::Protocol(format!(
                    "fields must be an object, got {other}"
                )))
            }
        };
        frame.insert("id".into(), id.into());
        frame.insert("verb".into(), verb.into());
        self.exchange(id, &Value::Object(frame).to_string())
    }

    /// Like [`Client::request`] but turns `ok: false` into an error.
    pub fn call(&mut self, verb: &str, fields: Value) -> Result<Value, GatewayError> {
        let reply = self.request(verb, fields)?;
        if reply.get("ok").and_then(Value::as_bool) == Some(true) {
            Ok(reply)
        } else {
            Err(GatewayError::Remote(
                reply
                    .get("error")
                    .and_then(Value::as_str)
                    .unwrap_or("request failed")
                    .to_string(),
            ))
        }
    }

    /// Next subscription event.
    pub fn next_event(&mut self, timeout: Duration) -> Result<Option<Value>, GatewayError> {
        if let Some(e) = self.events.pop_front() {
            return Ok(Some(e));
        }
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let Some(line) = self.recv_frame(left)? else {
                return Ok(None);
            };
            let v: Value =
                serde_json::from_str(&line).map_err(|e| GatewayError::Protocol(e.to_string()))?;
            if v.get("event").is_some() {
                return Ok(Some(v));
            }
        }
    }
}
