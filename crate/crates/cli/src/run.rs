use std::io::{BufRead, IsTerminal, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use beamctl_core::gateway::{Client, GatewayError};
use beamctl_core::script;
use serde_json::{json, Value};

use crate::{CmdResult, Failure, Format, Global, EXIT_ABORTED, EXIT_PARSE, EXIT_RUNTIME};

/// How a connection ended.
enum Outcome {
    Finished,
    Aborted(String),
    Dropped(GatewayError),
}

fn text(v: &Value) -> String {
    match v.get("T") {
        Some(Value::String(s)) => s.clone(),
        _ => String::new(),
    }
}

fn prompt(question: &str, default: &str) -> String {
    print!("? {question} [{default}] ");
    let _ = std::io::stdout().flush();
    let mut line = String::new();
    match std::io::stdin().lock().read_line(&mut line) {
        Ok(n) if n > 0 => {
            let line = line.trim();
            let answer = if line.is_empty() { default } else { line };
            if !std::io::stdin().is_terminal() {
                crate::outln!("{answer}");
            }
            answer.to_string()
        }
        _ => {
            crate::outln!("{default}");
            default.to_string()
        }
    }
}

struct Runner<'a> {
    g: &'a Global,
    line: i64,
}

impl Runner<'_> {
    /// Acts on the current script state; `Some` once the run is over.
    fn check_status(&mut self, c: &mut Client) -> Result<Option<Outcome>, GatewayError> {
        let s = c.call("status", json!({}))?;
        match s["status"].as_str().unwrap_or("") {
            "finished" => Ok(Some(Outcome::Finished)),
            "aborted" => Ok(Some(Outcome::Aborted(
                s["reason"].as_str().unwrap_or("").to_string(),
            ))),
            "waiting" => {
                let answer = prompt(
                    s["ask"].as_str().unwrap_or(""),
                    s["default"].as_str().unwrap_or(""),
                );
                match c.call("answer", json!({"text": answer})) {
                    // someone else answered first
                    Err(GatewayError::Remote(_)) => Ok(None),
                    r => r.map(|_| None),
                }
            }
            _ => Ok(None),
        }
    }

    fn on_event(&mut self, c: &mut Client, ev: &Value) -> Result<Option<Outcome>, GatewayError> {
        match ev["path"].as_str().unwrap_or("") {
            "/script/line" => self.line = ev["value"]["I"].as_i64().unwrap_or(0),
            "/script/statement" => {
                let st = text(&ev["value"]);
                match self.g.format {
                    Format::Plain => crate::outln!("{:>4}  {st}", self.line),
                    Format::Tsv => crate::outln!("{}\t{st}", self.line),
                }
            }
            "/script/status" => {
                if matches!(
                    text(&ev["value"]).as_str(),
                    "finished" | "aborted" | "waiting"
                ) {
                    return self.check_status(c);
                }
            }
            _ => {}
        }
        Ok(None)
    }

    /// Follows the run over one connection.
    fn follow(&mut self, c: &mut Client) -> Outcome {
        let r = (|| loop {
            match c.next_event(Duration::from_millis(500))? {
                Some(ev) => {
                    if let Some(o) = self.on_event(c, &ev)? {
                        return Ok(o);
                    }
                }
                None => {
                    if let Some(o) = self.check_status(c)? {
                        return Ok(o);
                    }
                }
            }
        })();
        r.unwrap_or_else(Outcome::Dropped)
    }
}

/// Connects again after the kernel dropped us, within the reply timeout.
fn reconnect(g: &Global) -> Result<Client, Failure> {
    let deadline = Instant::now() + g.reply_timeout();
    loop {
        let attempt = g.connect().and_then(|mut c| {
            c.call("subscribe", json!({"prefix": "/script"}))?;
            Ok(c)
        });
        match attempt {
            Ok(c) => return Ok(c),
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => {}
        }
        std::thread::sleep(Duration::from_millis(100));
    }
}

pub fn run(g: &Global, path: &Path, from: Option<u32>) -> CmdResult {
    let source = std::fs::read_to_string(path)
        .map_err(|e| Failure(EXIT_RUNTIME, format!("{}: {e}", path.display())))?;
    let program = script::parse(&source)
        .map_err(|e| Failure(EXIT_PARSE, format!("{}: {e}", path.display())))?;
    if let Some(n) = from {
        if program.checkpoint_index(n).is_none() {
            return Err(Failure(
                EXIT_PARSE,
                format!("{}: no checkpoint {n}", path.display()),
            ));
        }
    }

    let mut c = g.connect()?;
    c.call("subscribe", json!({"prefix": "/script"}))?;
    c.call("load_script", json!({"text": source}))?;
    let start = match from {
        Some(n) => json!({"checkpoint": n}),
        None => json!({}),
    };
    c.call("start", start)?;

    let mut runner = Runner { g, line: 0 };
    loop {
        match runner.follow(&mut c) {
            Outcome::Finished => {
                crate::outln!("finished");
                return Ok(());
            }
            Outcome::Aborted(reason) => {
                return Err(Failure(EXIT_ABORTED, format!("script aborted: {reason}")))
            }
            Outcome::Dropped(e) => {
                eprintln!("beamctl: connection lost ({e}), reconnecting");
                c = reconnect(g)?;
            }
        }
    }
}
