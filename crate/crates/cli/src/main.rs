//! `beamctl`: operator client and kernel daemon.

mod chart;
mod run;
mod serve;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use base64::Engine as _;
use beamctl_core::gateway::{Client, GatewayError, Transport, DEFAULT_PORT};
use beamctl_core::rtdb::VarValue;
use beamctl_core::viz::{self, CompressedSpectrum, CostModel, Mode, DEFAULT_SWEEP};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

/// `println!` that ends the process quietly once stdout is closed.
#[macro_export]
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if writeln!(std::io::stdout(), $($arg)*).is_err() {
            std::process::exit(0);
        }
    }};
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_PARSE: u8 = 2;
pub const EXIT_ABORTED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "beamctl",
    version,
    about = "Beamline control kernel client and daemon",
    args_override_self = true
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone)]
pub struct Global {
    /// host:port of the stream transport, or the window file for dpm
    #[arg(long, global = true, env = "BEAMCTL_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = TransportKind::Stream)]
    pub transport: TransportKind,
    /// Window file of the dpm transport (overrides --endpoint)
    #[arg(long, global = true)]
    pub dpm_file: Option<PathBuf>,
    /// Kernel seed (serve)
    #[arg(long, global = true, default_value_t = 2002)]
    pub seed: u64,
    /// Virtual seconds per real second; unpaced if omitted (serve)
    #[arg(long, global = true)]
    pub clock_factor: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Plain)]
    pub format: Format,
    /// Seconds to wait for each reply
    #[arg(long, global = true, default_value_t = 30.0)]
    pub timeout: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportKind {
    Stream,
    Dpm,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Plain,
    Tsv,
}

#[derive(Subcommand)]
pub enum Command {
    /// Boot a kernel and serve clients
    Serve(serve::ServeArgs),
    /// Load and run a script, answering questions on the terminal
    Run {
        script: PathBuf,
        /// Start at this checkpoint (1-based)
        #[arg(long)]
        from: Option<u32>,
    },
    /// Inspect or change database variables
    Var {
        #[command(subcommand)]
        op: VarOp,
    },
    /// Fetch the current spectrum
    Spectrum {
        #[arg(long, value_enum, default_value_t = ModeArg::Compressed)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = Render::Ascii)]
        render: Render,
        /// Output file for --render file
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Rebin factors per axis, comma separated
        #[arg(long, value_delimiter = ',')]
        rebin: Option<Vec<usize>>,
        /// Chart rows
        #[arg(long, default_value_t = 32)]
        rows: usize,
    },
    /// Inject a fault into the kernel
    Fault {
        #[arg(value_enum)]
        kind: FaultArg,
    },
    /// Compressed versus direct transfer timing over a bandwidth sweep
    Bench {
        /// Bandwidths in bytes/s, ascending, comma separated
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<f64>>,
        /// Link latency in seconds
        #[arg(long, default_value_t = 0.001)]
        latency: f64,
        /// Benchmark the kernel's current spectrum instead of the fixture
        #[arg(long)]
        live: bool,
    },
    /// Script and kernel state
    Status,
}

#[derive(Subcommand)]
pub enum VarOp {
    Get {
        path: String,
    },
    Set {
        path: String,
        value: String,
        /// Force the value type instead of guessing it
        #[arg(long, value_enum)]
        r#type: Option<TypeArg>,
    },
    List {
        prefix: Option<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TypeArg {
    Int,
    Real,
    Text,
    Array,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Compressed,
    Direct,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Render {
    Ascii,
    File,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    Nonfatal,
    Fatal,
}

/// Failure of a subcommand: message and exit code.
pub struct Failure(pub u8, pub String);

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        Failure(EXIT_RUNTIME, e.to_string())
    }
}

pub type CmdResult = Result<(), Failure>;

impl Global {
    pub fn transport(&self) -> Transport {
        match self.transport {
            TransportKind::Stream => Transport::Stream(
                self.endpoint
                    .clone()
                    .unwrap_or_else(|| format!("127.0.0.1:{DEFAULT_PORT}")),
            ),
            TransportKind::Dpm => Transport::Dpm(
                self.dpm_file
                    .clone()
                    .or_else(|| self.endpoint.clone().map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("beamctl.dpm")),
            ),
        }
    }

    pub fn reply_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout.max(0.001))
    }

    pub fn connect(&self) -> Result<Client, Failure> {
        let mut c = Client::connect(&self.transport())
            .map_err(|e| Failure(EXIT_RUNTIME, format!("cannot reach kernel: {e}")))?;
        c.set_timeout(self.reply_timeout());
        Ok(c)
    }
}

fn value_of(v: &Value) -> Result<VarValue, Failure> {
    serde_json::from_value(v.clone())
        .map_err(|e| Failure(EXIT_RUNTIME, format!("bad value in reply: {e}")))
}

fn guess_value(text: &str, ty: Option<TypeArg>) -> Result<Value, Failure> {
    let bad = |what: &str| Failure(EXIT_RUNTIME, format!("{text:?} is not {what}"));
    Ok(match ty {
        None => {
            if let Ok(i) = text.parse::<i64>() {
                json!(i)
            } else if let Ok(x) = text.parse::<f64>() {
                json!(x)
            } else {
                json!(text)
            }
        }
        Some(TypeArg::Int) => json!({"I": text.parse::<i64>().map_err(|_| bad("an integer"))?}),
        Some(TypeArg::Real) => json!({"R": text.parse::<f64>().map_err(|_| bad("a number"))?}),
        Some(TypeArg::Text) => json!({"T": text}),
        Some(TypeArg::Array) => {
            let items: Result<Vec<i64>, _> = text
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<i64>())
                .collect();
            json!({"A": items.map_err(|_| bad("a comma-separated integer list"))?})
        }
    })
}

fn cmd_var(g: &Global, op: &VarOp) -> CmdResult {
    let mut c = g.connect()?;
    match op {
        VarOp::Get { path } => {
            let r = c.call("get", json!({"path": path}))?;
            let v = value_of(&r["value"])?;
            match g.format {
                Format::Plain => outln!("{}", v.display()),
                Format::Tsv => outln!("{}\t{}\t{}", path, v.tag().code(), v.display()),
            }
        }
        VarOp::Set {
            path,
            value,
            r#type,
        } => {
            let r = c.call(
                "set",
                json!({"path": path, "value": guess_value(value, *r#type)?}),
            )?;
            outln!("rev {}", r["rev"]);
        }
        VarOp::List { prefix } => {
            let r = c.call("list", json!({"prefix": prefix}))?;
            for item in r["vars"].as_array().into_iter().flatten() {
                let path = item["path"].as_str().unwrap_or_default();
                let v = value_of(&item["value"])?;
                match g.format {
                    Format::Plain => outln!("{path} = {}", v.display()),
                    Format::Tsv => outln!("{path}\t{}\t{}", v.tag().code(), v.display()),
                }
            }
        }
    }
    Ok(())
}

fn cmd_spectrum(
    g: &Global,
    mode: ModeArg,
    render: Render,
    out: Option<&PathBuf>,
    rebin: Option<&Vec<usize>>,
    rows: usize,
) -> CmdResult {
    let mut c = g.connect()?;
    let mode = match mode {
        ModeArg::Compressed => Mode::Compressed,
        ModeArg::Direct => Mode::Direct,
    };
    let reply = c.call(
        "fetch_spectrum",
        json!({"mode": mode.to_string(), "rebin": rebin}),
    );
    let reply = match reply {
        Err(GatewayError::Remote(msg)) if msg.contains("no spectrum") => {
            return Err(Failure(
                EXIT_RUNTIME,
                "no data: no spectrum acquired yet".into(),
            ))
        }
        r => r?,
    };
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(reply["data"].as_str().unwrap_or_default())
        .map_err(|e| Failure(EXIT_RUNTIME, format!("bad spectrum payload: {e}")))?;
    let spectrum =
        CompressedSpectrum::from_bytes(&bytes).map_err(|e| Failure(EXIT_RUNTIME, e.to_string()))?;
    let h = viz::decompress(&spectrum).map_err(|e| Failure(EXIT_RUNTIME, e.to_string()))?;
    match render {
        Render::Ascii => outln!("{}", chart::render(&h, rows, 60).trim_end()),
        Render::File => {
            let path =
                out.ok_or_else(|| Failure(EXIT_RUNTIME, "--render file needs --out".into()))?;
            let data = match mode {
                Mode::Compressed => bytes,
                Mode::Direct => spectrum.payload,
            };
            std::fs::write(path, &data)
                .map_err(|e| Failure(EXIT_RUNTIME, format!("{}: {e}", path.display())))?;
            outln!(
                "wrote {} ({} bytes, dims {:?}, {} counts)",
                path.display(),
                data.len(),
                h.dims,
                h.total()
            );
        }
    }
    Ok(())
}

fn cmd_fault(g: &Global, kind: FaultArg) -> CmdResult {
    let mut c = g.connect()?;
    let kind = match kind {
        FaultArg::Nonfatal => "nonfatal",
        FaultArg::Fatal => "fatal",
    };
    c.call("inject_fault", json!({"kind": kind}))?;
    outln!("injected {kind} fault");
    Ok(())
}

fn cmd_bench(g: &Global, sweep: Option<&Vec<f64>>, latency: f64, live: bool) -> CmdResult {
    let h = if live {
        let mut c = g.connect()?;
        let r = c.call("fetch_spectrum", json!({"mode": "direct"}))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(r["data"].as_str().unwrap_or_default())
            .map_err(|e| Failure(EXIT_RUNTIME, e.to_string()))?;
        CompressedSpectrum::from_bytes(&bytes)
            .and_then(|s| viz::decompress(&s))
            .map_err(|e| Failure(EXIT_RUNTIME, e.to_string()))?
    } else {
        viz::golden_fixture()
    };
    let sweep = sweep.map_or(DEFAULT_SWEEP.as_slice(), Vec::as_slice);
    let bench = viz::crossover_benchmark(&h, sweep, latency, &CostModel::default())
        .map_err(|e| Failure(EXIT_RUNTIME, e.to_string()))?;
    let tsv = bench.to_tsv();
    match g.format {
        Format::Tsv => outln!("{}", tsv.trim_end()),
        Format::Plain => {
            for line in tsv.lines() {
                if line.starts_with("crossover=") {
                    outln!("{line}");
                } else {
                    let cols: Vec<&str> = line.split('\t').collect();
                    outln!(
                        "{:>12} {:>10} {:>10} {:>10} {:>12} {:>12}",
                        cols[0],
                        cols[1],
                        cols[2],
                        cols[3],
                        cols[4],
                        cols[5]
                    );
                }
            }
        }
    }
    Ok(())
}

fn cmd_status(g: &Global) -> CmdResult {
    let mut c = g.connect()?;
    let s = c.call("status", json!({}))?;
    let Value::Object(m) = s else {
        unreachable!("replies are objects")
    };
    for (k, v) in m.iter().filter(|(k, _)| !matches!(k.as_str(), "id" | "ok")) {
        let v = match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        match g.format {
            Format::Plain => outln!("{k}: {v}"),
            Format::Tsv => outln!("{k}\t{v}"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match &cli.command {
        Command::Serve(args) => serve::serve(g, args),
        Command::Run { script, from } => run::run(g, script, *from),
        Command::Var { op } => cmd_var(g, op),
        Command::Spectrum {
            mode,
            render,
            out,
            rebin,
            rows,
        } => cmd_spectrum(g, *mode, *render, out.as_ref(), rebin.as_ref(), *rows),
        Command::Fault { kind } => cmd_fault(g, *kind),
        Command::Bench {
            sweep,
            latency,
            live,
        } => cmd_bench(g, sweep.as_ref(), *latency, *live),
        Command::Status => cmd_status(g),
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(Failure(code, msg)) => {
            eprintln!("beamctl: {msg}");
            ExitCode::from(code)
        }
    }
}
