use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use beamctl_core::clock::SimClock;
use beamctl_core::gateway::{FaultModel, Gateway, Transport};
use beamctl_core::kernel::KernelConfig;
use beamctl_core::supervisor::{FaultKind, Supervisor, SupervisorConfig};
use clap::Args;

use crate::{CmdResult, Failure, Global, EXIT_RUNTIME};

#[derive(Args)]
pub struct ServeArgs {
    /// Data directory of the kernel
    #[arg(long, default_value = "beamctl-data")]
    pub root: PathBuf,
    /// Inject random faults as virtual time passes
    #[arg(long)]
    pub faults: bool,
    /// Nonfatal faults per simulated day
    #[arg(long, default_value_t = 1.0)]
    pub nonfatal_rate: f64,
    /// Fatal faults per simulated week
    #[arg(long, default_value_t = 1.0)]
    pub fatal_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub fault_seed: u64,
}

fn fail(e: impl std::fmt::Display) -> Failure {
    Failure(EXIT_RUNTIME, e.to_string())
}

/// Operator console on stdin: `reset`, `fatal`, `nonfatal`, `quit`.
fn console(gw: Arc<Gateway>) {
    let stdin = std::io::stdin();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let sup = gw.supervisor();
        match line.trim() {
            "" => continue,
            "reset" => {
                sup.reset_io();
                println!("io reset");
            }
            "nonfatal" => sup.inject_fault(FaultKind::Nonfatal),
            "fatal" => sup.inject_fault(FaultKind::Fatal),
            "quit" => {
                gw.shutdown();
                break;
            }
            other => println!("unknown console command {other:?} (reset, nonfatal, fatal, quit)"),
        }
        let _ = std::io::stdout().flush();
    }
}

pub fn serve(g: &Global, args: &ServeArgs) -> CmdResult {
    std::fs::create_dir_all(&args.root)
        .map_err(|e| fail(format!("{}: {e}", args.root.display())))?;
    let sup = Supervisor::boot(
        KernelConfig::standard(&args.root, g.seed),
        SimClock::paced(g.clock_factor),
        SupervisorConfig::default(),
    )
    .map_err(fail)?;
    let gw = Gateway::new(sup);
    let server = match g.transport() {
        Transport::Stream(addr) => {
            let server = gw.serve_stream(&addr).map_err(fail)?;
            println!(
                "listening on {}",
                server.local_addr().expect("stream server has an address")
            );
            server
        }
        Transport::Dpm(path) => {
            let server = gw.serve_dpm(&path).map_err(fail)?;
            println!("listening on {}", path.display());
            server
        }
    };
    let _ = std::io::stdout().flush();
    let supervision = gw.spawn_supervision();
    let _faults = args.faults.then(|| {
        gw.attach_faults(&FaultModel {
            nonfatal_rate: args.nonfatal_rate,
            fatal_rate: args.fatal_rate,
            seed: args.fault_seed,
        })
    });
    {
        let gw = gw.clone();
        std::thread::Builder::new()
            .name("console".into())
            .spawn(move || console(gw))
            .map_err(fail)?;
    }
    server.join();
    let _ = supervision.join();
    gw.supervisor().shutdown();
    Ok(())
}
