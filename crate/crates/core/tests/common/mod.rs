#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use beamctl_core::clock::SimClock;
use beamctl_core::gateway::{Client, Gateway, Server, Transport};
use beamctl_core::kernel::KernelConfig;
use beamctl_core::supervisor::{Supervisor, SupervisorConfig};
use serde_json::Value;

pub const SESSION: &str = include_str!("../fixtures/gateway_session.jsonl");
pub const SESSION_GOLDEN: &str = "tests/fixtures/gateway_session.golden.jsonl";

pub fn boot(root: &Path, seed: u64) -> Arc<Supervisor> {
    Supervisor::boot(
        KernelConfig::standard(root, seed),
        SimClock::new(),
        SupervisorConfig::default(),
    )
    .unwrap()
}

pub struct Served {
    pub dir: tempfile::TempDir,
    pub gateway: Arc<Gateway>,
    pub server: Option<Server>,
    pub transport: Transport,
}

impl Served {
    pub fn client(&self) -> Client {
        Client::connect(&self.transport).unwrap()
    }
}

impl Drop for Served {
    fn drop(&mut self) {
        if let Some(s) = self.server.take() {
            s.stop();
        }
        self.gateway.supervisor().shutdown();
    }
}

pub fn serve_stream(seed: u64) -> Served {
    let dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::new(boot(dir.path(), seed));
    let server = gateway.serve_stream("127.0.0.1:0").unwrap();
    let transport = Transport::Stream(server.local_addr().unwrap().to_string());
    Served {
        dir,
        gateway,
        server: Some(server),
        transport,
    }
}

pub fn serve_dpm(seed: u64) -> Served {
    let dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::new(boot(dir.path(), seed));
    let path = dir.path().join("dpm.win");
    let server = gateway.serve_dpm(&path).unwrap();
    Served {
        dir,
        gateway,
        server: Some(server),
        transport: Transport::Dpm(path),
    }
}

/// Replays the golden request session and returns one reply per frame.
pub fn replay_session(served: &Served) -> Vec<String> {
    let mut client = served.client();
    SESSION
        .lines()
        .map(|frame| {
            client.send_frame(frame).unwrap();
            client
                .recv_frame(Duration::from_secs(10))
                .unwrap()
                .expect("reply")
        })
        .collect()
}

/// Polls `status` until the script is no longer running.
pub fn wait_idle(client: &mut Client, limit: Duration) -> Value {
    let started = Instant::now();
    loop {
        let s = client.call("status", Value::Null).unwrap();
        if !s["running"].as_bool().unwrap() && !s["frozen"].as_bool().unwrap() {
            return s;
        }
        assert!(started.elapsed() < limit, "script still running: {s}");
        std::thread::sleep(Duration::from_millis(10));
    }
}
