//! Instrument macro-commands callable from measurement scripts.
//!
//! Macros are host-provided sequences of device commands. They run on the
//! script's thread and reach residents only through a [`DeviceBus`].

use std::time::Duration;

use super::{DeviceDescriptor, DeviceKind};
use crate::rtdb::Db;
use crate::script::EngineError;

/// Names of every macro known to [`call`].
pub const MACROS: &[&str] = &[
    "auto_test",
    "usf_set",
    "shut_set",
    "temp_ist",
    "uni_start",
    "uni_stop",
    "meas_2sh",
];

const WRITER: &str = "macro";

/// How a macro reaches the residents.
pub trait DeviceBus {
    /// Sends a command and blocks until the resident completes it.
    fn command(&mut self, device: &str, verb: &str, args: &[String]) -> Result<(), EngineError>;
    /// Pings `device`, failing if no reply arrives within `timeout` of real time.
    fn probe(&mut self, device: &str, timeout: Duration) -> Result<(), EngineError>;
    /// Configured devices in boot order.
    fn devices(&self) -> Vec<DeviceDescriptor>;
    fn db(&self) -> &Db;
}

/// Real-time wait for each resident during `auto_test`.
pub const PROBE_TIMEOUT: Duration = Duration::from_secs(2);

fn descriptor_of(bus: &dyn DeviceBus, kind: DeviceKind) -> Result<DeviceDescriptor, EngineError> {
    bus.devices()
        .into_iter()
        .find(|d| d.kind() == kind)
        .ok_or_else(|| EngineError::Failed(format!("no {kind:?} device configured").to_lowercase()))
}

fn device_of(bus: &dyn DeviceBus, kind: DeviceKind) -> Result<String, EngineError> {
    descriptor_of(bus, kind).map(|d| d.name)
}

fn arity(name: &str, args: &[String], n: usize) -> Result<(), EngineError> {
    if args.len() == n {
        Ok(())
    } else {
        Err(EngineError::Failed(format!(
            "{name} expects {n} arguments, got {}",
            args.len()
        )))
    }
}

fn num<T: std::str::FromStr>(what: &str, s: &str) -> Result<T, EngineError> {
    s.parse()
        .map_err(|_| EngineError::Failed(format!("bad {what} {s:?}")))
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn db_err(e: crate::rtdb::RtdbError) -> EngineError {
    EngineError::Failed(e.to_string())
}

/// Runs macro `name`.
pub fn call(bus: &mut dyn DeviceBus, name: &str, args: &[String]) -> Result<(), EngineError> {
    match name {
        "auto_test" => auto_test(bus),
        "usf_set" => {
            arity(name, args, 3)?;
            for (leaf, v) in ["user", "sample", "filebase"].iter().zip(args) {
                bus.db()
                    .set(&format!("/meta/{leaf}"), v.as_str(), WRITER)
                    .map_err(db_err)?;
            }
            Ok(())
        }
        "shut_set" => {
            arity(name, args, 2)?;
            let dev = device_of(bus, DeviceKind::Shutter)?;
            bus.command(&dev, "set", args)
        }
        "temp_ist" => {
            arity(name, args, 4)?;
            let dev = device_of(bus, DeviceKind::Temp)?;
            bus.command(&dev, "ist", args)
        }
        "uni_start" => {
            arity(name, args, 1)?;
            let dev = device_of(bus, DeviceKind::EnvMon)?;
            bus.command(&dev, "start", args)
        }
        "uni_stop" => {
            arity(name, args, 0)?;
            let dev = device_of(bus, DeviceKind::EnvMon)?;
            bus.command(&dev, "stop", &[])
        }
        "meas_2sh" => meas_2sh(bus, args),
        _ => Err(EngineError::Unknown(format!("macro {name}"))),
    }
}

/// Pings every resident and records `pass` or `fail: <reason>` under
/// `/meta/auto_test/<device>`. Failures do not abort the script.
fn auto_test(bus: &mut dyn DeviceBus) -> Result<(), EngineError> {
    for dev in bus.devices().into_iter().map(|d| d.name) {
        let verdict = match bus.probe(&dev, PROBE_TIMEOUT) {
            Ok(()) => "pass".to_string(),
            Err(EngineError::Halted) => return Err(EngineError::Halted),
            Err(e) => format!("fail: {e}"),
        };
        bus.db()
            .set(&format!("/meta/auto_test/{dev}"), verdict, WRITER)
            .map_err(db_err)?;
    }
    Ok(())
}

/// Identifies one measurement for seeding: sample, repeat and shutter
/// configuration packed into one integer.
pub fn sweep_key(sample: u64, repeat: u64, config: u64) -> u64 {
    (sample << 32) | (repeat << 1) | config
}

/// `meas_2sh(detA, detB, count_limit, time_limit, repeats, start_sample, mode)`
///
/// For each sample from `start_sample` to the end of the changer table,
/// `repeats` times: move it into the beam, then measure once with only
/// detA's shutter in beam and once with only detB's.
fn meas_2sh(bus: &mut dyn DeviceBus, args: &[String]) -> Result<(), EngineError> {
    arity("meas_2sh", args, 7)?;
    let (det_a, det_b) = (&args[0], &args[1]);
    let count_limit: u64 = num("count limit", &args[2])?;
    let time_limit: f64 = num("time limit", &args[3])?;
    let repeats: u64 = num("repeats", &args[4])?;
    let start: u64 = num("start sample", &args[5])?;
    // args[6] (mode) is accepted and ignored

    let motor = descriptor_of(bus, DeviceKind::Motor)?;
    let shutter = device_of(bus, DeviceKind::Shutter)?;
    let daq = device_of(bus, DeviceKind::Daq)?;
    let table = bus
        .db()
        .get_int(&format!("{}/changer/count", motor.namespace))
        .ok_or_else(|| EngineError::Failed("sample changer table unavailable".into()))?
        .max(0) as u64;

    if repeats == 0 {
        return Ok(());
    }
    if start == 0 || start > table {
        let warning =
            format!("warning: meas_2sh start sample {start} outside changer table 1..{table}");
        return bus.command(&daq, "note", &[warning]);
    }
    for sample in start..=table {
        for rep in 0..repeats {
            bus.command(&motor.name, "sample", &[sample.to_string()])?;
            for (config, open, closed) in [(0, det_a, det_b), (1, det_b, det_a)] {
                bus.command(&shutter, "set", &[closed.clone(), "outbeam".into()])?;
                bus.command(&shutter, "set", &[open.clone(), "inbeam".into()])?;
                let sweep = sweep_key(sample, rep, config);
                bus.command(
                    &daq,
                    "start",
                    &strs(&[
                        &count_limit.to_string(),
                        &time_limit.to_string(),
                        &format!("sweep={sweep}"),
                        &format!("det={open}"),
                        &format!("tag=_s{sample}_r{}_{open}", rep + 1),
                    ]),
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;

    /// Records commands instead of running residents.
    struct Recorder {
        db: Db,
        log: Vec<String>,
        dead: Vec<String>,
    }

    impl Recorder {
        fn new() -> Self {
            let db = Db::new(SimClock::new());
            db.set("/motor/changer/count", 12i64, "test").unwrap();
            Self {
                db,
                log: Vec::new(),
                dead: Vec::new(),
            }
        }
    }

    impl DeviceBus for Recorder {
        fn command(
            &mut self,
            device: &str,
            verb: &str,
            args: &[String],
        ) -> Result<(), EngineError> {
            self.log.push(
                format!("{device}:{verb} {}", args.join(" "))
                    .trim_end()
                    .to_string(),
            );
            Ok(())
        }
        fn probe(&mut self, device: &str, _: Duration) -> Result<(), EngineError> {
            if self.dead.iter().any(|d| d == device) {
                Err(EngineError::Failed("no reply".into()))
            } else {
                Ok(())
            }
        }
        fn devices(&self) -> Vec<DeviceDescriptor> {
            super::super::standard_devices()
        }
        fn db(&self) -> &Db {
            &self.db
        }
    }

    fn args(s: &str) -> Vec<String> {
        s.split(',').map(|a| a.trim().to_string()).collect()
    }

    #[test]
    fn meas_2sh_reference_call_measures_four_times() {
        let mut r = Recorder::new();
        call(
            &mut r,
            "meas_2sh",
            &args("vanady1_1det,vanady1_2det,2000,1000,1,11, #.$09"),
        )
        .unwrap();
        let starts: Vec<_> = r
            .log
            .iter()
            .filter(|l| l.starts_with("Tofa:start"))
            .collect();
        // counting oracle: samples 11..=12, one repeat, two shutter configurations
        #[allow(clippy::identity_op)]
        let expected = (11..=12).count() * 1 * 2;
        assert_eq!(starts.len(), expected);
        assert!(starts[0].contains("det=vanady1_1det") && starts[0].contains("2000 1000"));
        assert!(starts[1].contains("det=vanady1_2det"));
        assert_eq!(r.log[0], "Motor:sample 11");
    }

    #[test]
    fn meas_2sh_empty_ranges() {
        let mut r = Recorder::new();
        call(&mut r, "meas_2sh", &args("a,b,10,10,0,11,x")).unwrap();
        assert!(r.log.is_empty());
        call(&mut r, "meas_2sh", &args("a,b,10,10,1,13,x")).unwrap();
        assert_eq!(r.log.len(), 1);
        assert!(r.log[0].starts_with("Tofa:note warning"));
        assert!(call(&mut r, "meas_2sh", &args("a,b")).is_err());
    }

    #[test]
    fn usf_set_writes_meta() {
        let mut r = Recorder::new();
        call(&mut r, "usf_set", &args("Balgavi,Hexane,PB160502a")).unwrap();
        assert_eq!(r.db.get_text("/meta/user").as_deref(), Some("Balgavi"));
        assert_eq!(r.db.get_text("/meta/sample").as_deref(), Some("Hexane"));
        assert_eq!(
            r.db.get_text("/meta/filebase").as_deref(),
            Some("PB160502a")
        );
    }

    #[test]
    fn auto_test_reports_each_device() {
        let mut r = Recorder::new();
        r.dead.push("Temp".into());
        call(&mut r, "auto_test", &[]).unwrap();
        assert!(r
            .db
            .get_text("/meta/auto_test/Temp")
            .unwrap()
            .starts_with("fail"));
        assert_eq!(
            r.db.get_text("/meta/auto_test/Motor").as_deref(),
            Some("pass")
        );
    }

    #[test]
    fn unknown_macro() {
        let mut r = Recorder::new();
        assert_eq!(
            call(&mut r, "nope", &[]),
            Err(EngineError::Unknown("macro nope".into()))
        );
    }

    #[test]
    fn sweep_keys_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for s in 1..=12 {
            for r in 0..4 {
                for c in 0..2 {
                    assert!(seen.insert(sweep_key(s, r, c)));
                }
            }
        }
    }
}
