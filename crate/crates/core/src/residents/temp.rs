use serde::{Deserialize, Serialize};

use super::{parse_num, Command, Device, ResidentCore};
use crate::clock::micros_to_secs;

/// First-order-lag temperature controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempParams {
    /// Time constant in seconds.
    pub tau: f64,
    /// Temperature at first boot, °C.
    pub initial: f64,
    /// Longest allowed stabilisation wait, seconds.
    pub timeout: f64,
}

impl Default for TempParams {
    fn default() -> Self {
        Self {
            tau: 5.0,
            initial: 20.0,
            timeout: 3600.0,
        }
    }
}

/// Seconds until `T(t) = sp + (t0 - sp) e^(-t/tau)` is within `tol` of `sp`.
pub fn settle_time(t0: f64, setpoint: f64, tol: f64, tau: f64) -> f64 {
    let gap = (t0 - setpoint).abs();
    if gap <= tol {
        0.0
    } else {
        tau * (gap / tol).ln()
    }
}

pub(crate) struct TempController {
    params: TempParams,
}

impl TempController {
    pub fn new(params: TempParams) -> Self {
        Self { params }
    }

    fn temperature(&self, t0: f64, setpoint: f64, elapsed: f64) -> f64 {
        setpoint + (t0 - setpoint) * (-elapsed / self.params.tau).exp()
    }

    fn ist(&self, core: &ResidentCore, args: &[String]) -> Result<(), String> {
        let arg = |i: usize| args.get(i).map(String::as_str);
        let tol: f64 = parse_num("tolerance", arg(0))?;
        let hold: f64 = parse_num("hold time", arg(1))?;
        let name = arg(2).ok_or("missing program name")?;
        let setpoint: f64 = parse_num("setpoint", arg(3))?;
        if !(tol > 0.0 && tol.is_finite()) {
            return Err("tolerance must be positive".into());
        }
        if !(hold >= 0.0 && hold.is_finite()) || !setpoint.is_finite() {
            return Err("hold must be >= 0 and setpoint finite".into());
        }

        let t0 = core.get_real("value").unwrap_or(self.params.initial);
        core.set("setpoint", setpoint)?;
        core.set("program", name)?;
        core.set("stable", 0i64)?;
        let needed = settle_time(t0, setpoint, tol, self.params.tau) + hold;
        if needed > self.params.timeout {
            let us = (self.params.timeout * 1e6).ceil() as u64;
            core.clock().advance(us);
            let t = self.temperature(t0, setpoint, micros_to_secs(us));
            core.set("value", t)?;
            core.record(&format!("ist {name} timeout T={t:.3}"))?;
            return Err(format!("timeout after {} s", self.params.timeout));
        }
        let us = (needed * 1e6).ceil() as u64;
        core.clock().advance(us);
        let t = self.temperature(t0, setpoint, micros_to_secs(us));
        core.set("value", t)?;
        core.set("stable", 1i64)?;
        core.record(&format!(
            "ist {name} setpoint={setpoint:.3} tol={tol:.3} hold={hold:.3} T={t:.3} waited={:.6}",
            micros_to_secs(us)
        ))
    }
}

impl Device for TempController {
    fn init(&mut self, core: &mut ResidentCore) -> Result<(), String> {
        core.default("value", self.params.initial)?;
        core.default("setpoint", self.params.initial)?;
        core.default("stable", 1i64)?;
        core.default("program", "")?;
        Ok(())
    }

    fn handle(&mut self, core: &mut ResidentCore, cmd: &Command) -> Result<(), String> {
        match cmd.verb.as_str() {
            "ist" => self.ist(core, &cmd.args),
            "read" => {
                let t = core.get_real("value").unwrap_or(self.params.initial);
                core.record(&format!("read T={t:.3}"))
            }
            other => Err(format!("unknown command {other}")),
        }
    }
}
