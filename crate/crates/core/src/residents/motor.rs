use serde::{Deserialize, Serialize};

use super::{parse_num, Command, Device, ResidentCore};
use crate::clock::secs_to_micros;

/// Sample-changer axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotorParams {
    /// Travel speed in mm/s.
    pub speed: f64,
    /// Changer position (mm) of each sample slot, slot 1 first.
    pub changer: Vec<f64>,
}

impl Default for MotorParams {
    fn default() -> Self {
        Self {
            speed: 10.0,
            changer: (0..12).map(|i| 30.0 * i as f64).collect(),
        }
    }
}

pub(crate) struct Motor {
    params: MotorParams,
}

impl Motor {
    pub fn new(params: MotorParams) -> Self {
        Self { params }
    }

    fn move_to(&self, core: &ResidentCore, target: f64) -> Result<f64, String> {
        if !target.is_finite() {
            return Err(format!("bad target {target}"));
        }
        let from = core.get_real("pos/changer").unwrap_or(0.0);
        let secs = (target - from).abs() / self.params.speed;
        core.clock().advance(secs_to_micros(secs));
        core.set("pos/changer", target)?;
        Ok(from)
    }
}

impl Device for Motor {
    fn init(&mut self, core: &mut ResidentCore) -> Result<(), String> {
        core.default("pos/changer", 0.0)?;
        core.default("sample", 0i64)?;
        core.set("changer/count", self.params.changer.len() as i64)?;
        Ok(())
    }

    fn handle(&mut self, core: &mut ResidentCore, cmd: &Command) -> Result<(), String> {
        match cmd.verb.as_str() {
            "getpos" => {
                let pos = core.get_real("pos/changer").unwrap_or(0.0);
                core.set("pos/changer", pos)?;
                core.record(&format!("getpos changer={pos:.3}"))
            }
            "move" => {
                let axis = cmd.args.first().map(String::as_str);
                if axis != Some("changer") {
                    return Err(format!("unknown axis {}", axis.unwrap_or("")));
                }
                let target: f64 = parse_num("target", cmd.args.get(1).map(String::as_str))?;
                let from = self.move_to(core, target)?;
                core.record(&format!("move changer {from:.3} -> {target:.3}"))
            }
            "sample" => {
                let n: usize = parse_num("sample number", cmd.args.first().map(String::as_str))?;
                let target = n
                    .checked_sub(1)
                    .and_then(|i| self.params.changer.get(i))
                    .copied()
                    .ok_or_else(|| format!("no changer slot {n}"))?;
                self.move_to(core, target)?;
                core.set("sample", n as i64)?;
                core.record(&format!("sample {n} changer={target:.3}"))
            }
            other => Err(format!("unknown command {other}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::residents::testutil::Bench;
    use crate::rtdb::VarValue;

    #[test]
    fn getpos_publishes_and_records() {
        let mut b = Bench::standard("Motor");
        assert_eq!(b.cmd("open_prot"), "ok");
        assert_eq!(b.cmd("getpos"), "ok");
        assert_eq!(b.var("pos/changer"), Some(VarValue::Real(0.0)));
        assert_eq!(
            b.protocol("prot/Motor.txt").last().unwrap(),
            "getpos changer=0.000"
        );
    }

    #[test]
    fn sample_move_takes_travel_time() {
        let mut b = Bench::standard("Motor");
        assert_eq!(b.cmd("sample 11"), "ok");
        assert_eq!(b.var("pos/changer"), Some(VarValue::Real(300.0)));
        assert_eq!(b.db().clock().now(), 30_000_000);
        assert_eq!(b.cmd("sample 13"), "error: no changer slot 13");
        assert_eq!(b.cmd("sample 0"), "error: no changer slot 0");
        assert_eq!(b.cmd("move x 1"), "error: unknown axis x");
        assert_eq!(b.var("changer/count"), Some(VarValue::Int(12)));
    }
}
