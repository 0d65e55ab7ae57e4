use serde::{Deserialize, Serialize};

use super::{Command, Device, ResidentCore};
use crate::clock::secs_to_micros;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShutterParams {
    pub ids: Vec<String>,
    /// Seconds to travel between positions.
    pub travel: f64,
}

impl Default for ShutterParams {
    fn default() -> Self {
        Self {
            ids: [
                "vanady1_1det",
                "vanady1_2det",
                "vanady2_1det",
                "vanady2_2det",
            ]
            .map(String::from)
            .to_vec(),
            travel: 2.0,
        }
    }
}

pub(crate) struct Shutters {
    params: ShutterParams,
}

impl Shutters {
    pub fn new(params: ShutterParams) -> Self {
        Self { params }
    }
}

impl Device for Shutters {
    fn init(&mut self, core: &mut ResidentCore) -> Result<(), String> {
        for id in &self.params.ids {
            core.default(&format!("{id}/pos"), "inbeam")?;
        }
        Ok(())
    }

    fn handle(&mut self, core: &mut ResidentCore, cmd: &Command) -> Result<(), String> {
        if cmd.verb != "set" {
            return Err(format!("unknown command {}", cmd.verb));
        }
        let (Some(id), Some(pos)) = (cmd.args.first(), cmd.args.get(1)) else {
            return Err("set expects <shutter> <inbeam|outbeam>".into());
        };
        if !self.params.ids.contains(id) {
            return Err(format!("unknown shutter {id}"));
        }
        if pos != "inbeam" && pos != "outbeam" {
            return Err(format!("bad position {pos}"));
        }
        let leaf = format!("{id}/pos");
        if core.get_text(&leaf).as_deref() == Some(pos.as_str()) {
            return Ok(());
        }
        core.clock().advance(secs_to_micros(self.params.travel));
        core.set(&leaf, pos.as_str())?;
        core.record(&format!("{id} {pos}"))
    }
}

#[cfg(test)]
mod tests {
    use crate::residents::testutil::Bench;
    use crate::rtdb::VarValue;

    #[test]
    fn set_is_idempotent() {
        let mut b = Bench::standard("Shutter");
        assert_eq!(b.cmd("set vanady1_2det outbeam"), "ok");
        assert_eq!(
            b.var("vanady1_2det/pos"),
            Some(VarValue::Text("outbeam".into()))
        );
        let t = b.db().clock().now();
        let rev = b.db().revision();
        assert_eq!(b.cmd("set vanady1_2det outbeam"), "ok");
        assert_eq!(b.db().clock().now(), t);
        let entry = b
            .db()
            .get_var(&"/shutter/vanady1_2det/pos".parse().unwrap())
            .unwrap();
        assert!(entry.revision <= rev);
    }

    #[test]
    fn unknown_shutter() {
        let mut b = Bench::standard("Shutter");
        assert_eq!(b.cmd("set nosuch inbeam"), "error: unknown shutter nosuch");
        assert_eq!(
            b.cmd("set vanady1_1det sideways"),
            "error: bad position sideways"
        );
    }
}
