use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::clock::{parse_iso, Micros, SimClock};

/// One line of a protocol file: `<iso8601>\t<device>\t<event>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolRecord {
    pub wall_time: String,
    pub device: String,
    pub event: String,
}

impl ProtocolRecord {
    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.splitn(3, '\t');
        let (t, d, e) = (it.next()?, it.next()?, it.next()?);
        parse_iso(t)?;
        Some(Self {
            wall_time: t.to_string(),
            device: d.to_string(),
            event: e.to_string(),
        })
    }

    pub fn line(&self) -> String {
        format!("{}\t{}\t{}", self.wall_time, self.device, self.event)
    }
}

/// Reads every record of a protocol file.
pub fn read_protocol(path: &Path) -> io::Result<Vec<ProtocolRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(|l| {
            ProtocolRecord::parse(l).ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidData, format!("bad record {l:?}"))
            })
        })
        .collect()
}

/// Append-only per-device event log.
pub struct Protocol {
    device: String,
    clock: SimClock,
    file: Option<(PathBuf, File)>,
}

impl Protocol {
    pub fn new(device: &str, clock: SimClock) -> Self {
        Self {
            device: device.to_string(),
            clock,
            file: None,
        }
    }

    /// Creates or truncates `path`.
    pub fn open(&mut self, path: &Path) -> io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let f = File::create(path)?;
        self.file = Some((path.to_path_buf(), f));
        Ok(())
    }

    /// Reopens an existing log for appending (after a kernel restart).
    pub fn reopen(&mut self, path: &Path) -> io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        self.file = Some((path.to_path_buf(), f));
        Ok(())
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn is_open(&self) -> bool {
        self.file.is_some()
    }

    /// Appends an event stamped with the current virtual time.
    pub fn record(&mut self, event: &str) -> io::Result<()> {
        self.record_at(self.clock.now(), event)
    }

    pub fn record_at(&mut self, t: Micros, event: &str) -> io::Result<()> {
        let Some((_, f)) = self.file.as_mut() else {
            return Ok(());
        };
        let line = format!("{}\t{}\t{}\n", self.clock.iso(t), self.device, event);
        f.write_all(line.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_appended_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("txt/p.txt");
        let clock = SimClock::new();
        let mut p = Protocol::new("Tofa", clock.clone());
        p.record("dropped, not open").unwrap();
        p.open(&path).unwrap();
        p.record("first").unwrap();
        clock.advance(1_500_000);
        p.record("second").unwrap();
        let recs = read_protocol(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].line(), "2002-05-15T08:00:01.500000Z\tTofa\tsecond");

        let mut again = Protocol::new("Tofa", clock.clone());
        again.reopen(&path).unwrap();
        again.record("third").unwrap();
        assert_eq!(read_protocol(&path).unwrap().len(), 3);
        again.open(&path).unwrap();
        assert!(read_protocol(&path).unwrap().is_empty());
    }
}
