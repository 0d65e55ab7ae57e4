use chrono::{DateTime, Utc};

use super::{RtdbError, TypeTag, VarPath, VarValue};
use crate::clock::{format_iso, parse_iso};

/// First token of a snapshot file; encodes format version 1.
pub const SNAPSHOT_MAGIC: &str = "SNIX1";

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRecord {
    pub path: VarPath,
    pub value: VarValue,
    pub revision: u64,
}

/// Full-state image of the database.
///
/// Text form: a header line `SNIX1 <revision> <iso8601>` followed by one
/// `<path>\t<tag>\t<value>` line per variable, sorted bytewise by path.
/// Per-record revisions are not part of the text form; a parsed snapshot
/// assigns the records the consecutive revisions ending at the header
/// revision, in path order.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub created: DateTime<Utc>,
    pub revision: u64,
    pub records: Vec<SnapshotRecord>,
}

fn format_err(line: usize, reason: impl Into<String>) -> RtdbError {
    RtdbError::Format {
        line,
        reason: reason.into(),
    }
}

impl Snapshot {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{SNAPSHOT_MAGIC} {} {}\n",
            self.revision,
            format_iso(self.created)
        );
        for r in &self.records {
            out.push_str(r.path.as_str());
            out.push('\t');
            out.push(r.value.tag().code());
            out.push('\t');
            out.push_str(&r.value.encode());
            out.push('\n');
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_text().into_bytes()
    }

    pub fn parse(text: &str) -> Result<Self, RtdbError> {
        let body = text
            .strip_suffix('\n')
            .ok_or_else(|| format_err(0, "missing final newline"))?;
        let mut lines = body.split('\n');
        let header = lines.next().unwrap_or_default();
        let mut fields = header.split(' ');
        match fields.next() {
            Some(SNAPSHOT_MAGIC) => {}
            Some(m) if m.starts_with("SNIX") => {
                return Err(format_err(1, format!("unsupported version {m}")))
            }
            _ => return Err(format_err(1, "bad magic")),
        }
        let revision: u64 = fields
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| format_err(1, "bad revision"))?;
        let created = fields
            .next()
            .and_then(parse_iso)
            .ok_or_else(|| format_err(1, "bad timestamp"))?;
        if fields.next().is_some() {
            return Err(format_err(1, "trailing header fields"));
        }

        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let mut parts = line.splitn(3, '\t');
            let (Some(path), Some(tag), Some(enc)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(format_err(lineno, "expected three tab-separated fields"));
            };
            let path = VarPath::parse(path).map_err(|e| format_err(lineno, e.to_string()))?;
            let tag = TypeTag::from_code(tag)
                .ok_or_else(|| format_err(lineno, format!("bad tag {tag:?}")))?;
            let value = VarValue::decode(tag, enc).map_err(|e| format_err(lineno, e))?;
            records.push(SnapshotRecord {
                path,
                value,
                revision: 0,
            });
        }
        let n = records.len() as u64;
        if n > revision {
            return Err(format_err(1, "revision lower than record count"));
        }
        for (i, r) in records.iter_mut().enumerate() {
            r.revision = revision - (n - 1 - i as u64);
        }
        let snap = Snapshot {
            created,
            revision,
            records,
        };
        snap.check()?;
        Ok(snap)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RtdbError> {
        let text = std::str::from_utf8(bytes).map_err(|_| format_err(0, "not UTF-8"))?;
        Self::parse(text)
    }

    /// Paths strictly ascending (hence unique) and no record newer than the header.
    pub(crate) fn check(&self) -> Result<(), RtdbError> {
        for (i, w) in self.records.windows(2).enumerate() {
            if w[0].path >= w[1].path {
                return Err(format_err(i + 3, "records not strictly sorted by path"));
            }
        }
        if let Some(r) = self.records.iter().find(|r| r.revision > self.revision) {
            return Err(format_err(
                0,
                format!("record {} newer than snapshot", r.path),
            ));
        }
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&VarValue> {
        let path = VarPath::parse(path).ok()?;
        self.records
            .binary_search_by(|r| r.path.cmp(&path))
            .ok()
            .map(|i| &self.records[i].value)
    }
}
