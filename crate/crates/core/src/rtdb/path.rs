use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::RtdbError;

/// Hierarchical variable name, rendered as `/daq/tofa/state`.
///
/// Ordering and equality follow the rendered form bytewise, which is also the
/// order used by snapshots and `list_vars`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarPath {
    rendered: String,
}

fn valid_segment(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

impl VarPath {
    pub fn parse(s: &str) -> Result<Self, RtdbError> {
        let rest = s
            .strip_prefix('/')
            .ok_or_else(|| RtdbError::InvalidPath(s.to_string()))?;
        if rest.split('/').all(valid_segment) {
            Ok(Self {
                rendered: s.to_string(),
            })
        } else {
            Err(RtdbError::InvalidPath(s.to_string()))
        }
    }

    pub fn from_segments<I, S>(segments: I) -> Result<Self, RtdbError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut rendered = String::new();
        for seg in segments {
            let seg = seg.as_ref();
            if !valid_segment(seg) {
                return Err(RtdbError::InvalidPath(format!("{rendered}/{seg}")));
            }
            rendered.push('/');
            rendered.push_str(seg);
        }
        if rendered.is_empty() {
            return Err(RtdbError::InvalidPath(String::new()));
        }
        Ok(Self { rendered })
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.rendered[1..].split('/')
    }

    pub fn last(&self) -> &str {
        self.segments().last().unwrap_or_default()
    }

    pub fn as_str(&self) -> &str {
        &self.rendered
    }

    /// Appends one segment.
    pub fn child(&self, segment: &str) -> Result<Self, RtdbError> {
        if valid_segment(segment) {
            Ok(Self {
                rendered: format!("{}/{}", self.rendered, segment),
            })
        } else {
            Err(RtdbError::InvalidPath(format!(
                "{}/{}",
                self.rendered, segment
            )))
        }
    }

    /// Segment-wise prefix test: `/motor` covers `/motor/pos` but not `/motors`.
    pub fn starts_with(&self, prefix: &VarPath) -> bool {
        self.rendered == prefix.rendered
            || (self.rendered.starts_with(&prefix.rendered)
                && self.rendered.as_bytes()[prefix.rendered.len()] == b'/')
    }
}

/// Builds a path from a literal known to be valid.
pub(crate) fn p(s: &str) -> VarPath {
    VarPath::parse(s).unwrap_or_else(|_| panic!("invalid static path {s:?}"))
}

impl fmt::Display for VarPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rendered)
    }
}

impl fmt::Debug for VarPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VarPath({})", self.rendered)
    }
}

impl FromStr for VarPath {
    type Err = RtdbError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for VarPath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.rendered)
    }
}

impl<'de> Deserialize<'de> for VarPath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        VarPath::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let v = VarPath::parse("/daq/tofa/state").unwrap();
        assert_eq!(v.segments().collect::<Vec<_>>(), ["daq", "tofa", "state"]);
        assert_eq!(v.to_string(), "/daq/tofa/state");
        assert_eq!(v.last(), "state");
        assert_eq!(VarPath::from_segments(["daq", "tofa", "state"]).unwrap(), v);
    }

    #[test]
    fn rejects_bad_paths() {
        for bad in ["", "/", "a/b", "/a//b", "/a/", "/a b", "/ä", "/a/b.c"] {
            assert!(VarPath::parse(bad).is_err(), "{bad:?} accepted");
        }
        assert!(VarPath::from_segments(Vec::<&str>::new()).is_err());
    }

    #[test]
    fn prefix_is_segment_wise() {
        let motor = p("/motor");
        assert!(p("/motor/pos").starts_with(&motor));
        assert!(p("/motor").starts_with(&motor));
        assert!(!p("/motors/pos").starts_with(&motor));
        assert!(!p("/daq/state").starts_with(&motor));
    }
}
