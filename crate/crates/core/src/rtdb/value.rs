use std::fmt;

use serde::{Deserialize, Serialize};

use super::RtdbError;

/// A database value. The type tag of a variable is fixed at creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VarValue {
    #[serde(rename = "I")]
    Int(i64),
    #[serde(rename = "R")]
    Real(f64),
    #[serde(rename = "T")]
    Text(String),
    #[serde(rename = "A")]
    IntArray(Vec<i64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeTag {
    Int,
    Real,
    Text,
    IntArray,
}

impl TypeTag {
    pub fn code(self) -> char {
        match self {
            TypeTag::Int => 'I',
            TypeTag::Real => 'R',
            TypeTag::Text => 'T',
            TypeTag::IntArray => 'A',
        }
    }

    pub fn from_code(c: &str) -> Option<Self> {
        match c {
            "I" => Some(TypeTag::Int),
            "R" => Some(TypeTag::Real),
            "T" => Some(TypeTag::Text),
            "A" => Some(TypeTag::IntArray),
            _ => None,
        }
    }
}

impl fmt::Display for TypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TypeTag::Int => "int",
            TypeTag::Real => "real",
            TypeTag::Text => "text",
            TypeTag::IntArray => "int-array",
        };
        f.write_str(name)
    }
}

impl VarValue {
    pub fn tag(&self) -> TypeTag {
        match self {
            VarValue::Int(_) => TypeTag::Int,
            VarValue::Real(_) => TypeTag::Real,
            VarValue::Text(_) => TypeTag::Text,
            VarValue::IntArray(_) => TypeTag::IntArray,
        }
    }

    /// NaN and embedded NUL are never stored.
    pub fn validate(&self) -> Result<(), RtdbError> {
        match self {
            VarValue::Real(r) if r.is_nan() => Err(RtdbError::InvalidValue("NaN".into())),
            VarValue::Text(t) if t.contains('\0') => {
                Err(RtdbError::InvalidValue("text contains NUL".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            VarValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            VarValue::Real(r) => Some(*r),
            VarValue::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            VarValue::Text(t) => Some(t),
            _ => None,
        }
    }

    /// Plain rendering for operators (CLI output, status lines).
    pub fn display(&self) -> String {
        match self {
            VarValue::Int(i) => i.to_string(),
            VarValue::Real(r) => r.to_string(),
            VarValue::Text(t) => t.clone(),
            VarValue::IntArray(a) => join_ints(a),
        }
    }

    /// Encoding used inside snapshot records.
    pub(crate) fn encode(&self) -> String {
        match self {
            VarValue::Int(i) => i.to_string(),
            VarValue::Real(r) => r.to_string(),
            VarValue::Text(t) => percent_encode(t),
            VarValue::IntArray(a) => join_ints(a),
        }
    }

    pub(crate) fn decode(tag: TypeTag, s: &str) -> Result<Self, String> {
        let v = match tag {
            TypeTag::Int => VarValue::Int(s.parse().map_err(|_| format!("bad int {s:?}"))?),
            TypeTag::Real => {
                let r: f64 = s.parse().map_err(|_| format!("bad real {s:?}"))?;
                if r.is_nan() {
                    return Err("NaN real".into());
                }
                VarValue::Real(r)
            }
            TypeTag::Text => VarValue::Text(percent_decode(s)?),
            TypeTag::IntArray => {
                if s.is_empty() {
                    VarValue::IntArray(Vec::new())
                } else {
                    VarValue::IntArray(
                        s.split(',')
                            .map(|x| x.parse().map_err(|_| format!("bad array item {x:?}")))
                            .collect::<Result<_, _>>()?,
                    )
                }
            }
        };
        v.validate().map_err(|e| e.to_string())?;
        Ok(v)
    }
}

fn join_ints(a: &[i64]) -> String {
    a.iter().map(i64::to_string).collect::<Vec<_>>().join(",")
}

fn percent_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' => out.push_str("%25"),
            '\t' => out.push_str("%09"),
            '\n' => out.push_str("%0A"),
            c => out.push(c),
        }
    }
    out
}

fn percent_decode(s: &str) -> Result<String, String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s
                .get(i + 1..i + 3)
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| format!("bad percent escape at byte {i}"))?;
            out.push(hex);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).map_err(|_| "escaped text is not UTF-8".to_string())
}

impl From<i64> for VarValue {
    fn from(v: i64) -> Self {
        VarValue::Int(v)
    }
}

impl From<f64> for VarValue {
    fn from(v: f64) -> Self {
        VarValue::Real(v)
    }
}

impl From<&str> for VarValue {
    fn from(v: &str) -> Self {
        VarValue::Text(v.to_string())
    }
}

impl From<String> for VarValue {
    fn from(v: String) -> Self {
        VarValue::Text(v)
    }
}

impl From<Vec<i64>> for VarValue {
    fn from(v: Vec<i64>) -> Self {
        VarValue::IntArray(v)
    }
}
