use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Statement argument: a literal token or a `@name` variable reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arg {
    Literal(String),
    VarRef(String),
}

impl Arg {
    /// `@name` becomes a reference, anything else a literal.
    pub fn from_token(tok: &str) -> Option<Self> {
        let tok = tok.trim();
        if tok.is_empty() {
            return None;
        }
        match tok.strip_prefix('@') {
            Some(name) if is_ident(name) => Some(Arg::VarRef(name.to_string())),
            Some(_) => None,
            None => Some(Arg::Literal(tok.to_string())),
        }
    }
}

impl fmt::Display for Arg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arg::Literal(s) => f.write_str(s),
            Arg::VarRef(n) => write!(f, "@{n}"),
        }
    }
}

/// `[A-Za-z_][A-Za-z0-9_]*`
pub fn is_ident(s: &str) -> bool {
    let mut b = s.bytes();
    matches!(b.next(), Some(c) if c.is_ascii_alphabetic() || c == b'_')
        && b.all(|c| c.is_ascii_alphanumeric() || c == b'_')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatementKind {
    Comment(String),
    Checkpoint(u32),
    SetVar {
        name: String,
        value: Arg,
    },
    Ask {
        name: String,
        default: Arg,
        prompt: String,
    },
    DeviceCmd {
        device: String,
        command: String,
        args: Vec<Arg>,
    },
    MacroCall {
        name: String,
        args: Vec<Arg>,
    },
}

impl StatementKind {
    pub fn variant_name(&self) -> &'static str {
        match self {
            StatementKind::Comment(_) => "Comment",
            StatementKind::Checkpoint(_) => "Checkpoint",
            StatementKind::SetVar { .. } => "SetVar",
            StatementKind::Ask { .. } => "Ask",
            StatementKind::DeviceCmd { .. } => "DeviceCmd",
            StatementKind::MacroCall { .. } => "MacroCall",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub kind: StatementKind,
    /// 1-based line in the source text.
    pub source_line: usize,
}

impl fmt::Display for Statement {
    /// Canonical source form; parsing it yields the same kind.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            StatementKind::Comment(text) => write!(f, ";{text}"),
            StatementKind::Checkpoint(_) => f.write_str(super::parser::CHECKPOINT_LINE),
            StatementKind::SetVar { name, value } => write!(f, "#set @{name} {value}"),
            StatementKind::Ask {
                name,
                default,
                prompt,
            } => write!(f, "#ask @{name} {default} \"{prompt}\""),
            StatementKind::DeviceCmd {
                device,
                command,
                args,
            } => {
                write!(f, "{device}:{command}")?;
                for a in args {
                    write!(f, " {a}")?;
                }
                Ok(())
            }
            StatementKind::MacroCall { name, args } if args.is_empty() => f.write_str(name),
            StatementKind::MacroCall { name, args } => {
                let joined: Vec<String> = args.iter().map(Arg::to_string).collect();
                write!(f, "{name}({})", joined.join(","))
            }
        }
    }
}

/// A parsed script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub statements: Vec<Statement>,
    /// Indices of the checkpoint statements, ascending.
    pub checkpoints: Vec<usize>,
    /// Hex SHA-256 of the source text.
    pub source_hash: String,
}

impl Program {
    pub(crate) fn new(statements: Vec<Statement>, source: &str) -> Self {
        let checkpoints = statements
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.kind, StatementKind::Checkpoint(_)))
            .map(|(i, _)| i)
            .collect();
        Self {
            statements,
            checkpoints,
            source_hash: source_hash(source),
        }
    }

    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    /// Canonical source text, one statement per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.statements {
            out.push_str(&s.to_string());
            out.push('\n');
        }
        out
    }

    /// Same statements and checkpoints, ignoring source lines and hash.
    pub fn same_structure(&self, other: &Program) -> bool {
        self.checkpoints == other.checkpoints
            && self.statements.len() == other.statements.len()
            && self
                .statements
                .iter()
                .zip(&other.statements)
                .all(|(a, b)| a.kind == b.kind)
    }

    /// Statement count per variant name.
    pub fn variant_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for s in &self.statements {
            *m.entry(s.kind.variant_name()).or_default() += 1;
        }
        m
    }

    /// Index of the statement holding checkpoint `ordinal` (1-based).
    pub fn checkpoint_index(&self, ordinal: u32) -> Option<usize> {
        (ordinal >= 1)
            .then(|| self.checkpoints.get(ordinal as usize - 1).copied())
            .flatten()
    }
}

pub fn source_hash(source: &str) -> String {
    let digest = Sha256::digest(source.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
