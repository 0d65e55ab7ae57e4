//! Line-oriented measurement-script grammar.
//!
//! ```text
//! ;text                    comment
//! ;+++++                   checkpoint (resume anchor)
//! #set @name token         variable assignment
//! #ask @name default "p"   interactive question (prompt optional)
//! Device : command args..  device command, args separated by whitespace
//! macro(a1, a2, ..)        macro call; a bare `macro` line takes no args
//! ```

use thiserror::Error;

use super::ast::{is_ident, Arg, Program, Statement, StatementKind};

pub const CHECKPOINT_LINE: &str = ";+++++";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

/// Parses a whole script, stopping at the first error.
pub fn parse(text: &str) -> Result<Program, ParseError> {
    let mut statements = Vec::new();
    let mut ordinal = 0u32;
    for (i, raw) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw).trim();
        if line.is_empty() {
            continue;
        }
        let kind = parse_line(line, &mut ordinal).map_err(|reason| ParseError {
            line: line_no,
            reason,
        })?;
        statements.push(Statement {
            kind,
            source_line: line_no,
        });
    }
    Ok(Program::new(statements, text))
}

fn parse_line(line: &str, ordinal: &mut u32) -> Result<StatementKind, String> {
    if line == CHECKPOINT_LINE {
        *ordinal += 1;
        return Ok(StatementKind::Checkpoint(*ordinal));
    }
    if let Some(text) = line.strip_prefix(';') {
        return Ok(StatementKind::Comment(text.to_string()));
    }
    if line.starts_with('#') {
        return parse_directive(line);
    }

    let colon = line.find(':');
    let paren = line.find('(');
    if let Some(c) = colon {
        if paren.is_none_or(|p| c < p) && is_ident(line[..c].trim()) {
            return parse_device(line[..c].trim(), &line[c + 1..]);
        }
    }
    if let Some(p) = paren {
        return parse_call(line, p);
    }
    if is_ident(line) {
        return Ok(StatementKind::MacroCall {
            name: line.to_string(),
            args: Vec::new(),
        });
    }
    Err(format!("unrecognized statement {line:?}"))
}

fn var_name(tok: Option<&str>, directive: &str) -> Result<String, String> {
    match tok.and_then(|t| t.strip_prefix('@')) {
        Some(n) if is_ident(n) => Ok(n.to_string()),
        _ => Err(format!("bad # directive: {directive} expects @name")),
    }
}

fn parse_directive(line: &str) -> Result<StatementKind, String> {
    let (word, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
    let rest = rest.trim();
    match word {
        "#set" => {
            let toks: Vec<&str> = rest.split_whitespace().collect();
            if toks.len() != 2 {
                return Err("bad # directive: #set expects @name and one value".into());
            }
            let name = var_name(Some(toks[0]), "#set")?;
            let value = Arg::from_token(toks[1]).ok_or("bad # directive: invalid #set value")?;
            Ok(StatementKind::SetVar { name, value })
        }
        "#ask" => {
            let mut parts = rest.splitn(3, char::is_whitespace);
            let name = var_name(parts.next(), "#ask")?;
            let default = parts
                .next()
                .and_then(Arg::from_token)
                .ok_or("bad # directive: #ask expects a default value")?;
            let prompt = match parts.next().map(str::trim) {
                None | Some("") => name.clone(),
                Some(q) => q
                    .strip_prefix('"')
                    .and_then(|q| q.strip_suffix('"'))
                    .filter(|q| !q.contains('"'))
                    .ok_or("bad # directive: #ask prompt must be one quoted string")?
                    .to_string(),
            };
            Ok(StatementKind::Ask {
                name,
                default,
                prompt,
            })
        }
        other => Err(format!("bad # directive {other:?}")),
    }
}

fn parse_device(device: &str, rest: &str) -> Result<StatementKind, String> {
    let mut toks = rest.split_whitespace();
    let command = toks
        .next()
        .ok_or_else(|| format!("empty device command for {device}"))?;
    if !is_ident(command) {
        return Err(format!("bad device command {command:?}"));
    }
    let args = toks
        .map(|t| Arg::from_token(t).ok_or_else(|| format!("bad argument {t:?}")))
        .collect::<Result<_, _>>()?;
    Ok(StatementKind::DeviceCmd {
        device: device.to_string(),
        command: command.to_string(),
        args,
    })
}

fn parse_call(line: &str, paren: usize) -> Result<StatementKind, String> {
    let name = line[..paren].trim();
    if !is_ident(name) {
        return Err(format!("bad macro name {name:?}"));
    }
    let inner = line[paren + 1..]
        .strip_suffix(')')
        .ok_or_else(|| format!("unterminated call to {name}"))?;
    if inner.contains('(') || inner.contains(')') {
        return Err(format!("unbalanced parentheses in call to {name}"));
    }
    let args = if inner.trim().is_empty() {
        Vec::new()
    } else {
        inner
            .split(',')
            .map(|a| {
                Arg::from_token(a).ok_or_else(|| format!("empty or bad argument in call to {name}"))
            })
            .collect::<Result<_, _>>()?
    };
    Ok(StatementKind::MacroCall {
        name: name.to_string(),
        args,
    })
}
