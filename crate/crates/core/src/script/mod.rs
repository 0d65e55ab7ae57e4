//! Measurement scripts: parser, pretty-printer and resumable interpreter.

mod ast;
mod interp;
mod parser;

pub use ast::{is_ident, source_hash, Arg, Program, Statement, StatementKind};
pub use interp::{
    answer, mirror, resume_point, run, step, substitute, Engine, EngineError, ExecState,
    ExecStatus, NoHooks, RunHooks, ScriptError,
};
pub use parser::{parse, ParseError, CHECKPOINT_LINE};

/// The reference YuMO session script shipped with the repository.
pub const REFERENCE_SCRIPT: &str = include_str!("../../../../corpus/yumo_pb160502a.snx");
