//! Resumable statement interpreter.
//!
//! The interpreter executes one statement at a time and mirrors its cursor,
//! status and variable bindings into the database under `/script`, so a
//! database snapshot alone is enough to resume a run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ast::{Arg, Program, StatementKind};
use crate::rtdb::{p, Db, RtdbError, VarPath, VarValue};

pub const WRITER: &str = "script";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecStatus {
    Idle,
    Running,
    WaitingAnswer {
        name: String,
        prompt: String,
        default: String,
    },
    Finished,
    Aborted(String),
}

impl ExecStatus {
    /// Short word mirrored to `/script/status`.
    pub fn word(&self) -> &'static str {
        match self {
            ExecStatus::Idle => "idle",
            ExecStatus::Running => "running",
            ExecStatus::WaitingAnswer { .. } => "waiting",
            ExecStatus::Finished => "finished",
            ExecStatus::Aborted(_) => "aborted",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, ExecStatus::Finished | ExecStatus::Aborted(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecState {
    pub source_hash: String,
    pub last_completed: Option<usize>,
    pub env: BTreeMap<String, String>,
    pub status: ExecStatus,
}

impl ExecState {
    pub fn new(program: &Program) -> Self {
        Self {
            source_hash: program.source_hash.clone(),
            last_completed: None,
            env: BTreeMap::new(),
            status: ExecStatus::Idle,
        }
    }

    /// Index of the statement that runs next.
    pub fn next_index(&self) -> usize {
        self.last_completed.map_or(0, |i| i + 1)
    }

    /// Bindings mirrored under `/script/vars`.
    pub fn load_env(db: &Db) -> BTreeMap<String, String> {
        let prefix = p("/script/vars");
        db.list_vars(Some(&prefix))
            .into_iter()
            .filter_map(|path| {
                let v = db.get_var(&path).ok()?.value;
                Some((path.last().to_string(), v.as_text()?.to_string()))
            })
            .collect()
    }

    /// `last_completed` as recorded in the database (`None` if never run).
    pub fn recorded_last_completed(db: &Db) -> Option<usize> {
        db.get_int("/script/last_completed")
            .filter(|i| *i >= 0)
            .map(|i| i as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("unknown {0}")]
    Unknown(String),
    #[error("{0}")]
    Failed(String),
    #[error("kernel halted")]
    Halted,
}

/// Executes device commands and macro calls on behalf of the interpreter.
pub trait Engine {
    fn device(&mut self, device: &str, command: &str, args: &[String]) -> Result<(), EngineError>;
    fn call_macro(&mut self, name: &str, args: &[String]) -> Result<(), EngineError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScriptError {
    #[error("unbound variable @{0}")]
    UnboundVariable(String),
    #[error("dispatch error: unknown {0}")]
    Dispatch(String),
    #[error("{0}")]
    Engine(String),
    #[error("not waiting for an answer")]
    NotWaiting,
    #[error("interpreter not running: {0}")]
    NotRunning(String),
    #[error("start index {0} out of range")]
    BadIndex(usize),
    #[error("stopped by operator")]
    Stopped,
    #[error("kernel halted")]
    Halted,
    #[error(transparent)]
    Db(#[from] RtdbError),
}

/// Callbacks around statement execution.
pub trait RunHooks {
    /// Before statement `index` starts; an error ends the run.
    fn before_statement(&mut self, _exec: &ExecState, _index: usize) -> Result<(), ScriptError> {
        Ok(())
    }

    /// After statement `index` completed and its state was mirrored.
    fn statement_done(&mut self, _exec: &ExecState, _index: usize) -> Result<(), ScriptError> {
        Ok(())
    }

    /// Blocks until an answer arrives for the pending question.
    /// The default accepts the question's default value.
    fn await_answer(&mut self, _exec: &ExecState) -> Result<String, ScriptError> {
        Ok(String::new())
    }
}

pub struct NoHooks;
impl RunHooks for NoHooks {}

pub fn substitute(arg: &Arg, env: &BTreeMap<String, String>) -> Result<String, ScriptError> {
    match arg {
        Arg::Literal(s) => Ok(s.clone()),
        Arg::VarRef(name) => env
            .get(name)
            .cloned()
            .ok_or_else(|| ScriptError::UnboundVariable(name.clone())),
    }
}

/// Index of the last checkpoint at or before `last_completed`, or 0.
pub fn resume_point(program: &Program, last_completed: Option<usize>) -> usize {
    let Some(k) = last_completed else {
        return 0;
    };
    program
        .checkpoints
        .iter()
        .take_while(|&&c| c <= k)
        .last()
        .copied()
        .unwrap_or(0)
}

fn var_path(name: &str) -> Result<VarPath, ScriptError> {
    Ok(p("/script/vars").child(name)?)
}

/// Writes the interpreter state under `/script`.
pub fn mirror(db: &Db, exec: &ExecState) -> Result<(), ScriptError> {
    db.set("/script/hash", exec.source_hash.as_str(), WRITER)?;
    db.set(
        "/script/last_completed",
        exec.last_completed.map_or(-1, |i| i as i64),
        WRITER,
    )?;
    db.set("/script/status", exec.status.word(), WRITER)?;
    let reason = match &exec.status {
        ExecStatus::Aborted(r) => r.as_str(),
        _ => "",
    };
    db.set("/script/reason", reason, WRITER)?;
    Ok(())
}

fn mark_current(db: &Db, program: &Program, index: usize) -> Result<(), ScriptError> {
    let st = &program.statements[index];
    db.set("/script/current", index as i64, WRITER)?;
    db.set("/script/line", st.source_line as i64, WRITER)?;
    db.set("/script/statement", st.to_string(), WRITER)?;
    Ok(())
}

/// Advances `exec` by one statement.
///
/// Completed statements bump `last_completed`; an `Ask` leaves the state in
/// `WaitingAnswer` until [`answer`] is called. The caller is responsible for
/// making the completion durable (see [`RunHooks::statement_done`]).
pub fn step(
    exec: &mut ExecState,
    program: &Program,
    engine: &mut dyn Engine,
    db: &Db,
) -> Result<(), ScriptError> {
    if exec.status != ExecStatus::Running {
        return Err(ScriptError::NotRunning(exec.status.word().into()));
    }
    let index = exec.next_index();
    let Some(stmt) = program.statements.get(index) else {
        return Err(ScriptError::BadIndex(index));
    };
    mark_current(db, program, index)?;
    let args = |args: &[Arg]| -> Result<Vec<String>, ScriptError> {
        args.iter().map(|a| substitute(a, &exec.env)).collect()
    };
    let map_engine = |e: EngineError| match e {
        EngineError::Unknown(what) => ScriptError::Dispatch(what),
        EngineError::Failed(msg) => ScriptError::Engine(msg),
        EngineError::Halted => ScriptError::Halted,
    };
    match &stmt.kind {
        StatementKind::Comment(_) | StatementKind::Checkpoint(_) => {}
        StatementKind::SetVar { name, value } => {
            let v = substitute(value, &exec.env)?;
            db.set_var(&var_path(name)?, VarValue::Text(v.clone()), WRITER)?;
            exec.env.insert(name.clone(), v);
        }
        StatementKind::Ask {
            name,
            default,
            prompt,
        } => {
            let default = substitute(default, &exec.env)?;
            db.set("/script/ask/name", name.as_str(), WRITER)?;
            db.set("/script/ask/prompt", prompt.as_str(), WRITER)?;
            db.set("/script/ask/default", default.as_str(), WRITER)?;
            exec.status = ExecStatus::WaitingAnswer {
                name: name.clone(),
                prompt: prompt.clone(),
                default,
            };
            mirror(db, exec)?;
            return Ok(());
        }
        StatementKind::DeviceCmd {
            device,
            command,
            args: a,
        } => {
            let a = args(a)?;
            engine.device(device, command, &a).map_err(map_engine)?;
        }
        StatementKind::MacroCall { name, args: a } => {
            let a = args(a)?;
            engine.call_macro(name, &a).map_err(map_engine)?;
        }
    }
    exec.last_completed = Some(index);
    mirror(db, exec)?;
    Ok(())
}

/// Resolves a pending question. An empty `value` accepts the default.
/// Completes the `Ask` statement.
pub fn answer(exec: &mut ExecState, value: &str, db: &Db) -> Result<(), ScriptError> {
    let ExecStatus::WaitingAnswer { name, default, .. } = &exec.status else {
        return Err(ScriptError::NotWaiting);
    };
    let chosen = if value.is_empty() {
        default.clone()
    } else {
        value.to_string()
    };
    let name = name.clone();
    db.set_var(&var_path(&name)?, VarValue::Text(chosen.clone()), WRITER)?;
    db.set("/script/ask/name", "", WRITER)?;
    exec.env.insert(name, chosen);
    exec.status = ExecStatus::Running;
    exec.last_completed = Some(exec.next_index());
    mirror(db, exec)?;
    Ok(())
}

/// Runs `program` from statement `from_index` to the end.
///
/// Variable bindings are loaded from the database, so a run resumed after a
/// restore sees the values the crashed run had assigned. Errors from
/// statements end the run in `Aborted`; only a kernel halt is returned as
/// `Err`, leaving the state as of the last completed statement.
pub fn run(
    program: &Program,
    engine: &mut dyn Engine,
    from_index: usize,
    db: &Db,
    hooks: &mut dyn RunHooks,
) -> Result<ExecState, ScriptError> {
    if from_index > program.len() {
        return Err(ScriptError::BadIndex(from_index));
    }
    let mut exec = ExecState::new(program);
    exec.env = ExecState::load_env(db);
    exec.last_completed = from_index.checked_sub(1);
    exec.status = ExecStatus::Running;
    mirror(db, &exec)?;

    while exec.next_index() < program.len() {
        let index = exec.next_index();
        let outcome = hooks
            .before_statement(&exec, index)
            .and_then(|_| step(&mut exec, program, engine, db))
            .and_then(|_| {
                if matches!(exec.status, ExecStatus::WaitingAnswer { .. }) {
                    let v = hooks.await_answer(&exec)?;
                    answer(&mut exec, &v, db)?;
                }
                hooks.statement_done(&exec, index)
            });
        match outcome {
            Ok(()) => {}
            Err(ScriptError::Halted) => return Err(ScriptError::Halted),
            Err(e) => {
                exec.status = ExecStatus::Aborted(e.to_string());
                mirror(db, &exec)?;
                return Ok(exec);
            }
        }
    }
    exec.status = ExecStatus::Finished;
    mirror(db, &exec)?;
    Ok(exec)
}
