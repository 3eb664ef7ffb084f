//! User commands (submit, delete, status) over either a running engine or
//! an in-process simulation session. Each returns the text to print and an
//! exit code: 0 success, 1 rejection or unknown job, 2 engine unreachable.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::admission::SubmissionRequest;
use crate::kernel::daemon::{self, ClientError, JobRow, Request, Response};
use crate::kernel::{DeleteOutcome, Kernel, SubmitError};
use crate::model::{JobId, JobState, Time};
use crate::store::StoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_REJECTED: i32 = 1;
pub const EXIT_UNREACHABLE: i32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommandError {
    Rejected(String),
    UnknownJob(JobId),
    Unreachable(String),
    Failed(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Rejected(_) | CommandError::UnknownJob(_) | CommandError::Failed(_) => EXIT_REJECTED,
            CommandError::Unreachable(_) => EXIT_UNREACHABLE,
        }
    }
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommandError::Rejected(m) => write!(f, "rejected: {m}"),
            CommandError::UnknownJob(id) => write!(f, "unknown job {id}"),
            CommandError::Unreachable(m) | CommandError::Failed(m) => f.write_str(m),
        }
    }
}

/// Where commands are sent.
pub trait Engine {
    fn submit(&mut self, request: SubmissionRequest) -> Result<JobId, CommandError>;
    /// Ok(Some(state)) when the job was already terminal.
    fn delete(&mut self, id: JobId) -> Result<Option<JobState>, CommandError>;
    fn stat(&mut self, filter: &StatFilter) -> Result<Vec<JobRow>, CommandError>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StatFilter {
    pub user: Option<String>,
    pub state: Option<JobState>,
    pub queue: Option<String>,
}

impl Engine for Kernel {
    fn submit(&mut self, request: SubmissionRequest) -> Result<JobId, CommandError> {
        Kernel::submit(self, &request).map_err(|e| match e {
            SubmitError::Rejected(r) => CommandError::Rejected(r.message),
            SubmitError::Store(e) => CommandError::Failed(e.to_string()),
        })
    }

    fn delete(&mut self, id: JobId) -> Result<Option<JobState>, CommandError> {
        match Kernel::delete(self, id) {
            Ok(DeleteOutcome::Requested) => Ok(None),
            Ok(DeleteOutcome::AlreadyTerminal(s)) => Ok(Some(s)),
            Err(StoreError::UnknownJob(id)) => Err(CommandError::UnknownJob(id)),
            Err(e) => Err(CommandError::Failed(e.to_string())),
        }
    }

    fn stat(&mut self, filter: &StatFilter) -> Result<Vec<JobRow>, CommandError> {
        let f = daemon::stat_filter(filter.user.clone(), filter.state, filter.queue.clone());
        Ok(self.store().query_jobs(&f).iter().map(JobRow::from).collect())
    }
}

/// A running engine reached through its socket.
#[derive(Debug, Clone)]
pub struct RemoteEngine {
    pub socket: PathBuf,
}

impl RemoteEngine {
    pub fn new(socket: impl Into<PathBuf>) -> RemoteEngine {
        RemoteEngine { socket: socket.into() }
    }

    fn call(&self, request: Request) -> Result<Response, CommandError> {
        daemon::call(&self.socket, &request).map_err(|e| match e {
            ClientError::Unreachable { .. } => CommandError::Unreachable(e.to_string()),
            ClientError::Protocol(m) => CommandError::Failed(m),
        })
    }
}

fn unexpected(r: Response) -> CommandError {
    match r {
        Response::Rejected { message } => CommandError::Rejected(message),
        Response::UnknownJob { id } => CommandError::UnknownJob(id),
        Response::Error { message } => CommandError::Failed(message),
        other => CommandError::Failed(format!("unexpected reply {other:?}")),
    }
}

impl Engine for RemoteEngine {
    fn submit(&mut self, request: SubmissionRequest) -> Result<JobId, CommandError> {
        match self.call(Request::Submit { request })? {
            Response::Submitted { id } => Ok(id),
            r => Err(unexpected(r)),
        }
    }

    fn delete(&mut self, id: JobId) -> Result<Option<JobState>, CommandError> {
        match self.call(Request::Del { id })? {
            Response::Deleted { already } => Ok(already),
            r => Err(unexpected(r)),
        }
    }

    fn stat(&mut self, filter: &StatFilter) -> Result<Vec<JobRow>, CommandError> {
        let request = Request::Stat {
            user: filter.user.clone(),
            state: filter.state,
            queue: filter.queue.clone(),
        };
        match self.call(request)? {
            Response::Jobs { jobs } => Ok(jobs),
            r => Err(unexpected(r)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommandOutput {
    pub stdout: String,
    pub stderr: String,
    pub code: i32,
}

impl CommandOutput {
    fn ok(stdout: String) -> CommandOutput {
        CommandOutput {
            stdout,
            ..CommandOutput::default()
        }
    }

    fn error(e: &CommandError) -> CommandOutput {
        CommandOutput {
            stderr: format!("{e}\n"),
            code: e.exit_code(),
            ..CommandOutput::default()
        }
    }
}

pub fn cmd_submit(engine: &mut dyn Engine, request: SubmissionRequest) -> CommandOutput {
    match engine.submit(request) {
        Ok(id) => CommandOutput::ok(format!("{id}\n")),
        Err(e) => CommandOutput::error(&e),
    }
}

pub fn cmd_del(engine: &mut dyn Engine, id: JobId) -> CommandOutput {
    match engine.delete(id) {
        Ok(None) => CommandOutput::ok(format!("deletion of job {id} requested\n")),
        Ok(Some(state)) => CommandOutput {
            stderr: format!("warning: job {id} is already {state}\n"),
            ..CommandOutput::default()
        },
        Err(e) => CommandOutput::error(&e),
    }
}

pub const STAT_HEADER: &str = "id\tuser\tqueue\tstate\tnodes\tsubmission\tstart\tstop\tmessage";

fn time_cell(t: Option<Time>) -> String {
    t.map_or_else(String::new, |t| t.to_string())
}

/// Tab-separated listing; unset times are empty cells.
pub fn render_rows(rows: &[JobRow]) -> String {
    let mut out = format!("{STAT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}x{}\t{}\t{}\t{}\t{}",
            r.id,
            r.user,
            r.queue,
            r.state,
            r.nb_nodes,
            r.weight,
            r.submission,
            time_cell(r.start),
            time_cell(r.stop),
            r.message.replace(['\t', '\n'], " ")
        );
    }
    out
}

pub fn cmd_stat(engine: &mut dyn Engine, filter: &StatFilter) -> CommandOutput {
    match engine.stat(filter) {
        Ok(rows) => CommandOutput::ok(render_rows(&rows)),
        Err(e) => CommandOutput::error(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelConfig;
    use crate::model::Node;
    use crate::store::Store;
    use std::sync::Arc;

    fn session() -> Kernel {
        let store = Arc::new(Store::new());
        store.add_node(Node::new("n0", 1)).unwrap();
        store.add_node(Node::new("n1", 1)).unwrap();
        Kernel::new(store, KernelConfig::default())
    }

    fn req(nb: u32) -> SubmissionRequest {
        SubmissionRequest {
            nb_nodes: Some(nb),
            weight: Some(1),
            max_time: Some(300),
            ..SubmissionRequest::new("ann", "cmd")
        }
    }

    #[test]
    fn first_submission_prints_one() {
        let mut k = session();
        let out = cmd_submit(&mut k, req(2));
        assert_eq!((out.stdout.as_str(), out.code), ("1\n", 0));
    }

    #[test]
    fn past_reservation_rejected_without_row() {
        let mut k = session();
        k.advance_to(1000);
        let out = cmd_submit(
            &mut k,
            SubmissionRequest {
                reservation_start: Some(10),
                ..req(1)
            },
        );
        assert_eq!(out.code, EXIT_REJECTED);
        assert!(out.stderr.starts_with("rejected:"));
        assert_eq!(k.store().job_count(), 0);
    }

    #[test]
    fn delete_outcomes() {
        let mut k = session();
        cmd_submit(&mut k, req(1));
        let out = cmd_del(&mut k, JobId(1));
        assert_eq!(out.code, 0);
        k.run_pending();
        assert_eq!(k.store().get_job(JobId(1)).unwrap().state, JobState::Error);
        let again = cmd_del(&mut k, JobId(1));
        assert_eq!(again.code, 0);
        assert!(again.stderr.contains("already Error"));
        assert_eq!(cmd_del(&mut k, JobId(7)).code, EXIT_REJECTED);
    }

    #[test]
    fn stat_header_only_when_empty() {
        let mut k = session();
        assert_eq!(
            cmd_stat(&mut k, &StatFilter::default()).stdout,
            format!("{STAT_HEADER}\n")
        );
    }

    #[test]
    fn running_row_has_empty_stop() {
        let mut k = session();
        cmd_submit(&mut k, req(2));
        k.run_pending();
        let out = cmd_stat(&mut k, &StatFilter::default()).stdout;
        let row: Vec<&str> = out.lines().nth(1).unwrap().split('\t').collect();
        assert_eq!(row[3], "Running");
        assert_eq!(row[4], "2x1");
        assert_eq!(row[7], "");
    }

    #[test]
    fn unreachable_engine_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let mut remote = RemoteEngine::new(dir.path().join("absent.sock"));
        assert_eq!(cmd_stat(&mut remote, &StatFilter::default()).code, EXIT_UNREACHABLE);
        assert_eq!(cmd_submit(&mut remote, req(1)).code, EXIT_UNREACHABLE);
    }
}
