//! Real-mode engine endpoint: a Unix socket speaking one JSON request and
//! one JSON response per connection, each on a single line.
//!
//! Connection handlers act as clients. They write to the store and post
//! notifications; only the kernel loop schedules or executes jobs.

use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{request_deletion, submit_request, DeleteOutcome, Kernel, KernelConfig, Notification, NotificationBuffer};
use super::{NotificationKind, StepResult, SubmitError};
use crate::admission::SubmissionRequest;
use crate::model::{Job, JobId, JobState, Time};
use crate::store::{JobFilter, Store, StoreError};

pub const ENV_SOCKET: &str = "BATCHSCHED_SOCKET";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Submit {
        request: SubmissionRequest,
    },
    Del {
        id: JobId,
    },
    Stat {
        user: Option<String>,
        state: Option<JobState>,
        queue: Option<String>,
    },
    Notify {
        kind: NotificationKind,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Response {
    Submitted { id: JobId },
    Deleted { already: Option<JobState> },
    Jobs { jobs: Vec<JobRow> },
    Ok,
    Rejected { message: String },
    UnknownJob { id: JobId },
    Error { message: String },
}

/// One line of the job listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRow {
    pub id: JobId,
    pub user: String,
    pub queue: String,
    pub state: JobState,
    pub nb_nodes: u32,
    pub weight: u32,
    pub submission: Time,
    pub start: Option<Time>,
    pub stop: Option<Time>,
    pub message: String,
}

impl From<&Job> for JobRow {
    fn from(j: &Job) -> Self {
        JobRow {
            id: j.id,
            user: j.user.clone(),
            queue: j.queue.clone(),
            state: j.state,
            nb_nodes: j.nb_nodes,
            weight: j.weight,
            submission: j.submission_time,
            start: j.start_time,
            stop: j.stop_time,
            message: j.message.clone(),
        }
    }
}

pub fn stat_filter(user: Option<String>, state: Option<JobState>, queue: Option<String>) -> JobFilter {
    JobFilter {
        user,
        state,
        queue,
        ..JobFilter::default()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("engine unreachable at {path}: {source}")]
    Unreachable { path: PathBuf, source: io::Error },
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Sends one request and waits for the reply.
pub fn call(socket: &Path, request: &Request) -> Result<Response, ClientError> {
    let unreachable = |source| ClientError::Unreachable {
        path: socket.to_path_buf(),
        source,
    };
    let mut stream = UnixStream::connect(socket).map_err(unreachable)?;
    stream
        .set_read_timeout(Some(Duration::from_secs(30)))
        .map_err(unreachable)?;
    let mut line = serde_json::to_string(request).map_err(|e| ClientError::Protocol(e.to_string()))?;
    line.push('\n');
    stream.write_all(line.as_bytes()).map_err(unreachable)?;
    let mut reply = String::new();
    BufReader::new(stream)
        .read_line(&mut reply)
        .map_err(|e| ClientError::Protocol(e.to_string()))?;
    serde_json::from_str(reply.trim_end()).map_err(|e| ClientError::Protocol(format!("{e}: {reply:?}")))
}

struct Shared {
    store: Arc<Store>,
    config: KernelConfig,
    buffer: Arc<NotificationBuffer>,
    stop: Arc<AtomicBool>,
}

fn handle(shared: &Shared, request: Request) -> Response {
    match request {
        Request::Submit { request } => match submit_request(&shared.store, &shared.config, &shared.buffer, &request) {
            Ok(id) => Response::Submitted { id },
            Err(SubmitError::Rejected(r)) => Response::Rejected { message: r.message },
            Err(e) => Response::Error { message: e.to_string() },
        },
        Request::Del { id } => match request_deletion(&shared.store, &shared.buffer, id) {
            Ok(DeleteOutcome::Requested) => Response::Deleted { already: None },
            Ok(DeleteOutcome::AlreadyTerminal(s)) => Response::Deleted { already: Some(s) },
            Err(StoreError::UnknownJob(id)) => Response::UnknownJob { id },
            Err(e) => Response::Error { message: e.to_string() },
        },
        Request::Stat { user, state, queue } => Response::Jobs {
            jobs: shared
                .store
                .query_jobs(&stat_filter(user, state, queue))
                .iter()
                .map(JobRow::from)
                .collect(),
        },
        Request::Notify { kind } => {
            let n = match kind {
                NotificationKind::Scheduling => Notification::Scheduling,
                NotificationKind::Term => Notification::Term(JobId(0)),
                NotificationKind::ChState => Notification::ChState,
                NotificationKind::Monitoring => Notification::Monitoring,
                NotificationKind::Shutdown => Notification::Shutdown,
            };
            shared.buffer.notify(n);
            Response::Ok
        }
        Request::Shutdown => {
            shared.stop.store(true, Ordering::SeqCst);
            shared.buffer.notify(Notification::Shutdown);
            Response::Ok
        }
    }
}

fn serve_connection(shared: &Shared, stream: UnixStream) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut line = String::new();
    BufReader::new(&stream).read_line(&mut line)?;
    let response = match serde_json::from_str::<Request>(line.trim_end()) {
        Ok(req) => handle(shared, req),
        Err(e) => Response::Error {
            message: format!("bad request: {e}"),
        },
    };
    let mut out = serde_json::to_string(&response).map_err(io::Error::other)?;
    out.push('\n');
    (&stream).write_all(out.as_bytes())
}

/// A running engine: the kernel loop on one thread, the socket listener on
/// another.
pub struct Daemon {
    socket: PathBuf,
    stop: Arc<AtomicBool>,
    buffer: Arc<NotificationBuffer>,
    kernel_thread: Option<thread::JoinHandle<Kernel>>,
    listener_thread: Option<thread::JoinHandle<()>>,
}

impl Daemon {
    /// Binds `socket` (replacing a stale socket file) and starts both
    /// threads.
    pub fn start(mut kernel: Kernel, socket: impl Into<PathBuf>) -> io::Result<Daemon> {
        let socket = socket.into();
        if socket.exists() {
            if UnixStream::connect(&socket).is_ok() {
                return Err(io::Error::new(
                    io::ErrorKind::AddrInUse,
                    format!("an engine already listens on {}", socket.display()),
                ));
            }
            std::fs::remove_file(&socket)?;
        }
        let listener = UnixListener::bind(&socket)?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let shared = Arc::new(Shared {
            store: kernel.store().clone(),
            config: kernel.config().clone(),
            buffer: kernel.buffer().clone(),
            stop: stop.clone(),
        });

        let listener_shared = shared.clone();
        let listener_thread = thread::spawn(move || {
            while !listener_shared.stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let s = listener_shared.clone();
                        thread::spawn(move || {
                            if let Err(e) = serve_connection(&s, stream) {
                                log::warn!("client connection: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                    Err(e) => {
                        log::error!("accept: {e}");
                        thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        });

        let kernel_stop = stop.clone();
        let kernel_thread = thread::spawn(move || {
            kernel.buffer().notify(Notification::Scheduling);
            while !kernel_stop.load(Ordering::SeqCst) {
                match kernel.step() {
                    StepResult::Ran { .. } => continue,
                    StepResult::Shutdown => break,
                    StepResult::Idle => {
                        let wait = (kernel.next_wakeup() - kernel.now()).clamp(0, 1);
                        kernel
                            .buffer()
                            .wait(Duration::from_millis(10).max(Duration::from_secs(wait as u64)));
                    }
                }
            }
            kernel_stop.store(true, Ordering::SeqCst);
            kernel
        });

        Ok(Daemon {
            socket,
            stop,
            buffer: shared.buffer.clone(),
            kernel_thread: Some(kernel_thread),
            listener_thread: Some(listener_thread),
        })
    }

    pub fn socket(&self) -> &Path {
        &self.socket
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Blocks until a shutdown request arrives, then returns the kernel.
    pub fn join(mut self) -> Kernel {
        self.finish().expect("kernel thread present until joined")
    }

    /// Stops both threads and returns the kernel.
    pub fn shutdown(mut self) -> Kernel {
        self.stop.store(true, Ordering::SeqCst);
        self.buffer.notify(Notification::Shutdown);
        self.finish().expect("kernel thread present until joined")
    }

    fn finish(&mut self) -> Option<Kernel> {
        let kernel = self
            .kernel_thread
            .take()
            .map(|h| h.join().expect("kernel thread panicked"));
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.listener_thread.take() {
            let _ = h.join();
        }
        let _ = std::fs::remove_file(&self.socket);
        kernel
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        if self.kernel_thread.is_some() {
            self.stop.store(true, Ordering::SeqCst);
            self.buffer.notify(Notification::Shutdown);
            self.finish();
        }
    }
}
