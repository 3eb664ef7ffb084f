//! Local-process execution: one `sh -c` child per job, watched by a thread
//! that enforces the walltime and reports the exit to an inbox.

use std::collections::BTreeMap;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::{cancel_in_store, fail_job, precheck, CancelOutcome, HealthCheck, LaunchOutcome, Probe};
use crate::model::{JobId, JobState, NodeAllocation};
use crate::store::{CasOutcome, StateUpdate, Store, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessExit {
    /// Exit code, or None when killed by a signal.
    Exited(Option<i32>),
    Walltime,
}

struct Child {
    assignment: Vec<NodeAllocation>,
    kill: Arc<AtomicBool>,
}

#[derive(Default)]
struct Shared {
    children: Mutex<BTreeMap<JobId, Child>>,
    exits: Mutex<Vec<(JobId, ProcessExit)>>,
}

type ExitHook = Arc<dyn Fn() + Send + Sync>;

pub struct ProcessExecutor {
    store: Arc<Store>,
    probe: Arc<dyn Probe>,
    health: HealthCheck,
    shared: Arc<Shared>,
    on_exit: ExitHook,
    poll: Duration,
}

impl ProcessExecutor {
    /// `on_exit` runs on the watcher thread after an exit is queued; the
    /// kernel uses it to post a state-change notification.
    pub fn new(store: Arc<Store>, probe: Arc<dyn Probe>, health: HealthCheck, on_exit: ExitHook) -> ProcessExecutor {
        ProcessExecutor {
            store,
            probe,
            health,
            shared: Arc::default(),
            on_exit,
            poll: Duration::from_millis(10),
        }
    }

    pub fn launch(&self, id: JobId) -> Result<LaunchOutcome, StoreError> {
        let job = self.store.get_job(id).ok_or(StoreError::UnknownJob(id))?;
        if job.state != JobState::ToLaunch {
            return Ok(LaunchOutcome::NotLaunchable(job.state));
        }
        let assignment = self.store.assignment_of(id);
        if self.health.enabled {
            let now = self.store.now();
            if let Some(bad) = precheck(
                &self.store,
                self.probe.as_ref(),
                self.health.timeout,
                &job,
                &assignment,
                now,
            )? {
                return Ok(LaunchOutcome::NodeFailure(bad));
            }
        }
        if self
            .store
            .cas_update_state(id, JobState::ToLaunch, JobState::Launching)?
            == CasOutcome::Conflict
        {
            let state = self.store.get_job(id).map_or(JobState::Error, |j| j.state);
            return Ok(LaunchOutcome::NotLaunchable(state));
        }
        let spawned = Command::new("sh")
            .arg("-c")
            .arg(&job.command)
            .current_dir(&job.launching_directory)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn();
        let mut child = match spawned {
            Ok(c) => c,
            Err(e) => {
                let msg = format!("cannot start '{}': {e}", job.command);
                fail_job(&self.store, id, &msg)?;
                return Ok(LaunchOutcome::SpawnFailed(msg));
            }
        };
        let update = StateUpdate {
            bpid: Some(child.id()),
            ..StateUpdate::default()
        };
        if self
            .store
            .cas_update_state_with(id, JobState::Launching, JobState::Running, update)?
            == CasOutcome::Conflict
        {
            let _ = child.kill();
            let _ = child.wait();
            let state = self.store.get_job(id).map_or(JobState::Error, |j| j.state);
            return Ok(LaunchOutcome::NotLaunchable(state));
        }

        let kill = Arc::new(AtomicBool::new(false));
        self.shared.children.lock().expect("children lock").insert(
            id,
            Child {
                assignment,
                kill: kill.clone(),
            },
        );
        let shared = self.shared.clone();
        let on_exit = self.on_exit.clone();
        let poll = self.poll;
        let deadline = Instant::now() + Duration::from_secs(u64::try_from(job.max_time).unwrap_or(0));
        thread::spawn(move || {
            let exit = loop {
                if kill.load(Ordering::SeqCst) {
                    let _ = child.kill();
                    let _ = child.wait();
                    return;
                }
                match child.try_wait() {
                    Ok(Some(status)) => break ProcessExit::Exited(status.code()),
                    Ok(None) if Instant::now() >= deadline => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break ProcessExit::Walltime;
                    }
                    Ok(None) => thread::sleep(poll),
                    Err(_) => break ProcessExit::Exited(None),
                }
            };
            shared.exits.lock().expect("exits lock").push((id, exit));
            on_exit();
        });
        Ok(LaunchOutcome::Started { ends_at: None })
    }

    /// Applies queued exits. Returns the jobs that ended.
    pub fn drain_exits(&self) -> Result<Vec<JobId>, StoreError> {
        let exits = std::mem::take(&mut *self.shared.exits.lock().expect("exits lock"));
        let mut ended = Vec::new();
        for (id, exit) in exits {
            if self
                .shared
                .children
                .lock()
                .expect("children lock")
                .remove(&id)
                .is_none()
            {
                continue;
            }
            match exit {
                ProcessExit::Exited(Some(0)) => {
                    self.store
                        .cas_update_state(id, JobState::Running, JobState::Terminated)?;
                }
                ProcessExit::Exited(Some(code)) => {
                    fail_job(&self.store, id, &format!("exit status {code}"))?;
                }
                ProcessExit::Exited(None) => {
                    fail_job(&self.store, id, "killed by a signal")?;
                }
                ProcessExit::Walltime => {
                    fail_job(&self.store, id, "walltime exceeded")?;
                }
            }
            ended.push(id);
        }
        Ok(ended)
    }

    /// Kills the job's process if any and moves the job to Error.
    pub fn cancel(&self, id: JobId, reason: &str) -> Result<CancelOutcome, StoreError> {
        if let Some(child) = self.shared.children.lock().expect("children lock").remove(&id) {
            child.kill.store(true, Ordering::SeqCst);
        }
        cancel_in_store(&self.store, id, reason)
    }

    pub fn running_count(&self) -> usize {
        self.shared.children.lock().expect("children lock").len()
    }

    pub fn pending_exits(&self) -> usize {
        self.shared.exits.lock().expect("exits lock").len()
    }

    pub fn in_use(&self) -> BTreeMap<JobId, Vec<NodeAllocation>> {
        self.shared
            .children
            .lock()
            .expect("children lock")
            .iter()
            .map(|(id, c)| (*id, c.assignment.clone()))
            .collect()
    }
}

impl Drop for ProcessExecutor {
    fn drop(&mut self) {
        if let Ok(children) = self.shared.children.lock() {
            for c in children.values() {
                c.kill.store(true, Ordering::SeqCst);
            }
        }
    }
}
