//! Job execution. [`SimExecutor`] runs jobs on a [`VirtualClock`] using
//! each job's recorded true duration; [`ProcessExecutor`] runs the command
//! as a local child process. Both move jobs through the store with CAS
//! updates only, and both refuse to start on nodes that fail the probe when
//! health checking is on.

mod clock;
mod process;

pub use clock::{EventKey, VirtualClock};
pub use process::{ProcessExecutor, ProcessExit};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::model::{Job, JobId, JobState, Node, NodeAllocation, NodeHealth, Time};
use crate::store::{CasOutcome, EventKind, StateUpdate, Store, StoreError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecutionKind {
    JobStarted(JobId),
    JobCompleted(JobId),
    JobWalltimeExceeded(JobId),
    NodeSuspected(String),
    NodeRecovered(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionEvent {
    pub time: Time,
    pub kind: ExecutionKind,
}

impl fmt::Display for ExecutionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?}", self.time, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LaunchOutcome {
    /// Running; the end event is due at `ends_at`.
    Started { ends_at: Option<Time> },
    /// Probe failed on these nodes; the job went to Error.
    NodeFailure(Vec<String>),
    /// The job was not in toLaunch (e.g. cancelled meanwhile).
    NotLaunchable(JobState),
    /// The process could not be spawned; the job went to Error.
    SpawnFailed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CancelOutcome {
    Cancelled { from: JobState },
    AlreadyTerminal(JobState),
}

/// Answers whether a node can be reached and how long that takes.
pub trait Probe: Send + Sync {
    /// Round-trip latency in seconds at instant `at`, or None when the
    /// node does not answer at all.
    fn latency(&self, node: &str, at: Time) -> Option<Time>;
}

/// Every node answers immediately.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysUp;

impl Probe for AlwaysUp {
    fn latency(&self, _node: &str, _at: Time) -> Option<Time> {
        Some(0)
    }
}

/// A node is unreachable inside any of its `[from, to)` windows and
/// otherwise answers after its configured latency (0 by default).
#[derive(Debug, Clone, Default)]
pub struct ScriptedProbe {
    pub down: Vec<(String, Time, Time)>,
    pub latency: BTreeMap<String, Time>,
}

impl ScriptedProbe {
    pub fn new(down: Vec<(String, Time, Time)>) -> ScriptedProbe {
        ScriptedProbe {
            down,
            latency: BTreeMap::new(),
        }
    }
}

impl Probe for ScriptedProbe {
    fn latency(&self, node: &str, at: Time) -> Option<Time> {
        if self
            .down
            .iter()
            .any(|(n, from, to)| n == node && (*from..*to).contains(&at))
        {
            return None;
        }
        Some(self.latency.get(node).copied().unwrap_or(0))
    }
}

/// Alive when the probe answers within `timeout` seconds, Suspected
/// otherwise.
pub fn check_nodes(probe: &dyn Probe, nodes: &[Node], timeout: Time, at: Time) -> BTreeMap<String, NodeHealth> {
    nodes
        .iter()
        .map(|n| {
            let health = match probe.latency(&n.name, at) {
                Some(l) if l <= timeout => NodeHealth::Alive,
                _ => NodeHealth::Suspected,
            };
            (n.name.clone(), health)
        })
        .collect()
}

/// Moves a non-terminal job through toError to Error. Retries on conflict
/// so a concurrent transition cannot make it miss.
pub(crate) fn fail_job(store: &Store, id: JobId, message: &str) -> Result<Option<JobState>, StoreError> {
    loop {
        let job = store.get_job(id).ok_or(StoreError::UnknownJob(id))?;
        let from = job.state;
        if from.is_terminal() {
            return Ok(None);
        }
        if from != JobState::ToError
            && store.cas_update_state_with(id, from, JobState::ToError, StateUpdate::with_message(message))?
                == CasOutcome::Conflict
        {
            continue;
        }
        store.cas_update_state(id, JobState::ToError, JobState::Error)?;
        return Ok(Some(from));
    }
}

/// Cancels `id` wherever it is. A terminal job is left alone and a warning
/// is logged against it.
pub(crate) fn cancel_in_store(store: &Store, id: JobId, reason: &str) -> Result<CancelOutcome, StoreError> {
    match fail_job(store, id, reason)? {
        Some(from) => {
            store.record_accounting(id, EventKind::Cancel, format!("cancelled in {from}: {reason}"))?;
            Ok(CancelOutcome::Cancelled { from })
        }
        None => {
            let state = store.get_job(id).ok_or(StoreError::UnknownJob(id))?.state;
            store.record_accounting(id, EventKind::Warning, format!("cancel ignored, job already {state}"))?;
            Ok(CancelOutcome::AlreadyTerminal(state))
        }
    }
}

/// Probes the assignment; on failure marks the nodes Suspected and sends
/// the job to Error.
fn precheck(
    store: &Store,
    probe: &dyn Probe,
    timeout: Time,
    job: &Job,
    assignment: &[NodeAllocation],
    now: Time,
) -> Result<Option<Vec<String>>, StoreError> {
    let nodes: Vec<Node> = store
        .nodes()
        .into_iter()
        .filter(|n| assignment.iter().any(|a| a.node == n.name))
        .collect();
    let bad: Vec<String> = check_nodes(probe, &nodes, timeout, now)
        .into_iter()
        .filter(|(_, h)| *h != NodeHealth::Alive)
        .map(|(n, _)| n)
        .collect();
    if bad.is_empty() {
        return Ok(None);
    }
    for n in &bad {
        store.set_node_health(n, NodeHealth::Suspected)?;
    }
    let msg = format!("node(s) {} not responding before launch", bad.join(","));
    store.record_accounting(job.id, EventKind::Failure, msg.clone())?;
    fail_job(store, job.id, &msg)?;
    Ok(Some(bad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HealthCheck {
    pub enabled: bool,
    /// Seconds a node may take to answer.
    pub timeout: Time,
}

impl Default for HealthCheck {
    fn default() -> Self {
        HealthCheck {
            enabled: false,
            timeout: 5,
        }
    }
}

struct SimRun {
    assignment: Vec<NodeAllocation>,
    end: EventKey,
}

/// Virtual-clock executor. The store's clock is set from the virtual clock
/// before every update.
pub struct SimExecutor {
    store: Arc<Store>,
    probe: Arc<dyn Probe>,
    health: HealthCheck,
    running: BTreeMap<JobId, SimRun>,
}

impl SimExecutor {
    pub fn new(store: Arc<Store>, probe: Arc<dyn Probe>, health: HealthCheck) -> SimExecutor {
        SimExecutor {
            store,
            probe,
            health,
            running: BTreeMap::new(),
        }
    }

    /// Starts a toLaunch job at `clock.now()`. Its end event is the
    /// completion at `now + actualDuration`, or the walltime expiry at
    /// `now + maxTime` when the job would run longer. A job without a true
    /// duration runs for its full walltime and completes.
    pub fn launch<E: From<ExecutionEvent>>(
        &mut self,
        id: JobId,
        clock: &mut VirtualClock<E>,
    ) -> Result<LaunchOutcome, StoreError> {
        let now = clock.now();
        self.store.set_time(now);
        let job = self.store.get_job(id).ok_or(StoreError::UnknownJob(id))?;
        if job.state != JobState::ToLaunch {
            return Ok(LaunchOutcome::NotLaunchable(job.state));
        }
        let assignment = self.store.assignment_of(id);
        if self.health.enabled {
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
            || self
                .store
                .cas_update_state(id, JobState::Launching, JobState::Running)?
                == CasOutcome::Conflict
        {
            let state = self.store.get_job(id).map_or(JobState::Error, |j| j.state);
            return Ok(LaunchOutcome::NotLaunchable(state));
        }
        let actual = job.actual_duration.unwrap_or(job.max_time);
        let (at, kind) = if actual > job.max_time {
            (now + job.max_time, ExecutionKind::JobWalltimeExceeded(id))
        } else {
            (now + actual, ExecutionKind::JobCompleted(id))
        };
        let end = clock.schedule(at, ExecutionEvent { time: at, kind }.into());
        self.running.insert(id, SimRun { assignment, end });
        Ok(LaunchOutcome::Started { ends_at: Some(at) })
    }

    /// Applies a fired execution event. Returns the job that ended, if the
    /// event was still current.
    pub fn on_event(&mut self, event: &ExecutionEvent) -> Result<Option<JobId>, StoreError> {
        self.store.set_time(event.time);
        match &event.kind {
            ExecutionKind::JobCompleted(id) => {
                if self.running.remove(id).is_none() {
                    return Ok(None);
                }
                self.store
                    .cas_update_state(*id, JobState::Running, JobState::Terminated)?;
                Ok(Some(*id))
            }
            ExecutionKind::JobWalltimeExceeded(id) => {
                if self.running.remove(id).is_none() {
                    return Ok(None);
                }
                fail_job(&self.store, *id, "walltime exceeded")?;
                Ok(Some(*id))
            }
            _ => Ok(None),
        }
    }

    /// Cancels a job in any state, voiding its pending end event.
    pub fn cancel<E>(
        &mut self,
        id: JobId,
        reason: &str,
        clock: &mut VirtualClock<E>,
    ) -> Result<CancelOutcome, StoreError> {
        self.store.set_time(clock.now());
        let outcome = cancel_in_store(&self.store, id, reason)?;
        if let Some(run) = self.running.remove(&id) {
            clock.cancel(run.end);
        }
        Ok(outcome)
    }

    /// Processors in use per job, as this executor sees them.
    pub fn in_use(&self) -> BTreeMap<JobId, Vec<NodeAllocation>> {
        self.running.iter().map(|(id, r)| (*id, r.assignment.clone())).collect()
    }

    pub fn running_count(&self) -> usize {
        self.running.len()
    }
}
