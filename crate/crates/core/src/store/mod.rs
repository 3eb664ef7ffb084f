//! The shared state of the engine.
//!
//! Every module reads and writes jobs, nodes and assignments through this
//! store only. Each operation takes the table lock once, so operations are
//! linearizable with respect to each other. State changes go through
//! [`Store::cas_update_state`], which refuses transitions outside the job
//! state diagram before looking at the row.
//!
//! A store may be backed by a snapshot file (see [`snapshot`]); in that case
//! every committed mutation rewrites the file, and a mutation whose write
//! fails is rolled back.

pub mod snapshot;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::model::{
    valid_transition, Job, JobId, JobState, Node, NodeAllocation, NodeHealth, ParseError, ReservationStatus, Time,
};

pub use snapshot::Snapshot;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("unknown node '{0}'")]
    UnknownNode(String),
    #[error("node '{0}' already exists")]
    DuplicateNode(String),
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: JobState, to: JobState },
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("invalid assignment for job {job}: {reason}")]
    InvalidAssignment { job: JobId, reason: String },
    #[error("storage failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt snapshot at line {line}: {msg}")]
    Corrupt { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CasOutcome {
    Updated,
    Conflict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Submitted,
    StateChange,
    Cancel,
    Warning,
    Failure,
    Note,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Submitted => "submitted",
            EventKind::StateChange => "state",
            EventKind::Cancel => "cancel",
            EventKind::Warning => "warning",
            EventKind::Failure => "failure",
            EventKind::Note => "note",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "submitted" => EventKind::Submitted,
            "state" => EventKind::StateChange,
            "cancel" => EventKind::Cancel,
            "warning" => EventKind::Warning,
            "failure" => EventKind::Failure,
            "note" => EventKind::Note,
            _ => return Err(ParseError::new(format!("unknown event kind '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccountingRecord {
    pub time: Time,
    pub job: JobId,
    pub kind: EventKind,
    pub detail: String,
}

/// One (job, node) row of the assignments table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub job: JobId,
    pub node: String,
    pub procs: u32,
}

/// A block of processors held on one node over `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Occupation {
    pub job: JobId,
    pub node: String,
    pub procs: u32,
    pub start: Time,
    pub end: Time,
}

/// Conjunctive row filter; unset fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JobFilter {
    pub state: Option<JobState>,
    pub queue: Option<String>,
    pub user: Option<String>,
    pub best_effort: Option<bool>,
    /// Inclusive lower bound on submission time.
    pub submitted_from: Option<Time>,
    /// Exclusive upper bound on submission time.
    pub submitted_before: Option<Time>,
}

impl JobFilter {
    pub fn state(state: JobState) -> JobFilter {
        JobFilter {
            state: Some(state),
            ..JobFilter::default()
        }
    }

    pub fn matches(&self, job: &Job) -> bool {
        self.state.is_none_or(|s| job.state == s)
            && self.queue.as_ref().is_none_or(|q| &job.queue == q)
            && self.user.as_ref().is_none_or(|u| &job.user == u)
            && self.best_effort.is_none_or(|b| job.best_effort == b)
            && self.submitted_from.is_none_or(|t| job.submission_time >= t)
            && self.submitted_before.is_none_or(|t| job.submission_time < t)
    }
}

/// Extra row changes applied atomically with a state transition.
#[derive(Debug, Clone, Default)]
pub struct StateUpdate {
    /// Replaces the job's assignment rows; only legal when the target state holds resources.
    pub assignment: Option<Vec<NodeAllocation>>,
    pub message: Option<String>,
    pub bpid: Option<u32>,
    pub reservation: Option<ReservationUpdate>,
}

impl StateUpdate {
    pub fn with_assignment(assignment: Vec<NodeAllocation>) -> StateUpdate {
        StateUpdate {
            assignment: Some(assignment),
            ..StateUpdate::default()
        }
    }

    pub fn with_message(message: impl Into<String>) -> StateUpdate {
        StateUpdate {
            message: Some(message.into()),
            ..StateUpdate::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReservationUpdate {
    pub status: ReservationStatus,
    pub start: Time,
    pub nodes: Vec<NodeAllocation>,
}

#[derive(Debug)]
enum TimeSource {
    Manual(AtomicI64),
    System,
}

/// Contents of every table. Also the unit of persistence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub(crate) struct Tables {
    pub next_id: u64,
    pub jobs: BTreeMap<JobId, Job>,
    pub nodes: BTreeMap<String, Node>,
    pub assignments: BTreeMap<JobId, Vec<NodeAllocation>>,
    pub reservations: BTreeMap<JobId, Vec<NodeAllocation>>,
    pub cancel_flags: BTreeSet<JobId>,
    pub accounting: Vec<AccountingRecord>,
}

pub struct Store {
    tables: Mutex<Tables>,
    time: TimeSource,
    journal: Option<PathBuf>,
}

impl Default for Store {
    fn default() -> Self {
        Store::new()
    }
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store")
            .field("journal", &self.journal)
            .field("now", &self.now())
            .finish_non_exhaustive()
    }
}

impl Store {
    /// An empty in-memory store whose clock is set explicitly with [`Store::set_time`].
    pub fn new() -> Store {
        Store::from_tables(Tables::default(), TimeSource::Manual(AtomicI64::new(0)), None)
    }

    /// An empty in-memory store timestamping with the system clock.
    pub fn with_system_time() -> Store {
        Store::from_tables(Tables::default(), TimeSource::System, None)
    }

    fn from_tables(mut tables: Tables, time: TimeSource, journal: Option<PathBuf>) -> Store {
        if tables.next_id == 0 {
            tables.next_id = 1;
        }
        Store {
            tables: Mutex::new(tables),
            time,
            journal,
        }
    }

    /// Opens a file-backed store using the system clock. An existing file is
    /// loaded, and jobs caught mid-execution by a previous crash are moved to
    /// `toError`. A missing file starts an empty store.
    pub fn open(path: impl AsRef<Path>) -> Result<Store, StoreError> {
        let path = path.as_ref().to_path_buf();
        let tables = if path.exists() {
            Snapshot::load(&path)?.into_tables()
        } else {
            Tables::default()
        };
        let store = Store::from_tables(tables, TimeSource::System, Some(path));
        store.recover()?;
        store.commit(|_| Ok(()))?;
        Ok(store)
    }

    /// Loads a snapshot file into a detached in-memory store with a manual clock.
    pub fn load(path: impl AsRef<Path>) -> Result<Store, StoreError> {
        let tables = Snapshot::load(path.as_ref())?.into_tables();
        Ok(Store::from_tables(tables, TimeSource::Manual(AtomicI64::new(0)), None))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        self.snapshot().save(path.as_ref())
    }

    /// A consistent copy of every table.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot::from_tables(&self.lock())
    }

    pub fn from_snapshot(snapshot: Snapshot) -> Store {
        Store::from_tables(snapshot.into_tables(), TimeSource::Manual(AtomicI64::new(0)), None)
    }

    fn recover(&self) -> Result<(), StoreError> {
        let stranded: Vec<(JobId, JobState)> = self
            .lock()
            .jobs
            .values()
            .filter(|j| j.state.holds_resources())
            .map(|j| (j.id, j.state))
            .collect();
        for (id, state) in stranded {
            self.cas_update_state_with(
                id,
                state,
                JobState::ToError,
                StateUpdate::with_message("engine restarted while job was active"),
            )?;
        }
        Ok(())
    }

    pub fn now(&self) -> Time {
        match &self.time {
            TimeSource::Manual(t) => t.load(Ordering::SeqCst),
            TimeSource::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs() as Time)
                .unwrap_or(0),
        }
    }

    /// Sets the clock of a manually timed store. No effect on system-timed stores.
    pub fn set_time(&self, now: Time) {
        if let TimeSource::Manual(t) = &self.time {
            t.store(now, Ordering::SeqCst);
        }
    }

    fn lock(&self) -> MutexGuard<'_, Tables> {
        self.tables.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs `f` under the lock. `f` must validate before mutating; when the
    /// journal write fails afterwards the tables are restored.
    fn commit<R>(&self, f: impl FnOnce(&mut Tables) -> Result<R, StoreError>) -> Result<R, StoreError> {
        let mut tables = self.lock();
        match &self.journal {
            None => f(&mut tables),
            Some(path) => {
                let backup = tables.clone();
                let out = f(&mut tables)?;
                if let Err(e) = Snapshot::from_tables(&tables).save(path) {
                    *tables = backup;
                    return Err(e);
                }
                Ok(out)
            }
        }
    }

    /// Inserts a new job and returns its freshly assigned identifier.
    pub fn insert_job(&self, mut job: Job) -> Result<JobId, StoreError> {
        if job.state != JobState::Waiting {
            return Err(StoreError::InvalidJob(format!(
                "new jobs start in Waiting, not {}",
                job.state
            )));
        }
        if job.reservation == ReservationStatus::Scheduled {
            return Err(StoreError::InvalidJob(
                "a new job cannot carry a scheduled reservation".into(),
            ));
        }
        if job.reservation == ReservationStatus::ToSchedule && job.reserved_start.is_none() {
            return Err(StoreError::InvalidJob(
                "reservation request without a start time".into(),
            ));
        }
        if job.nb_nodes == 0 || job.weight == 0 || job.max_time < 1 {
            return Err(StoreError::InvalidJob(
                "nbNodes, weight and maxTime must be positive".into(),
            ));
        }
        if job.start_time.is_some() || job.stop_time.is_some() {
            return Err(StoreError::InvalidJob(
                "a new job cannot have start or stop times".into(),
            ));
        }
        let now = self.now();
        self.commit(|t| {
            let id = JobId(t.next_id);
            t.next_id += 1;
            job.id = id;
            let detail = format!(
                "queue={} user={} procs={}x{}",
                job.queue, job.user, job.nb_nodes, job.weight
            );
            t.jobs.insert(id, job);
            t.accounting.push(AccountingRecord {
                time: now,
                job: id,
                kind: EventKind::Submitted,
                detail,
            });
            Ok(id)
        })
    }

    pub fn cas_update_state(&self, id: JobId, expected: JobState, next: JobState) -> Result<CasOutcome, StoreError> {
        self.cas_update_state_with(id, expected, next, StateUpdate::default())
    }

    /// Compare-and-set on a job's state, applying `update` in the same commit.
    ///
    /// Entering `Launching` stamps the start time; entering `toError` or
    /// `Terminated` stamps the stop time of a started job. Leaving the
    /// resource-holding states drops assignment rows, and leaving the
    /// reservation negotiation states drops reservation rows.
    pub fn cas_update_state_with(
        &self,
        id: JobId,
        expected: JobState,
        next: JobState,
        update: StateUpdate,
    ) -> Result<CasOutcome, StoreError> {
        if !valid_transition(expected, next) {
            return Err(StoreError::IllegalTransition {
                from: expected,
                to: next,
            });
        }
        let now = self.now();
        self.commit(|t| {
            let job = t.jobs.get(&id).ok_or(StoreError::UnknownJob(id))?;
            if job.state != expected {
                return Ok(CasOutcome::Conflict);
            }
            if let Some(assignment) = &update.assignment {
                if !next.holds_resources() {
                    return Err(StoreError::InvalidAssignment {
                        job: id,
                        reason: format!("state {next} holds no resources"),
                    });
                }
                validate_allocations(&t.nodes, id, assignment)?;
            }
            if let Some(r) = &update.reservation {
                if r.status == ReservationStatus::Scheduled && r.start < job.submission_time {
                    return Err(StoreError::InvalidJob("reservation starts before submission".into()));
                }
                validate_allocations(&t.nodes, id, &r.nodes)?;
            }

            let job = t.jobs.get_mut(&id).expect("checked above");
            job.state = next;
            if next == JobState::Launching && job.start_time.is_none() {
                job.start_time = Some(now);
            }
            if matches!(next, JobState::ToError | JobState::Terminated)
                && job.start_time.is_some()
                && job.stop_time.is_none()
            {
                job.stop_time = Some(now.max(job.start_time.unwrap_or(now)));
            }
            if let Some(msg) = &update.message {
                job.message = msg.clone();
            }
            if let Some(pid) = update.bpid {
                job.bpid = Some(pid);
            }
            if let Some(r) = update.reservation {
                job.reservation = r.status;
                job.reserved_start = Some(r.start);
                t.reservations.insert(id, r.nodes);
            }
            if let Some(a) = update.assignment {
                t.assignments.insert(id, a);
            }
            if !next.holds_resources() {
                t.assignments.remove(&id);
            }
            if !matches!(next, JobState::Waiting | JobState::Hold | JobState::ToAckReservation) {
                t.reservations.remove(&id);
            }
            if next.is_terminal() {
                t.cancel_flags.remove(&id);
            }
            let detail = match &update.message {
                Some(m) if !m.is_empty() => format!("{expected}->{next}: {m}"),
                _ => format!("{expected}->{next}"),
            };
            t.accounting.push(AccountingRecord {
                time: now,
                job: id,
                kind: EventKind::StateChange,
                detail,
            });
            Ok(CasOutcome::Updated)
        })
    }

    pub fn get_job(&self, id: JobId) -> Option<Job> {
        self.lock().jobs.get(&id).cloned()
    }

    /// Matching rows in ascending id order.
    pub fn query_jobs(&self, filter: &JobFilter) -> Vec<Job> {
        self.lock()
            .jobs
            .values()
            .filter(|j| filter.matches(j))
            .cloned()
            .collect()
    }

    pub fn job_count(&self) -> usize {
        self.lock().jobs.len()
    }

    /// Occupied time blocks as seen at `now`.
    ///
    /// Jobs in `toLaunch` report `[now, now + maxTime)`, jobs in `Launching`
    /// or `Running` report `[startTime, startTime + maxTime)`, and reservations
    /// that are scheduled or awaiting acknowledgement report
    /// `[reservedStart, reservedStart + maxTime)`.
    pub fn snapshot_occupations(&self, now: Time) -> Vec<Occupation> {
        let t = self.lock();
        let mut out = Vec::new();
        for (id, allocs) in &t.assignments {
            let job = &t.jobs[id];
            let start = match job.state {
                JobState::ToLaunch => now,
                _ => job.start_time.unwrap_or(now),
            };
            for a in allocs {
                out.push(Occupation {
                    job: *id,
                    node: a.node.clone(),
                    procs: a.procs,
                    start,
                    end: start + job.max_time,
                });
            }
        }
        for (id, allocs) in &t.reservations {
            let job = &t.jobs[id];
            let pending = job.state == JobState::ToAckReservation;
            let scheduled = job.reservation == ReservationStatus::Scheduled
                && matches!(job.state, JobState::Waiting | JobState::Hold);
            if !(pending || scheduled) {
                continue;
            }
            let Some(start) = job.reserved_start else { continue };
            for a in allocs {
                out.push(Occupation {
                    job: *id,
                    node: a.node.clone(),
                    procs: a.procs,
                    start,
                    end: start + job.max_time,
                });
            }
        }
        out.sort();
        out
    }

    pub fn record_accounting(&self, id: JobId, kind: EventKind, detail: impl Into<String>) -> Result<(), StoreError> {
        let now = self.now();
        let detail = detail.into();
        self.commit(|t| {
            if !t.jobs.contains_key(&id) {
                return Err(StoreError::UnknownJob(id));
            }
            t.accounting.push(AccountingRecord {
                time: now,
                job: id,
                kind,
                detail,
            });
            Ok(())
        })
    }

    pub fn accounting(&self) -> Vec<AccountingRecord> {
        self.lock().accounting.clone()
    }

    pub fn accounting_len(&self) -> usize {
        self.lock().accounting.len()
    }

    pub fn accounting_for(&self, id: JobId) -> Vec<AccountingRecord> {
        self.lock().accounting.iter().filter(|r| r.job == id).cloned().collect()
    }

    pub fn add_node(&self, node: Node) -> Result<(), StoreError> {
        if node.capacity == 0 {
            return Err(StoreError::InvalidJob(format!(
                "node '{}' has zero capacity",
                node.name
            )));
        }
        self.commit(|t| {
            if t.nodes.contains_key(&node.name) {
                return Err(StoreError::DuplicateNode(node.name.clone()));
            }
            t.nodes.insert(node.name.clone(), node);
            Ok(())
        })
    }

    /// Nodes in name order.
    pub fn nodes(&self) -> Vec<Node> {
        self.lock().nodes.values().cloned().collect()
    }

    pub fn set_node_health(&self, name: &str, health: NodeHealth) -> Result<NodeHealth, StoreError> {
        self.commit(|t| {
            let node = t
                .nodes
                .get_mut(name)
                .ok_or_else(|| StoreError::UnknownNode(name.to_string()))?;
            Ok(std::mem::replace(&mut node.health, health))
        })
    }

    /// Assignment rows, ordered by job then by the order they were given.
    pub fn assignments(&self) -> Vec<Assignment> {
        self.lock()
            .assignments
            .iter()
            .flat_map(|(id, allocs)| {
                allocs.iter().map(move |a| Assignment {
                    job: *id,
                    node: a.node.clone(),
                    procs: a.procs,
                })
            })
            .collect()
    }

    pub fn assignment_of(&self, id: JobId) -> Vec<NodeAllocation> {
        self.lock().assignments.get(&id).cloned().unwrap_or_default()
    }

    pub fn reservation_of(&self, id: JobId) -> Vec<NodeAllocation> {
        self.lock().reservations.get(&id).cloned().unwrap_or_default()
    }

    /// Marks a job for cancellation. Returns false when it was already flagged.
    pub fn flag_cancellation(&self, id: JobId) -> Result<bool, StoreError> {
        self.commit(|t| {
            if !t.jobs.contains_key(&id) {
                return Err(StoreError::UnknownJob(id));
            }
            Ok(t.cancel_flags.insert(id))
        })
    }

    /// Jobs not yet in a terminal state, in id order.
    pub fn active_jobs(&self) -> Vec<Job> {
        self.lock()
            .jobs
            .values()
            .filter(|j| !j.state.is_terminal())
            .cloned()
            .collect()
    }

    pub fn cancellation_flags(&self) -> Vec<JobId> {
        self.lock().cancel_flags.iter().copied().collect()
    }

    pub fn clear_cancellation(&self, id: JobId) -> Result<(), StoreError> {
        self.commit(|t| {
            t.cancel_flags.remove(&id);
            Ok(())
        })
    }
}

fn validate_allocations(
    nodes: &BTreeMap<String, Node>,
    job: JobId,
    allocs: &[NodeAllocation],
) -> Result<(), StoreError> {
    let mut seen = BTreeSet::new();
    for a in allocs {
        let node = nodes
            .get(&a.node)
            .ok_or_else(|| StoreError::UnknownNode(a.node.clone()))?;
        if a.procs == 0 || a.procs > node.capacity {
            return Err(StoreError::InvalidAssignment {
                job,
                reason: format!("{} procs on '{}' (capacity {})", a.procs, a.node, node.capacity),
            });
        }
        if !seen.insert(&a.node) {
            return Err(StoreError::InvalidAssignment {
                job,
                reason: format!("node '{}' listed twice", a.node),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Job;
    use std::sync::Arc;
    use std::thread;

    fn store_with_nodes(n: usize, cap: u32) -> Store {
        let s = Store::new();
        for i in 0..n {
            s.add_node(Node::new(format!("n{i}"), cap)).unwrap();
        }
        s
    }

    fn job(user: &str) -> Job {
        Job::new(user, "true", "default")
    }

    #[test]
    fn first_id_is_one_then_two() {
        let s = Store::new();
        assert_eq!(s.insert_job(job("a")).unwrap(), JobId(1));
        assert_eq!(s.insert_job(job("a")).unwrap(), JobId(2));
        assert_eq!(s.accounting_len(), 2);
    }

    #[test]
    fn concurrent_inserts_yield_dense_ids() {
        let s = Arc::new(Store::new());
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let s = Arc::clone(&s);
                thread::spawn(move || (0..125).map(|_| s.insert_job(job("u")).unwrap()).collect::<Vec<_>>())
            })
            .collect();
        let mut ids: Vec<u64> = handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .map(|id| id.0)
            .collect();
        ids.sort_unstable();
        // serial insertion of 1000 jobs yields exactly 1..=1000
        let serial = Store::new();
        let oracle: Vec<u64> = (0..1000).map(|_| serial.insert_job(job("u")).unwrap().0).collect();
        assert_eq!(ids, oracle);
    }

    #[test]
    fn insert_rejects_non_waiting() {
        let s = Store::new();
        let mut j = job("a");
        j.state = JobState::Running;
        assert!(matches!(s.insert_job(j), Err(StoreError::InvalidJob(_))));
        assert_eq!(s.job_count(), 0);
    }

    #[test]
    fn cas_updates_matching_state() {
        let s = Store::new();
        let id = s.insert_job(job("a")).unwrap();
        assert_eq!(
            s.cas_update_state(id, JobState::Waiting, JobState::ToLaunch).unwrap(),
            CasOutcome::Updated
        );
        assert_eq!(s.get_job(id).unwrap().state, JobState::ToLaunch);
    }

    #[test]
    fn cas_conflict_leaves_row() {
        let s = Store::new();
        let id = s.insert_job(job("a")).unwrap();
        s.cas_update_state(id, JobState::Waiting, JobState::Hold).unwrap();
        let before = s.accounting_len();
        assert_eq!(
            s.cas_update_state(id, JobState::Waiting, JobState::ToLaunch).unwrap(),
            CasOutcome::Conflict
        );
        assert_eq!(s.get_job(id).unwrap().state, JobState::Hold);
        assert_eq!(s.accounting_len(), before);
    }

    #[test]
    fn cas_errors() {
        let s = Store::new();
        let id = s.insert_job(job("a")).unwrap();
        assert!(matches!(
            s.cas_update_state(JobId(99), JobState::Waiting, JobState::Hold),
            Err(StoreError::UnknownJob(JobId(99)))
        ));
        assert!(matches!(
            s.cas_update_state(id, JobState::Waiting, JobState::Running),
            Err(StoreError::IllegalTransition { .. })
        ));
        assert_eq!(s.get_job(id).unwrap().state, JobState::Waiting);
    }

    #[test]
    fn two_racers_one_winner() {
        for _ in 0..200 {
            let s = Arc::new(Store::new());
            let id = s.insert_job(job("a")).unwrap();
            let racers: Vec<_> = (0..2)
                .map(|_| {
                    let s = Arc::clone(&s);
                    thread::spawn(move || s.cas_update_state(id, JobState::Waiting, JobState::ToLaunch).unwrap())
                })
                .collect();
            let outcomes: Vec<_> = racers.into_iter().map(|h| h.join().unwrap()).collect();
            // both serial orders give exactly one Updated and one Conflict
            assert_eq!(outcomes.iter().filter(|o| **o == CasOutcome::Updated).count(), 1);
        }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn concurrent_cas_is_serializable() {
        use std::sync::Barrier;
        let menu = [
            (JobState::Waiting, JobState::Hold),
            (JobState::Hold, JobState::Waiting),
            (JobState::Waiting, JobState::ToLaunch),
            (JobState::Waiting, JobState::ToError),
            (JobState::Hold, JobState::ToError),
        ];
        for round in 0..300usize {
            let racers = 2 + round % 3;
            let ops: Vec<_> = (0..racers).map(|i| menu[(round * 7 + i * 3) % menu.len()]).collect();
            let s = Arc::new(Store::new());
            let id = s.insert_job(job("a")).unwrap();
            let barrier = Arc::new(Barrier::new(racers));
            let handles: Vec<_> = ops
                .iter()
                .map(|&(from, to)| {
                    let s = Arc::clone(&s);
                    let b = Arc::clone(&barrier);
                    thread::spawn(move || {
                        b.wait();
                        s.cas_update_state(id, from, to).unwrap()
                    })
                })
                .collect();
            let outcomes: Vec<CasOutcome> = handles.into_iter().map(|h| h.join().unwrap()).collect();
            let final_state = s.get_job(id).unwrap().state;

            // every serial order of the same calls
            let explained = permutations(racers).into_iter().any(|order| {
                let mut state = JobState::Waiting;
                let mut serial = vec![CasOutcome::Conflict; racers];
                for &i in &order {
                    let (from, to) = ops[i];
                    if state == from {
                        state = to;
                        serial[i] = CasOutcome::Updated;
                    }
                }
                serial == outcomes && state == final_state
            });
            assert!(explained, "ops {ops:?} gave {outcomes:?} ending {final_state}");
        }
    }

    #[test]
    fn query_filters() {
        let s = Store::new();
        assert!(s.query_jobs(&JobFilter::default()).is_empty());
        let a = s.insert_job(job("u")).unwrap();
        let b = s.insert_job(job("v")).unwrap();
        let c = s.insert_job(job("u")).unwrap();
        s.cas_update_state(b, JobState::Waiting, JobState::ToLaunch).unwrap();
        let waiting: Vec<_> = s
            .query_jobs(&JobFilter::state(JobState::Waiting))
            .iter()
            .map(|j| j.id)
            .collect();
        assert_eq!(waiting, vec![a, c]);
        let mine: Vec<_> = s
            .query_jobs(&JobFilter {
                user: Some("u".into()),
                submitted_from: Some(0),
                submitted_before: Some(1),
                ..Default::default()
            })
            .iter()
            .map(|j| j.id)
            .collect();
        assert_eq!(mine, vec![a, c]);
    }

    #[test]
    fn occupations_of_running_job() {
        let s = store_with_nodes(3, 1);
        assert!(s.snapshot_occupations(0).is_empty());
        let mut j = job("a");
        j.max_time = 100;
        let id = s.insert_job(j).unwrap();
        s.set_time(10);
        let alloc = vec![NodeAllocation::new("n0", 1), NodeAllocation::new("n1", 1)];
        s.cas_update_state_with(
            id,
            JobState::Waiting,
            JobState::ToLaunch,
            StateUpdate::with_assignment(alloc),
        )
        .unwrap();
        s.cas_update_state(id, JobState::ToLaunch, JobState::Launching).unwrap();
        s.cas_update_state(id, JobState::Launching, JobState::Running).unwrap();
        s.set_time(50);
        let occ = s.snapshot_occupations(50);
        assert_eq!(occ.len(), 2);
        assert!(occ.iter().all(|o| o.start == 10 && o.end == 110));
    }

    #[test]
    fn occupations_union_running_and_reservation() {
        let s = store_with_nodes(3, 1);
        let mut r = job("a");
        r.max_time = 30;
        r.reservation = ReservationStatus::ToSchedule;
        r.reserved_start = Some(500);
        let rid = s.insert_job(r).unwrap();
        s.cas_update_state_with(
            rid,
            JobState::Waiting,
            JobState::ToAckReservation,
            StateUpdate {
                reservation: Some(ReservationUpdate {
                    status: ReservationStatus::ToSchedule,
                    start: 500,
                    nodes: vec![NodeAllocation::new("n2", 1)],
                }),
                ..Default::default()
            },
        )
        .unwrap();
        s.cas_update_state_with(
            rid,
            JobState::ToAckReservation,
            JobState::Waiting,
            StateUpdate {
                reservation: Some(ReservationUpdate {
                    status: ReservationStatus::Scheduled,
                    start: 500,
                    nodes: vec![NodeAllocation::new("n2", 1)],
                }),
                ..Default::default()
            },
        )
        .unwrap();
        let run = s.insert_job(job("b")).unwrap();
        s.cas_update_state_with(
            run,
            JobState::Waiting,
            JobState::ToLaunch,
            StateUpdate::with_assignment(vec![NodeAllocation::new("n0", 1)]),
        )
        .unwrap();
        s.cas_update_state(run, JobState::ToLaunch, JobState::Launching)
            .unwrap();
        s.cas_update_state(run, JobState::Launching, JobState::Running).unwrap();

        let occ = s.snapshot_occupations(0);
        // oracle: enumerate both tables independently
        let mut expected = vec![
            Occupation {
                job: run,
                node: "n0".into(),
                procs: 1,
                start: 0,
                end: 7200,
            },
            Occupation {
                job: rid,
                node: "n2".into(),
                procs: 1,
                start: 500,
                end: 530,
            },
        ];
        expected.sort();
        assert_eq!(occ, expected);
    }

    #[test]
    fn assignments_cleared_on_exit() {
        let s = store_with_nodes(1, 2);
        let id = s.insert_job(job("a")).unwrap();
        s.cas_update_state_with(
            id,
            JobState::Waiting,
            JobState::ToLaunch,
            StateUpdate::with_assignment(vec![NodeAllocation::new("n0", 2)]),
        )
        .unwrap();
        assert_eq!(s.assignments().len(), 1);
        s.cas_update_state(id, JobState::ToLaunch, JobState::ToError).unwrap();
        assert!(s.assignments().is_empty());
    }

    #[test]
    fn assignment_over_capacity_rejected() {
        let s = store_with_nodes(1, 2);
        let id = s.insert_job(job("a")).unwrap();
        let err = s
            .cas_update_state_with(
                id,
                JobState::Waiting,
                JobState::ToLaunch,
                StateUpdate::with_assignment(vec![NodeAllocation::new("n0", 3)]),
            )
            .unwrap_err();
        assert!(matches!(err, StoreError::InvalidAssignment { .. }));
        assert_eq!(s.get_job(id).unwrap().state, JobState::Waiting);
    }

    #[test]
    fn accounting_appends_in_order() {
        let s = Store::new();
        let id = s.insert_job(job("a")).unwrap();
        let base = s.accounting_len();
        s.record_accounting(id, EventKind::Note, "one").unwrap();
        assert_eq!(s.accounting_len(), base + 1);
        s.record_accounting(id, EventKind::Note, "two").unwrap();
        let log = s.accounting_for(id);
        assert_eq!(log[log.len() - 2].detail, "one");
        assert_eq!(log[log.len() - 1].detail, "two");
        assert!(s.record_accounting(JobId(7), EventKind::Note, "x").is_err());
    }

    #[test]
    fn lifecycle_log_has_one_record_per_transition() {
        let s = store_with_nodes(1, 1);
        let id = s.insert_job(job("a")).unwrap();
        let script = [
            (JobState::Waiting, JobState::Hold),
            (JobState::Hold, JobState::Waiting),
            (JobState::Waiting, JobState::ToLaunch),
            (JobState::ToLaunch, JobState::Launching),
            (JobState::Launching, JobState::Running),
            (JobState::Running, JobState::Terminated),
        ];
        for (t, (from, to)) in script.iter().enumerate() {
            s.set_time(t as Time);
            assert_eq!(s.cas_update_state(id, *from, *to).unwrap(), CasOutcome::Updated);
        }
        let changes: Vec<String> = s
            .accounting_for(id)
            .into_iter()
            .filter(|r| r.kind == EventKind::StateChange)
            .map(|r| r.detail)
            .collect();
        let expected: Vec<String> = script.iter().map(|(a, b)| format!("{a}->{b}")).collect();
        assert_eq!(changes, expected);
        let j = s.get_job(id).unwrap();
        assert_eq!((j.start_time, j.stop_time), (Some(3), Some(5)));
    }

    #[test]
    fn open_recovers_active_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.tsv");
        {
            let s = Store::open(&path).unwrap();
            s.add_node(Node::new("n0", 1)).unwrap();
            let id = s.insert_job(job("a")).unwrap();
            s.cas_update_state_with(
                id,
                JobState::Waiting,
                JobState::ToLaunch,
                StateUpdate::with_assignment(vec![NodeAllocation::new("n0", 1)]),
            )
            .unwrap();
            s.insert_job(job("b")).unwrap();
        }
        let s = Store::open(&path).unwrap();
        assert_eq!(s.get_job(JobId(1)).unwrap().state, JobState::ToError);
        assert_eq!(s.get_job(JobId(2)).unwrap().state, JobState::Waiting);
        assert!(s.assignments().is_empty());
        assert_eq!(s.insert_job(job("c")).unwrap(), JobId(3));
    }

    #[test]
    fn failed_journal_write_rolls_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.tsv");
        let s = Store::open(&path).unwrap();
        s.insert_job(job("a")).unwrap();
        // replace the journal target with a directory so the rename fails
        std::fs::remove_file(&path).unwrap();
        std::fs::create_dir(&path).unwrap();
        assert!(matches!(s.insert_job(job("b")), Err(StoreError::Io(_))));
        assert_eq!(s.job_count(), 1);
    }

    #[test]
    fn flags() {
        let s = Store::new();
        let id = s.insert_job(job("a")).unwrap();
        assert!(s.flag_cancellation(id).unwrap());
        assert!(!s.flag_cancellation(id).unwrap());
        assert_eq!(s.cancellation_flags(), vec![id]);
        s.cas_update_state(id, JobState::Waiting, JobState::ToError).unwrap();
        s.cas_update_state(id, JobState::ToError, JobState::Error).unwrap();
        assert!(s.cancellation_flags().is_empty());
    }
}
