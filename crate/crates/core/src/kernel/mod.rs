//! The central automaton. It reads a coalescing notification buffer and
//! runs one task per step: scheduling, cancellation, state changes or node
//! monitoring. Every task class also runs on a fixed period, so a lost
//! notification only delays work.

mod config;
pub mod daemon;
mod notify;

pub use config::{ConfigError, KernelConfig, Mode, ENV_MODE, ENV_MONITORING_PERIOD, ENV_SCHEDULING_PERIOD};
pub use notify::{Notification, NotificationBuffer, NotificationKind};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::admission::{admit, Rejection, SubmissionRequest};
use crate::executor::{
    check_nodes, fail_job, AlwaysUp, CancelOutcome, ExecutionEvent, ExecutionKind, HealthCheck, LaunchOutcome, Probe,
    ProcessExecutor, SimExecutor, VirtualClock,
};
use crate::model::{Job, JobId, JobState, JobType, NodeAllocation, NodeHealth, ReservationStatus, Time};
use crate::scheduler::{build_timeline, schedule_pass, TimelineError, Verdict};
use crate::store::{CasOutcome, EventKind, JobFilter, ReservationUpdate, StateUpdate, Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error("{0}")]
    Rejected(#[from] Rejection),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeleteOutcome {
    /// Flagged; the cancellation task will move the job to Error.
    Requested,
    AlreadyTerminal(JobState),
}

/// Task classes in the order they run when several periods fall due at
/// the same instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskClass {
    StateChange,
    Cancellation,
    Scheduling,
    Monitoring,
}

impl TaskClass {
    pub const ALL: [TaskClass; 4] = [
        TaskClass::StateChange,
        TaskClass::Cancellation,
        TaskClass::Scheduling,
        TaskClass::Monitoring,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    Periodic,
    Notified(Notification),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepResult {
    Ran { task: TaskClass, trigger: Trigger },
    Shutdown,
    Idle,
}

/// Events on the simulation clock.
#[derive(Debug, Clone, PartialEq)]
pub enum SimEvent {
    Exec(ExecutionEvent),
    Arrival(Box<SubmissionRequest>),
    /// A planned start or an acknowledgement deadline falls here.
    Wake,
}

impl From<ExecutionEvent> for SimEvent {
    fn from(e: ExecutionEvent) -> Self {
        SimEvent::Exec(e)
    }
}

/// One job start as dispatched by the kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub job: JobId,
    pub assignment: Vec<NodeAllocation>,
    pub start: Time,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KernelStats {
    pub steps: u64,
    pub task_runs: BTreeMap<String, u64>,
    pub scheduling_passes: u64,
    pub failures: u64,
    pub rejected_submissions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub steps: u64,
    pub end_time: Time,
}

/// Returned when the step budget runs out before quiescence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub time: Time,
    pub steps: u64,
    pub active: Vec<(JobId, JobState)>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "no quiescence after {} steps at t={}; {} job(s) not terminal",
            self.steps,
            self.time,
            self.active.len()
        )?;
        for (id, state) in self.active.iter().take(20) {
            write!(f, "\n  job {id}: {state}")?;
        }
        if self.active.len() > 20 {
            write!(f, "\n  ...")?;
        }
        Ok(())
    }
}

impl std::error::Error for Diagnostic {}

enum Backend {
    Sim(SimExecutor),
    Real(ProcessExecutor),
}

/// Admits and inserts a submission, then asks for a scheduling run.
pub fn submit_request(
    store: &Store,
    config: &KernelConfig,
    buffer: &NotificationBuffer,
    request: &SubmissionRequest,
) -> Result<JobId, SubmitError> {
    let nodes = store.nodes();
    let mut job = admit(request, &config.admission_rules, &nodes, &config.queues, store.now())?;
    let degrade = config.mode == Mode::Simulation && job.job_type == JobType::Interactive;
    if degrade {
        job.job_type = JobType::Passive;
    }
    let id = store.insert_job(job)?;
    if degrade {
        store.record_accounting(id, EventKind::Note, "interactive job runs as passive in simulation")?;
    }
    buffer.notify(Notification::Scheduling);
    Ok(id)
}

/// Flags a job for cancellation and wakes the cancellation task. Deleting
/// a terminal job only logs a warning.
pub fn request_deletion(store: &Store, buffer: &NotificationBuffer, id: JobId) -> Result<DeleteOutcome, StoreError> {
    let job = store.get_job(id).ok_or(StoreError::UnknownJob(id))?;
    if job.state.is_terminal() {
        store.record_accounting(
            id,
            EventKind::Warning,
            format!("delete ignored, job already {}", job.state),
        )?;
        return Ok(DeleteOutcome::AlreadyTerminal(job.state));
    }
    if store.flag_cancellation(id)? {
        store.record_accounting(id, EventKind::Note, "removal requested")?;
    }
    buffer.notify(Notification::Term(id));
    Ok(DeleteOutcome::Requested)
}

fn next_multiple(now: Time, period: Time) -> Time {
    (now.div_euclid(period) + 1) * period
}

pub struct Kernel {
    store: Arc<Store>,
    config: KernelConfig,
    buffer: Arc<NotificationBuffer>,
    backend: Backend,
    clock: VirtualClock<SimEvent>,
    probe: Arc<dyn Probe>,
    deadlines: BTreeMap<TaskClass, Time>,
    wakes: BTreeSet<Time>,
    ack_since: HashMap<JobId, Time>,
    executions: Vec<Execution>,
    stats: KernelStats,
    scheduling_active: bool,
}

impl Kernel {
    /// A kernel for `config.mode` whose nodes always answer probes.
    pub fn new(store: Arc<Store>, config: KernelConfig) -> Kernel {
        Kernel::with_probe(store, config, Arc::new(AlwaysUp))
    }

    pub fn with_probe(store: Arc<Store>, config: KernelConfig, probe: Arc<dyn Probe>) -> Kernel {
        let buffer = Arc::new(NotificationBuffer::new());
        let health = HealthCheck {
            enabled: config.health_check,
            timeout: config.probe_timeout,
        };
        let backend = match config.mode {
            Mode::Simulation => Backend::Sim(SimExecutor::new(store.clone(), probe.clone(), health)),
            Mode::Real => {
                let b = buffer.clone();
                Backend::Real(ProcessExecutor::new(
                    store.clone(),
                    probe.clone(),
                    health,
                    Arc::new(move || {
                        b.notify(Notification::ChState);
                    }),
                ))
            }
        };
        let now = store.now();
        let mut kernel = Kernel {
            store,
            config,
            buffer,
            backend,
            clock: VirtualClock::new(now),
            probe,
            deadlines: BTreeMap::new(),
            wakes: BTreeSet::new(),
            ack_since: HashMap::new(),
            executions: Vec::new(),
            stats: KernelStats::default(),
            scheduling_active: false,
        };
        for class in TaskClass::ALL {
            let period = kernel.period(class);
            kernel.deadlines.insert(class, next_multiple(now, period));
        }
        kernel
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn buffer(&self) -> &Arc<NotificationBuffer> {
        &self.buffer
    }

    pub fn stats(&self) -> &KernelStats {
        &self.stats
    }

    pub fn executions(&self) -> &[Execution] {
        &self.executions
    }

    pub fn clock(&self) -> &VirtualClock<SimEvent> {
        &self.clock
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self.backend, Backend::Sim(_))
    }

    pub fn now(&self) -> Time {
        match self.backend {
            Backend::Sim(_) => self.clock.now(),
            Backend::Real(_) => self.store.now(),
        }
    }

    /// Processors in use per job according to the executor.
    pub fn executor_in_use(&self) -> BTreeMap<JobId, Vec<NodeAllocation>> {
        match &self.backend {
            Backend::Sim(e) => e.in_use(),
            Backend::Real(e) => e.in_use(),
        }
    }

    /// Earliest instant at which a periodic task or a planned start is due.
    pub fn next_wakeup(&self) -> Time {
        let deadline = self.deadlines.values().min().copied().unwrap_or(Time::MAX);
        self.wakes.first().map_or(deadline, |w| deadline.min(*w))
    }

    fn period(&self, class: TaskClass) -> Time {
        match class {
            TaskClass::Monitoring => self.config.monitoring_period,
            _ => self.config.scheduling_period,
        }
    }

    pub fn notify(&self, n: Notification) -> bool {
        self.buffer.notify(n)
    }

    pub fn submit(&mut self, request: &SubmissionRequest) -> Result<JobId, SubmitError> {
        self.sync_store_time();
        let r = submit_request(&self.store, &self.config, &self.buffer, request);
        if r.is_err() {
            self.stats.rejected_submissions += 1;
        }
        r
    }

    pub fn delete(&mut self, id: JobId) -> Result<DeleteOutcome, StoreError> {
        self.sync_store_time();
        request_deletion(&self.store, &self.buffer, id)
    }

    /// Simulation: moves the clock to `t` and runs whatever falls due on the
    /// way. No effect in real mode.
    pub fn advance_to(&mut self, t: Time) {
        if !self.is_simulated() {
            return;
        }
        loop {
            self.run_pending();
            match self.clock.peek_time() {
                Some(next) if next <= t => {
                    self.clock.advance_to(next);
                }
                _ => break,
            }
        }
        self.clock.advance_to(t);
        self.sync_store_time();
        self.run_pending();
    }

    /// Simulation: submits `request` when the clock reaches `at`.
    pub fn submit_at(&mut self, at: Time, request: SubmissionRequest) {
        self.clock.schedule(at, SimEvent::Arrival(Box::new(request)));
    }

    /// Simulation: the probe is expected to fail on `node` over
    /// `[from, to)`; the monitoring task is woken at both edges.
    pub fn script_node_outage(&mut self, node: &str, from: Time, to: Time) {
        let at = |time, kind| ExecutionEvent { time, kind };
        self.clock
            .schedule(from, at(from, ExecutionKind::NodeSuspected(node.to_string())).into());
        self.clock
            .schedule(to, at(to, ExecutionKind::NodeRecovered(node.to_string())).into());
    }

    /// Reservation handshake reply from the client.
    pub fn acknowledge_reservation(&mut self, id: JobId, accept: bool) -> Result<bool, StoreError> {
        self.sync_store_time();
        let job = self.store.get_job(id).ok_or(StoreError::UnknownJob(id))?;
        if job.state != JobState::ToAckReservation {
            return Ok(false);
        }
        self.ack_since.remove(&id);
        if accept {
            let update = StateUpdate {
                reservation: Some(ReservationUpdate {
                    status: ReservationStatus::Scheduled,
                    start: job.reserved_start.unwrap_or(job.submission_time),
                    nodes: self.store.reservation_of(id),
                }),
                ..StateUpdate::default()
            };
            let done = self
                .store
                .cas_update_state_with(id, JobState::ToAckReservation, JobState::Waiting, update)?
                == CasOutcome::Updated;
            if done {
                self.buffer.notify(Notification::Scheduling);
            }
            Ok(done)
        } else {
            fail_job(&self.store, id, "reservation not acknowledged")?;
            self.buffer.notify(Notification::Scheduling);
            Ok(true)
        }
    }

    fn sync_store_time(&self) {
        if self.is_simulated() {
            self.store.set_time(self.clock.now());
        }
    }

    fn wake_at(&mut self, t: Time) {
        if self.wakes.insert(t) && self.is_simulated() {
            self.clock.schedule(t, SimEvent::Wake);
        }
    }

    /// Runs exactly one task: the earliest overdue periodic task, else the
    /// oldest notification.
    pub fn step(&mut self) -> StepResult {
        let now = self.now();
        self.sync_store_time();
        let due: Vec<Time> = self.wakes.range(..=now).copied().collect();
        if !due.is_empty() {
            for t in due {
                self.wakes.remove(&t);
            }
            self.buffer.notify(Notification::Scheduling);
        }
        let overdue = self
            .deadlines
            .iter()
            .filter(|(_, d)| **d <= now)
            .min_by_key(|(c, d)| (**d, **c))
            .map(|(c, _)| *c);
        let (task, trigger) = match overdue {
            Some(class) => {
                let period = self.period(class);
                self.deadlines.insert(class, next_multiple(now, period));
                (class, Trigger::Periodic)
            }
            None => match self.buffer.pop() {
                None => return StepResult::Idle,
                Some(Notification::Shutdown) => return StepResult::Shutdown,
                Some(n) => {
                    let class = match n {
                        Notification::Scheduling => TaskClass::Scheduling,
                        Notification::Term(_) => TaskClass::Cancellation,
                        Notification::ChState => TaskClass::StateChange,
                        Notification::Monitoring | Notification::Shutdown => TaskClass::Monitoring,
                    };
                    (class, Trigger::Notified(n))
                }
            },
        };
        self.stats.steps += 1;
        *self.stats.task_runs.entry(format!("{task:?}")).or_insert(0) += 1;
        let result = match task {
            TaskClass::Scheduling => self.task_scheduling(),
            TaskClass::Cancellation => self.task_cancellation(),
            TaskClass::StateChange => self.task_state_change(),
            TaskClass::Monitoring => self.task_monitoring(),
        };
        if let Err(e) = result {
            self.stats.failures += 1;
            log::error!("{task:?} task failed: {e}");
        }
        StepResult::Ran { task, trigger }
    }

    /// Steps until nothing is due at the current instant.
    pub fn run_pending(&mut self) -> u64 {
        let mut n = 0;
        loop {
            if self.is_simulated() {
                while let Some(ev) = self.clock.pop_due() {
                    self.handle_sim_event(ev);
                }
            }
            match self.step() {
                StepResult::Ran { .. } => n += 1,
                StepResult::Idle | StepResult::Shutdown => return n,
            }
        }
    }

    fn task_scheduling(&mut self) -> Result<(), KernelError> {
        assert!(!self.scheduling_active, "scheduling re-entered");
        self.scheduling_active = true;
        let r = self.schedule_once();
        self.scheduling_active = false;
        r
    }

    fn schedule_once(&mut self) -> Result<(), KernelError> {
        let now = self.now();
        let nodes = self.store.nodes();
        let mut timeline = build_timeline(now, &self.store.snapshot_occupations(now), &nodes)?;
        let waiting = self.store.query_jobs(&JobFilter::state(JobState::Waiting));
        let running_be: Vec<Job> = self
            .store
            .active_jobs()
            .into_iter()
            .filter(|j| j.best_effort && j.state.holds_resources())
            .collect();
        let decisions = schedule_pass(
            &self.config.queues,
            &waiting,
            &mut timeline,
            &running_be,
            self.config.victim_policy,
        );
        self.stats.scheduling_passes += 1;
        let by_id: HashMap<JobId, &Job> = waiting.iter().map(|j| (j.id, j)).collect();
        let mut next_start: Option<Time> = None;
        for d in decisions {
            match d.verdict {
                Verdict::LaunchNow(assignment) => self.dispatch_launch(d.job, assignment, now)?,
                Verdict::PlannedAt { start, assignment } => {
                    let is_request = by_id
                        .get(&d.job)
                        .is_some_and(|j| j.reservation == ReservationStatus::ToSchedule);
                    if is_request {
                        let update = StateUpdate {
                            reservation: Some(ReservationUpdate {
                                status: ReservationStatus::ToSchedule,
                                start,
                                nodes: assignment,
                            }),
                            ..StateUpdate::default()
                        };
                        if self.store.cas_update_state_with(
                            d.job,
                            JobState::Waiting,
                            JobState::ToAckReservation,
                            update,
                        )? == CasOutcome::Updated
                        {
                            self.ack_since.insert(d.job, now);
                            self.buffer.notify(Notification::ChState);
                            if !self.config.auto_ack {
                                self.wake_at(now + self.config.ack_timeout);
                            }
                        }
                    }
                    if start > now {
                        next_start = Some(next_start.map_or(start, |t| t.min(start)));
                    }
                }
                Verdict::Reject(msg) => {
                    fail_job(&self.store, d.job, &msg)?;
                }
                Verdict::FlagForCancellation => {
                    if self.store.flag_cancellation(d.job)? {
                        self.store
                            .record_accounting(d.job, EventKind::Note, "flagged for preemption")?;
                    }
                    self.buffer.notify(Notification::Term(d.job));
                }
            }
        }
        if let Some(t) = next_start {
            self.wake_at(t);
        }
        Ok(())
    }

    fn dispatch_launch(&mut self, id: JobId, assignment: Vec<NodeAllocation>, now: Time) -> Result<(), KernelError> {
        let update = StateUpdate::with_assignment(assignment.clone());
        if self
            .store
            .cas_update_state_with(id, JobState::Waiting, JobState::ToLaunch, update)?
            != CasOutcome::Updated
        {
            return Ok(());
        }
        let outcome = match &mut self.backend {
            Backend::Sim(e) => e.launch(id, &mut self.clock)?,
            Backend::Real(e) => e.launch(id)?,
        };
        match outcome {
            LaunchOutcome::Started { .. } => self.executions.push(Execution {
                job: id,
                assignment,
                start: now,
            }),
            LaunchOutcome::NodeFailure(_) | LaunchOutcome::SpawnFailed(_) => {
                self.buffer.notify(Notification::Scheduling);
            }
            LaunchOutcome::NotLaunchable(_) => {}
        }
        Ok(())
    }

    fn task_cancellation(&mut self) -> Result<(), KernelError> {
        let flags = self.store.cancellation_flags();
        for id in &flags {
            let outcome = match &mut self.backend {
                Backend::Sim(e) => e.cancel(*id, "cancelled", &mut self.clock)?,
                Backend::Real(e) => e.cancel(*id, "cancelled")?,
            };
            if let CancelOutcome::AlreadyTerminal(_) = outcome {
                log::debug!("job {id} already terminal when cancelled");
            }
            self.ack_since.remove(id);
            self.store.clear_cancellation(*id)?;
        }
        if !flags.is_empty() {
            self.buffer.notify(Notification::Scheduling);
        }
        Ok(())
    }

    fn task_state_change(&mut self) -> Result<(), KernelError> {
        let now = self.now();
        let mut changed = false;
        if let Backend::Real(e) = &self.backend {
            changed |= !e.drain_exits()?.is_empty();
        }
        for job in self.store.query_jobs(&JobFilter::state(JobState::ToError)) {
            changed |= self
                .store
                .cas_update_state(job.id, JobState::ToError, JobState::Error)?
                == CasOutcome::Updated;
        }
        for job in self.store.query_jobs(&JobFilter::state(JobState::ToAckReservation)) {
            if self.config.auto_ack {
                changed |= self.acknowledge_reservation(job.id, true)?;
            } else {
                let since = *self.ack_since.entry(job.id).or_insert(now);
                if now - since >= self.config.ack_timeout {
                    changed |= self.acknowledge_reservation(job.id, false)?;
                }
            }
        }
        if changed {
            self.buffer.notify(Notification::Scheduling);
        }
        Ok(())
    }

    fn task_monitoring(&mut self) -> Result<(), KernelError> {
        let nodes = self.store.nodes();
        let health = check_nodes(self.probe.as_ref(), &nodes, self.config.probe_timeout, self.now());
        let mut changed = false;
        for n in &nodes {
            // Dead is an operator decision; probes do not revive it.
            if n.health == NodeHealth::Dead {
                continue;
            }
            let h = health[&n.name];
            if h != n.health {
                self.store.set_node_health(&n.name, h)?;
                changed = true;
            }
        }
        if changed {
            self.buffer.notify(Notification::Scheduling);
        }
        Ok(())
    }

    fn handle_sim_event(&mut self, ev: SimEvent) {
        self.sync_store_time();
        match ev {
            SimEvent::Exec(e) => match &e.kind {
                ExecutionKind::JobCompleted(_) | ExecutionKind::JobWalltimeExceeded(_) => {
                    let Backend::Sim(exec) = &mut self.backend else { return };
                    match exec.on_event(&e) {
                        Ok(Some(_)) => {
                            self.buffer.notify(Notification::Scheduling);
                        }
                        Ok(None) => {}
                        Err(err) => {
                            self.stats.failures += 1;
                            log::error!("applying {e}: {err}");
                        }
                    }
                }
                ExecutionKind::NodeSuspected(_) | ExecutionKind::NodeRecovered(_) => {
                    self.buffer.notify(Notification::Monitoring);
                }
                ExecutionKind::JobStarted(_) => {}
            },
            SimEvent::Arrival(req) => {
                if let Err(e) = self.submit(&req) {
                    log::info!("submission from {} rejected: {e}", req.user);
                }
            }
            // Picked up by the next step through `wakes`.
            SimEvent::Wake => {}
        }
    }

    fn quiescent(&self) -> bool {
        self.buffer.is_empty()
            && self.clock.pending().all(|(_, e)| matches!(e, SimEvent::Wake))
            && self.store.active_jobs().is_empty()
    }

    /// Simulation driver: fires every event due at the current instant,
    /// steps until idle, then jumps to the next event or period. Stops at
    /// quiescence (nothing pending and every job terminal) or when the step
    /// budget runs out.
    pub fn run_until_quiescent(&mut self) -> Result<RunSummary, Diagnostic> {
        assert!(self.is_simulated(), "run_until_quiescent needs simulation mode");
        let start_steps = self.stats.steps;
        loop {
            while let Some(ev) = self.clock.pop_due() {
                self.handle_sim_event(ev);
            }
            match self.step() {
                StepResult::Ran { .. } => {
                    if self.stats.steps - start_steps >= self.config.step_budget {
                        return Err(self.diagnostic(self.stats.steps - start_steps));
                    }
                    continue;
                }
                StepResult::Shutdown => break,
                StepResult::Idle => {}
            }
            if self.quiescent() {
                break;
            }
            let next_event = self.clock.peek_time();
            let next_deadline = self.deadlines.values().min().copied();
            let next = match (next_event, next_deadline) {
                (Some(a), Some(b)) => a.min(b),
                (a, b) => a.or(b).expect("periodic deadlines always exist"),
            };
            let moved = self.clock.advance_to(next);
            debug_assert!(moved);
        }
        Ok(RunSummary {
            steps: self.stats.steps - start_steps,
            end_time: self.clock.now(),
        })
    }

    fn diagnostic(&self, steps: u64) -> Diagnostic {
        Diagnostic {
            time: self.now(),
            steps,
            active: self.store.active_jobs().into_iter().map(|j| (j.id, j.state)).collect(),
        }
    }
}
