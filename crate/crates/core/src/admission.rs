//! Submission admission: an ordered list of declarative rules that fill in
//! missing parameters and reject invalid requests before a job reaches the
//! store.
//!
//! Rules run in list order against the request as completed so far. A
//! `Reject` action stops evaluation. After the rules, a fixed set of checks
//! guarantees the resulting [`Job`] is complete and names a known queue.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Job, JobId, JobState, JobType, Node, PropertyExpr, Queue, ReservationStatus, Time};

/// A raw submission. Everything except `command` and `user` is optional.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionRequest {
    pub command: String,
    pub user: String,
    #[serde(default)]
    pub job_type: Option<JobType>,
    #[serde(default)]
    pub info_type: Option<String>,
    #[serde(default)]
    pub queue: Option<String>,
    #[serde(default)]
    pub nb_nodes: Option<u32>,
    #[serde(default)]
    pub weight: Option<u32>,
    #[serde(default)]
    pub max_time: Option<Time>,
    /// Property expression in its textual form.
    #[serde(default)]
    pub properties: Option<String>,
    #[serde(default)]
    pub launching_directory: Option<String>,
    /// Desired start of an advance reservation.
    #[serde(default)]
    pub reservation_start: Option<Time>,
    #[serde(default)]
    pub best_effort: bool,
    /// Simulation only.
    #[serde(default)]
    pub actual_duration: Option<Time>,
}

impl SubmissionRequest {
    pub fn new(user: impl Into<String>, command: impl Into<String>) -> SubmissionRequest {
        SubmissionRequest {
            user: user.into(),
            command: command.into(),
            ..SubmissionRequest::default()
        }
    }

    fn is_set(&self, field: Field) -> bool {
        match field {
            Field::Queue => self.queue.is_some(),
            Field::NbNodes => self.nb_nodes.is_some(),
            Field::Weight => self.weight.is_some(),
            Field::MaxTime => self.max_time.is_some(),
            Field::Properties => self.properties.is_some(),
            Field::JobType => self.job_type.is_some(),
            Field::LaunchingDirectory => self.launching_directory.is_some(),
            Field::InfoType => self.info_type.is_some(),
        }
    }

    fn int(&self, field: Field) -> Option<i64> {
        match field {
            Field::NbNodes => self.nb_nodes.map(i64::from),
            Field::Weight => self.weight.map(i64::from),
            Field::MaxTime => self.max_time,
            _ => None,
        }
    }

    fn set(&mut self, field: Field, value: &Value) -> Result<(), String> {
        let as_u32 = |v: &Value| match v {
            Value::Int(i) if *i >= 1 && *i <= i64::from(u32::MAX) => Ok(*i as u32),
            other => Err(format!("{field} needs a positive integer, got {other}")),
        };
        let as_str = |v: &Value| match v {
            Value::Str(s) => Ok(s.clone()),
            other => Err(format!("{field} needs a string, got {other}")),
        };
        match field {
            Field::Queue => self.queue = Some(as_str(value)?),
            Field::NbNodes => self.nb_nodes = Some(as_u32(value)?),
            Field::Weight => self.weight = Some(as_u32(value)?),
            Field::MaxTime => self.max_time = Some(i64::from(as_u32(value)?)),
            Field::Properties => self.properties = Some(as_str(value)?),
            Field::JobType => {
                self.job_type = Some(as_str(value)?.parse().map_err(|e| format!("{e}"))?);
            }
            Field::LaunchingDirectory => self.launching_directory = Some(as_str(value)?),
            Field::InfoType => self.info_type = Some(as_str(value)?),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Queue,
    NbNodes,
    Weight,
    MaxTime,
    Properties,
    JobType,
    LaunchingDirectory,
    InfoType,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::Queue => "queue",
            Field::NbNodes => "nb_nodes",
            Field::Weight => "weight",
            Field::MaxTime => "max_time",
            Field::Properties => "properties",
            Field::JobType => "job_type",
            Field::LaunchingDirectory => "launching_directory",
            Field::InfoType => "info_type",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Str(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Str(s) => write!(f, "'{s}'"),
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

/// Condition under which a rule's action fires.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Always,
    Missing(Field),
    Present(Field),
    QueueIs(String),
    UserIs(String),
    BestEffortRequested,
    /// The queue is set and names no configured queue.
    UnknownQueue,
    /// More nodes requested than the cluster has.
    NodesExceedCluster,
    /// nbNodes times weight exceeds the cluster's processor count.
    ProcsExceedCluster,
    /// nbNodes times weight exceeds the given count.
    ProcsAbove(u64),
    /// Reservation requested for a start before the submission instant.
    ReservationInPast,
    All(Vec<Predicate>),
    Any(Vec<Predicate>),
    Not(Box<Predicate>),
}

/// Rewrites a field that is already set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    ClampMax(i64),
    ClampMin(i64),
    Replace(Value),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Sets the field when the request leaves it unset.
    SetDefault {
        field: Field,
        value: Value,
    },
    /// Refuses the submission. `{queue}`, `{user}`, `{nb_nodes}`, `{weight}`,
    /// `{procs}`, `{cluster_nodes}`, `{cluster_procs}` and `{reservation}`
    /// are substituted in the message.
    Reject(String),
    Transform {
        field: Field,
        op: Transform,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionRule {
    pub name: String,
    pub when: Predicate,
    pub action: Action,
}

impl AdmissionRule {
    pub fn new(name: impl Into<String>, when: Predicate, action: Action) -> AdmissionRule {
        AdmissionRule {
            name: name.into(),
            when,
            action,
        }
    }

    pub fn set_default(name: &str, field: Field, value: impl Into<Value>) -> AdmissionRule {
        AdmissionRule::new(
            name,
            Predicate::Missing(field),
            Action::SetDefault {
                field,
                value: value.into(),
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// Name of the rule or built-in check that refused the request.
    pub rule: String,
    pub message: String,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Rejection {}

fn reject(rule: &str, message: impl Into<String>) -> Rejection {
    Rejection {
        rule: rule.to_string(),
        message: message.into(),
    }
}

pub const DEFAULT_QUEUE: &str = "default";
pub const BEST_EFFORT_QUEUE: &str = "besteffort";
pub const DEFAULT_MAX_TIME: Time = 7200;

/// Queues shipped with the default configuration.
pub fn default_queues() -> Vec<Queue> {
    vec![
        Queue::new(DEFAULT_QUEUE, 0, crate::model::Policy::Fifo),
        Queue::best_effort(BEST_EFFORT_QUEUE, -10),
    ]
}

/// The shipped rule list: fill in queue, size and walltime, then refuse
/// unknown queues, past reservations and requests larger than the cluster.
pub fn default_rules() -> Vec<AdmissionRule> {
    vec![
        AdmissionRule::new(
            "best-effort-queue",
            Predicate::All(vec![Predicate::BestEffortRequested, Predicate::Missing(Field::Queue)]),
            Action::SetDefault {
                field: Field::Queue,
                value: BEST_EFFORT_QUEUE.into(),
            },
        ),
        AdmissionRule::set_default("default-queue", Field::Queue, DEFAULT_QUEUE),
        AdmissionRule::set_default("default-nodes", Field::NbNodes, 1),
        AdmissionRule::set_default("default-weight", Field::Weight, 1),
        AdmissionRule::set_default("default-walltime", Field::MaxTime, DEFAULT_MAX_TIME),
        AdmissionRule::set_default("default-type", Field::JobType, "PASSIVE"),
        AdmissionRule::set_default("default-directory", Field::LaunchingDirectory, "."),
        AdmissionRule::new(
            "known-queue",
            Predicate::UnknownQueue,
            Action::Reject("unknown queue '{queue}'".into()),
        ),
        AdmissionRule::new(
            "reservation-in-future",
            Predicate::ReservationInPast,
            Action::Reject("reservation start {reservation} is in the past".into()),
        ),
        AdmissionRule::new(
            "cluster-nodes",
            Predicate::NodesExceedCluster,
            Action::Reject("{nb_nodes} nodes requested but the cluster has {cluster_nodes}".into()),
        ),
        AdmissionRule::new(
            "user-cap",
            Predicate::ProcsExceedCluster,
            Action::Reject("{procs} processors requested, the cluster has {cluster_procs}".into()),
        ),
    ]
}

struct Context<'a> {
    cluster: &'a [Node],
    queues: &'a [Queue],
    now: Time,
}

impl Context<'_> {
    fn cluster_procs(&self) -> u64 {
        self.cluster.iter().map(|n| u64::from(n.capacity)).sum()
    }
}

fn requested_procs(req: &SubmissionRequest) -> u64 {
    u64::from(req.nb_nodes.unwrap_or(1)) * u64::from(req.weight.unwrap_or(1))
}

fn holds(p: &Predicate, req: &SubmissionRequest, ctx: &Context<'_>) -> bool {
    match p {
        Predicate::Always => true,
        Predicate::Missing(f) => !req.is_set(*f),
        Predicate::Present(f) => req.is_set(*f),
        Predicate::QueueIs(q) => req.queue.as_deref() == Some(q.as_str()),
        Predicate::UserIs(u) => req.user == *u,
        Predicate::BestEffortRequested => req.best_effort,
        Predicate::UnknownQueue => req
            .queue
            .as_ref()
            .is_some_and(|q| !ctx.queues.iter().any(|known| &known.name == q)),
        Predicate::NodesExceedCluster => req.nb_nodes.is_some_and(|n| n as usize > ctx.cluster.len()),
        Predicate::ProcsExceedCluster => requested_procs(req) > ctx.cluster_procs(),
        Predicate::ProcsAbove(limit) => requested_procs(req) > *limit,
        Predicate::ReservationInPast => req.reservation_start.is_some_and(|s| s < ctx.now),
        Predicate::All(ps) => ps.iter().all(|p| holds(p, req, ctx)),
        Predicate::Any(ps) => ps.iter().any(|p| holds(p, req, ctx)),
        Predicate::Not(p) => !holds(p, req, ctx),
    }
}

fn render_message(template: &str, req: &SubmissionRequest, ctx: &Context<'_>) -> String {
    let opt = |v: Option<String>| v.unwrap_or_else(|| "?".to_string());
    template
        .replace("{queue}", &opt(req.queue.clone()))
        .replace("{user}", &req.user)
        .replace("{nb_nodes}", &opt(req.nb_nodes.map(|n| n.to_string())))
        .replace("{weight}", &opt(req.weight.map(|n| n.to_string())))
        .replace("{procs}", &requested_procs(req).to_string())
        .replace("{cluster_nodes}", &ctx.cluster.len().to_string())
        .replace("{cluster_procs}", &ctx.cluster_procs().to_string())
        .replace("{reservation}", &opt(req.reservation_start.map(|n| n.to_string())))
}

fn apply_transform(req: &mut SubmissionRequest, field: Field, op: &Transform) -> Result<(), String> {
    if !req.is_set(field) {
        return Ok(());
    }
    match op {
        Transform::Replace(v) => req.set(field, v),
        Transform::ClampMax(limit) | Transform::ClampMin(limit) => {
            let current = req
                .int(field)
                .ok_or_else(|| format!("{field} is not numeric and cannot be clamped"))?;
            let clamped = match op {
                Transform::ClampMax(_) => current.min(*limit),
                _ => current.max(*limit),
            };
            req.set(field, &Value::Int(clamped))
        }
    }
}

/// Validates and completes a request. Pure: the store is not touched.
///
/// On success the job is in `Waiting` with `submission_time = now`, and
/// carries `reservation = toSchedule` when a start was requested.
pub fn admit(
    request: &SubmissionRequest,
    rules: &[AdmissionRule],
    cluster: &[Node],
    queues: &[Queue],
    now: Time,
) -> Result<Job, Rejection> {
    if request.command.trim().is_empty() {
        return Err(reject("required", "a command is required"));
    }
    if request.user.trim().is_empty() {
        return Err(reject("required", "a user is required"));
    }
    let ctx = Context { cluster, queues, now };
    let mut req = request.clone();
    for rule in rules {
        if !holds(&rule.when, &req, &ctx) {
            continue;
        }
        match &rule.action {
            Action::SetDefault { field, value } => {
                if !req.is_set(*field) {
                    req.set(*field, value).map_err(|e| reject(&rule.name, e))?;
                }
            }
            Action::Reject(template) => return Err(reject(&rule.name, render_message(template, &req, &ctx))),
            Action::Transform { field, op } => {
                apply_transform(&mut req, *field, op).map_err(|e| reject(&rule.name, e))?;
            }
        }
    }

    let missing = |f: Field| reject("complete", format!("no value for {f} after admission rules"));
    let queue_name = req.queue.clone().ok_or_else(|| missing(Field::Queue))?;
    let queue = queues
        .iter()
        .find(|q| q.name == queue_name)
        .ok_or_else(|| reject("known-queue", format!("unknown queue '{queue_name}'")))?;
    let nb_nodes = req.nb_nodes.ok_or_else(|| missing(Field::NbNodes))?;
    let weight = req.weight.ok_or_else(|| missing(Field::Weight))?;
    let max_time = req.max_time.ok_or_else(|| missing(Field::MaxTime))?;
    if nb_nodes == 0 || weight == 0 || max_time < 1 {
        return Err(reject("positive", "nb_nodes, weight and max_time must be positive"));
    }
    if req.best_effort && !queue.best_effort {
        return Err(reject(
            "best-effort-queue",
            format!("best-effort jobs must go to a best-effort queue, not '{queue_name}'"),
        ));
    }
    if let Some(start) = req.reservation_start {
        if start < now {
            return Err(reject(
                "reservation-in-future",
                format!("reservation start {start} is in the past"),
            ));
        }
    }
    let properties: PropertyExpr = match &req.properties {
        Some(text) => text
            .parse()
            .map_err(|e| reject("properties", format!("bad property expression: {e}")))?,
        None => PropertyExpr::all(),
    };
    if let Some(d) = req.actual_duration {
        if d < 1 {
            return Err(reject("positive", "actual duration must be positive"));
        }
    }

    Ok(Job {
        id: JobId::UNASSIGNED,
        job_type: req.job_type.unwrap_or_default(),
        info_type: req.info_type.unwrap_or_default(),
        state: JobState::Waiting,
        reservation: if req.reservation_start.is_some() {
            ReservationStatus::ToSchedule
        } else {
            ReservationStatus::None
        },
        reserved_start: req.reservation_start,
        message: String::new(),
        user: req.user,
        nb_nodes,
        weight,
        command: req.command,
        bpid: None,
        queue: queue_name,
        max_time,
        properties,
        launching_directory: req.launching_directory.unwrap_or_else(|| ".".to_string()),
        submission_time: now,
        start_time: None,
        stop_time: None,
        best_effort: queue.best_effort,
        actual_duration: req.actual_duration,
    })
}
