//! Replayable workload files.
//!
//! Plain text, one record per line, fields separated by whitespace, `#`
//! starts a comment. Three record kinds:
//!
//! ```text
//! node <name> <capacity> [key=value ...]
//! down <node> <from> <to>
//! job <submit> <type> <queue> <nb_nodes> <weight> <actual> <max> <best_effort> <reservation> [properties]
//! ```
//!
//! `type` is `passive` or `interactive`, `best_effort` is `0` or `1`,
//! `reservation` is a start time or `-`. Everything after the reservation
//! field is the property expression, in the same syntax as submissions.
//! Job lines must be in non-decreasing submit order; job ids follow file
//! order.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use crate::admission::SubmissionRequest;
use crate::model::{JobType, Node, PropertyExpr, Queue, Scalar, Time};

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("cannot read workload: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadJob {
    pub submit: Time,
    pub job_type: JobType,
    pub queue: String,
    pub nb_nodes: u32,
    pub weight: u32,
    /// True run length.
    pub actual: Time,
    /// Walltime.
    pub max_time: Time,
    pub properties: PropertyExpr,
    pub best_effort: bool,
    pub reservation: Option<Time>,
}

impl WorkloadJob {
    pub fn new(submit: Time, nb_nodes: u32, weight: u32, actual: Time, max_time: Time) -> WorkloadJob {
        WorkloadJob {
            submit,
            job_type: JobType::Passive,
            queue: crate::admission::DEFAULT_QUEUE.to_string(),
            nb_nodes,
            weight,
            actual,
            max_time,
            properties: PropertyExpr::default(),
            best_effort: false,
            reservation: None,
        }
    }

    /// Work in processor-seconds.
    pub fn work(&self) -> i64 {
        i64::from(self.nb_nodes) * i64::from(self.weight) * self.actual
    }

    pub fn to_request(&self, user: &str) -> SubmissionRequest {
        SubmissionRequest {
            job_type: Some(self.job_type),
            queue: Some(self.queue.clone()),
            nb_nodes: Some(self.nb_nodes),
            weight: Some(self.weight),
            max_time: Some(self.max_time),
            properties: (!self.properties.is_empty()).then(|| self.properties.to_string()),
            reservation_start: self.reservation,
            best_effort: self.best_effort,
            actual_duration: Some(self.actual),
            ..SubmissionRequest::new(user, format!("sleep {}", self.actual))
        }
    }
}

/// A node is expected to fail probes over `[from, to)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outage {
    pub node: String,
    pub from: Time,
    pub to: Time,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub nodes: Vec<Node>,
    pub jobs: Vec<WorkloadJob>,
    pub outages: Vec<Outage>,
}

fn field<T: std::str::FromStr>(line: usize, name: &str, token: Option<&str>) -> Result<T, WorkloadError> {
    let token = token.ok_or_else(|| WorkloadError::Syntax {
        line,
        message: format!("missing {name}"),
    })?;
    token.parse().map_err(|_| WorkloadError::Syntax {
        line,
        message: format!("bad {name} '{token}'"),
    })
}

impl WorkloadSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<WorkloadSpec, WorkloadError> {
        fs::read_to_string(path)?.parse()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WorkloadError> {
        Ok(fs::write(path, self.to_string())?)
    }

    /// Total processors.
    pub fn processors(&self) -> u64 {
        self.nodes.iter().map(|n| u64::from(n.capacity)).sum()
    }

    /// Jobmix work in processor-seconds.
    pub fn work(&self) -> i64 {
        self.jobs.iter().map(WorkloadJob::work).sum()
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let mut names = BTreeSet::new();
        for n in &self.nodes {
            if !names.insert(n.name.as_str()) {
                return Err(WorkloadError::Invalid(format!("node '{}' declared twice", n.name)));
            }
        }
        for w in self.jobs.windows(2) {
            if w[1].submit < w[0].submit {
                return Err(WorkloadError::Invalid(format!(
                    "submit times must not decrease ({} after {})",
                    w[1].submit, w[0].submit
                )));
            }
        }
        for o in &self.outages {
            if !names.contains(o.node.as_str()) {
                return Err(WorkloadError::Invalid(format!("outage on unknown node '{}'", o.node)));
            }
            if o.to <= o.from {
                return Err(WorkloadError::Invalid(format!("empty outage on '{}'", o.node)));
            }
        }
        Ok(())
    }

    /// Every queue a job names must exist in `queues`.
    pub fn check_queues(&self, queues: &[Queue]) -> Result<(), WorkloadError> {
        for j in &self.jobs {
            if !queues.iter().any(|q| q.name == j.queue) {
                return Err(WorkloadError::Invalid(format!("queue '{}' is not configured", j.queue)));
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for WorkloadSpec {
    type Err = WorkloadError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut spec = WorkloadSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut tokens = content.split_whitespace();
            match tokens.next() {
                Some("node") => {
                    let name: String = field(line, "node name", tokens.next())?;
                    let mut node = Node::new(name, field(line, "capacity", tokens.next())?);
                    for kv in tokens {
                        let (k, v) = kv.split_once('=').ok_or_else(|| WorkloadError::Syntax {
                            line,
                            message: format!("expected key=value, found '{kv}'"),
                        })?;
                        node.properties.insert(k.to_string(), Scalar::parse_token(v));
                    }
                    spec.nodes.push(node);
                }
                Some("down") => spec.outages.push(Outage {
                    node: field(line, "node name", tokens.next())?,
                    from: field(line, "outage start", tokens.next())?,
                    to: field(line, "outage end", tokens.next())?,
                }),
                Some("job") => {
                    let mut job = WorkloadJob {
                        submit: field(line, "submit time", tokens.next())?,
                        job_type: field(line, "job type", tokens.next())?,
                        queue: field(line, "queue", tokens.next())?,
                        nb_nodes: field(line, "node count", tokens.next())?,
                        weight: field(line, "weight", tokens.next())?,
                        actual: field(line, "duration", tokens.next())?,
                        max_time: field(line, "walltime", tokens.next())?,
                        ..WorkloadJob::new(0, 1, 1, 0, 0)
                    };
                    job.best_effort = match tokens.next() {
                        Some("0") => false,
                        Some("1") => true,
                        other => {
                            return Err(WorkloadError::Syntax {
                                line,
                                message: format!("best_effort must be 0 or 1, found {other:?}"),
                            })
                        }
                    };
                    job.reservation = match tokens.next() {
                        Some("-") => None,
                        t => Some(field(line, "reservation", t)?),
                    };
                    let rest: Vec<&str> = tokens.collect();
                    job.properties = rest.join(" ").parse().map_err(|e| WorkloadError::Syntax {
                        line,
                        message: format!("properties: {e}"),
                    })?;
                    spec.jobs.push(job);
                }
                Some(other) => {
                    return Err(WorkloadError::Syntax {
                        line,
                        message: format!("unknown record '{other}'"),
                    })
                }
                None => unreachable!("empty lines skipped"),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn bare(s: &Scalar) -> String {
    match s {
        Scalar::Str(s) => s.clone(),
        other => other.to_string(),
    }
}

impl fmt::Display for WorkloadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.nodes {
            let mut line = format!("node {} {}", n.name, n.capacity);
            for (k, v) in &n.properties {
                let _ = write!(line, " {k}={}", bare(v));
            }
            writeln!(f, "{line}")?;
        }
        for o in &self.outages {
            writeln!(f, "down {} {} {}", o.node, o.from, o.to)?;
        }
        for j in &self.jobs {
            write!(
                f,
                "job {} {} {} {} {} {} {} {} {}",
                j.submit,
                j.job_type,
                j.queue,
                j.nb_nodes,
                j.weight,
                j.actual,
                j.max_time,
                u8::from(j.best_effort),
                j.reservation.map_or("-".to_string(), |r| r.to_string()),
            )?;
            if !j.properties.is_empty() {
                write!(f, " {}", j.properties)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
