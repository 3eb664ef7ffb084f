//! Domain types shared by every module, and the legal job state machine.
//!
//! ```text
//!                 ┌──────► Hold ───────┐
//!                 │          │         │
//!   submit ──► Waiting ◄─────┘         │
//!               │  │ ▲                 │
//!               │  │ └─ toAckReservation
//!               │  ▼                   │
//!               │ toLaunch ─► Launching ─► Running ─► Terminated
//!               │  │            │           │
//!               ▼  ▼            ▼           ▼
//!              toError ────────────────────────────► Error
//! ```
//!
//! Every non-terminal state may move to `toError`; `toError` only moves to
//! `Error`. `Terminated` and `Error` are terminal.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seconds since the engine epoch.
pub type Time = i64;

/// Job identifier: its index in the jobs table, starting at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JobId(pub u64);

impl JobId {
    /// Placeholder carried by jobs that have not been inserted yet.
    pub const UNASSIGNED: JobId = JobId(0);
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobState {
    Waiting,
    Hold,
    ToLaunch,
    ToError,
    ToAckReservation,
    Launching,
    Running,
    Terminated,
    Error,
}

impl JobState {
    pub const ALL: [JobState; 9] = [
        JobState::Waiting,
        JobState::Hold,
        JobState::ToLaunch,
        JobState::ToError,
        JobState::ToAckReservation,
        JobState::Launching,
        JobState::Running,
        JobState::Terminated,
        JobState::Error,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Terminated | JobState::Error)
    }

    /// States in which a job holds node assignments.
    pub fn holds_resources(self) -> bool {
        matches!(self, JobState::ToLaunch | JobState::Launching | JobState::Running)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Waiting => "Waiting",
            JobState::Hold => "Hold",
            JobState::ToLaunch => "toLaunch",
            JobState::ToError => "toError",
            JobState::ToAckReservation => "toAckReservation",
            JobState::Launching => "Launching",
            JobState::Running => "Running",
            JobState::Terminated => "Terminated",
            JobState::Error => "Error",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobState {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ParseError::new(format!("unknown job state '{s}'")))
    }
}

/// Returns true exactly for the edges of the job state diagram.
pub fn valid_transition(from: JobState, to: JobState) -> bool {
    use JobState::*;
    match from {
        Waiting => matches!(to, Hold | ToLaunch | ToAckReservation | ToError),
        Hold => matches!(to, Waiting | ToError),
        ToAckReservation => matches!(to, Waiting | ToError),
        ToLaunch => matches!(to, Launching | ToError),
        Launching => matches!(to, Running | ToError),
        Running => matches!(to, Terminated | ToError),
        ToError => to == Error,
        Terminated | Error => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ReservationStatus {
    #[default]
    None,
    ToSchedule,
    Scheduled,
}

impl ReservationStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ReservationStatus::None => "None",
            ReservationStatus::ToSchedule => "toSchedule",
            ReservationStatus::Scheduled => "Scheduled",
        }
    }
}

impl fmt::Display for ReservationStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReservationStatus {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            ReservationStatus::None,
            ReservationStatus::ToSchedule,
            ReservationStatus::Scheduled,
        ]
        .into_iter()
        .find(|r| r.as_str().eq_ignore_ascii_case(s))
        .ok_or_else(|| ParseError::new(format!("unknown reservation status '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum JobType {
    Interactive,
    #[default]
    Passive,
}

impl JobType {
    pub fn as_str(self) -> &'static str {
        match self {
            JobType::Interactive => "INTERACTIVE",
            JobType::Passive => "PASSIVE",
        }
    }
}

impl fmt::Display for JobType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobType {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "INTERACTIVE" => Ok(JobType::Interactive),
            "PASSIVE" => Ok(JobType::Passive),
            _ => Err(ParseError::new(format!("unknown job type '{s}'"))),
        }
    }
}

/// One row of the jobs table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub id: JobId,
    pub job_type: JobType,
    /// Contact string for interactive jobs, stored opaquely.
    pub info_type: String,
    pub state: JobState,
    pub reservation: ReservationStatus,
    pub reserved_start: Option<Time>,
    pub message: String,
    pub user: String,
    pub nb_nodes: u32,
    /// Processors required on each node.
    pub weight: u32,
    pub command: String,
    /// Handle used to kill the job (a local process id in real mode).
    pub bpid: Option<u32>,
    pub queue: String,
    /// Walltime in seconds.
    pub max_time: Time,
    pub properties: PropertyExpr,
    pub launching_directory: String,
    pub submission_time: Time,
    pub start_time: Option<Time>,
    pub stop_time: Option<Time>,
    pub best_effort: bool,
    /// True run length, only known to the simulator.
    pub actual_duration: Option<Time>,
}

impl Job {
    /// Total processors requested.
    pub fn procs(&self) -> u64 {
        u64::from(self.nb_nodes) * u64::from(self.weight)
    }

    /// A minimal waiting job, mostly useful in tests and generators.
    pub fn new(user: impl Into<String>, command: impl Into<String>, queue: impl Into<String>) -> Job {
        Job {
            id: JobId::UNASSIGNED,
            job_type: JobType::Passive,
            info_type: String::new(),
            state: JobState::Waiting,
            reservation: ReservationStatus::None,
            reserved_start: None,
            message: String::new(),
            user: user.into(),
            nb_nodes: 1,
            weight: 1,
            command: command.into(),
            bpid: None,
            queue: queue.into(),
            max_time: 7200,
            properties: PropertyExpr::default(),
            launching_directory: ".".to_string(),
            submission_time: 0,
            start_time: None,
            stop_time: None,
            best_effort: false,
            actual_duration: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum NodeHealth {
    #[default]
    Alive,
    Suspected,
    Dead,
}

impl NodeHealth {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeHealth::Alive => "Alive",
            NodeHealth::Suspected => "Suspected",
            NodeHealth::Dead => "Dead",
        }
    }
}

impl fmt::Display for NodeHealth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeHealth {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Alive" => Ok(NodeHealth::Alive),
            "Suspected" => Ok(NodeHealth::Suspected),
            "Dead" => Ok(NodeHealth::Dead),
            _ => Err(ParseError::new(format!("unknown node health '{s}'"))),
        }
    }
}

/// A property value attached to a node or used as a literal in a [`PropertyExpr`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Int(i64),
    Bool(bool),
    Str(String),
}

impl Scalar {
    fn compare(&self, other: &Scalar) -> Option<Ordering> {
        match (self, other) {
            (Scalar::Int(a), Scalar::Int(b)) => Some(a.cmp(b)),
            (Scalar::Bool(a), Scalar::Bool(b)) => Some(a.cmp(b)),
            (Scalar::Str(a), Scalar::Str(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }

    /// Parses a bare token: integers and booleans are recognised, anything else is a string.
    pub fn parse_token(token: &str) -> Scalar {
        if let Ok(i) = token.parse::<i64>() {
            Scalar::Int(i)
        } else if token.eq_ignore_ascii_case("true") {
            Scalar::Bool(true)
        } else if token.eq_ignore_ascii_case("false") {
            Scalar::Bool(false)
        } else {
            Scalar::Str(token.to_string())
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Str(s) => write!(f, "'{}'", s.replace('\\', "\\\\").replace('\'', "\\'")),
        }
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}

impl From<&str> for Scalar {
    fn from(v: &str) -> Self {
        Scalar::Str(v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub name: String,
    /// Processors on the node.
    pub capacity: u32,
    pub health: NodeHealth,
    pub properties: BTreeMap<String, Scalar>,
}

impl Node {
    pub fn new(name: impl Into<String>, capacity: u32) -> Node {
        Node {
            name: name.into(),
            capacity,
            health: NodeHealth::Alive,
            properties: BTreeMap::new(),
        }
    }

    pub fn with_property(mut self, key: impl Into<String>, value: impl Into<Scalar>) -> Node {
        self.properties.insert(key.into(), value.into());
        self
    }
}

/// Processors taken on one node by one job.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeAllocation {
    pub node: String,
    pub procs: u32,
}

impl NodeAllocation {
    pub fn new(node: impl Into<String>, procs: u32) -> NodeAllocation {
        NodeAllocation {
            node: node.into(),
            procs,
        }
    }
}

/// Ordering of waiting jobs inside a queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Policy {
    /// Submission order.
    #[default]
    #[serde(alias = "fifo")]
    Fifo,
    /// Smallest requested area (nbNodes times weight) first.
    #[serde(alias = "saf", alias = "SAF")]
    Saf,
}

impl FromStr for Policy {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fifo" => Ok(Policy::Fifo),
            "saf" => Ok(Policy::Saf),
            _ => Err(ParseError::new(format!("unknown policy '{s}' (expected fifo or saf)"))),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Fifo => "FIFO",
            Policy::Saf => "SAF",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Queue {
    pub name: String,
    /// Higher schedules first.
    #[serde(default)]
    pub priority: i32,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default = "default_true")]
    pub active: bool,
    #[serde(default)]
    pub best_effort: bool,
}

fn default_true() -> bool {
    true
}

impl Queue {
    pub fn new(name: impl Into<String>, priority: i32, policy: Policy) -> Queue {
        Queue {
            name: name.into(),
            priority,
            policy,
            active: true,
            best_effort: false,
        }
    }

    pub fn best_effort(name: impl Into<String>, priority: i32) -> Queue {
        Queue {
            best_effort: true,
            ..Queue::new(name, priority, Policy::Fifo)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CompareOp {
    fn holds(self, ord: Ordering) -> bool {
        match self {
            CompareOp::Eq => ord == Ordering::Equal,
            CompareOp::Ne => ord != Ordering::Equal,
            CompareOp::Lt => ord == Ordering::Less,
            CompareOp::Le => ord != Ordering::Greater,
            CompareOp::Gt => ord == Ordering::Greater,
            CompareOp::Ge => ord != Ordering::Less,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CompareOp::Eq => "=",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub key: String,
    pub op: CompareOp,
    pub value: Scalar,
}

impl Atom {
    pub fn new(key: impl Into<String>, op: CompareOp, value: impl Into<Scalar>) -> Atom {
        Atom {
            key: key.into(),
            op,
            value: value.into(),
        }
    }

    /// Absent keys and type mismatches (other than `!=`) make the atom false.
    pub fn holds(&self, properties: &BTreeMap<String, Scalar>) -> bool {
        match properties.get(&self.key) {
            None => false,
            Some(actual) => match actual.compare(&self.value) {
                Some(ord) => self.op.holds(ord),
                None => false,
            },
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.key, self.op.as_str(), self.value)
    }
}

/// Conjunction of comparisons against node properties. The empty
/// conjunction matches every node.
///
/// Textual form: `switch = 's1' AND mem >= 256`. `&&` is accepted in place
/// of `AND`, and `≠ ≤ ≥ == <>` are accepted as operator spellings.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct PropertyExpr {
    pub atoms: Vec<Atom>,
}

impl PropertyExpr {
    pub fn all() -> PropertyExpr {
        PropertyExpr::default()
    }

    pub fn and(mut self, atom: Atom) -> PropertyExpr {
        self.atoms.push(atom);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// True iff every atom of `expr` holds against the node's properties.
pub fn eval_property(expr: &PropertyExpr, node: &Node) -> bool {
    expr.atoms.iter().all(|a| a.holds(&node.properties))
}

impl fmt::Display for PropertyExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, atom) in self.atoms.iter().enumerate() {
            if i > 0 {
                f.write_str(" AND ")?;
            }
            write!(f, "{atom}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ParseError(pub String);

impl ParseError {
    pub fn new(msg: impl Into<String>) -> ParseError {
        ParseError(msg.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Quoted(String),
    Op(CompareOp),
    And,
}

fn tokenize(input: &str) -> Result<Vec<Token>, ParseError> {
    let mut tokens = Vec::new();
    let mut chars = input.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        match c {
            '\'' | '"' => {
                let quote = c;
                chars.next();
                let mut s = String::new();
                loop {
                    match chars.next() {
                        None => return Err(ParseError::new("unterminated string literal")),
                        Some('\\') => match chars.next() {
                            Some(esc) => s.push(esc),
                            None => return Err(ParseError::new("dangling escape")),
                        },
                        Some(ch) if ch == quote => break,
                        Some(ch) => s.push(ch),
                    }
                }
                tokens.push(Token::Quoted(s));
            }
            '=' => {
                chars.next();
                if chars.peek() == Some(&'=') {
                    chars.next();
                }
                tokens.push(Token::Op(CompareOp::Eq));
            }
            '!' => {
                chars.next();
                if chars.next() != Some('=') {
                    return Err(ParseError::new("expected '=' after '!'"));
                }
                tokens.push(Token::Op(CompareOp::Ne));
            }
            '<' => {
                chars.next();
                match chars.peek() {
                    Some('=') => {
                        chars.next();
                        tokens.push(Token::Op(CompareOp::Le));
                    }
                    Some('>') => {
                        chars.next();
                        tokens.push(Token::Op(CompareOp::Ne));
                    }
                    _ => tokens.push(Token::Op(CompareOp::Lt)),
                }
            }
            '>' => {
                chars.next();
                if chars.peek() == Some(&'=') {
                    chars.next();
                    tokens.push(Token::Op(CompareOp::Ge));
                } else {
                    tokens.push(Token::Op(CompareOp::Gt));
                }
            }
            '≠' => {
                chars.next();
                tokens.push(Token::Op(CompareOp::Ne));
            }
            '≤' => {
                chars.next();
                tokens.push(Token::Op(CompareOp::Le));
            }
            '≥' => {
                chars.next();
                tokens.push(Token::Op(CompareOp::Ge));
            }
            '&' => {
                chars.next();
                if chars.next() != Some('&') {
                    return Err(ParseError::new("expected '&&'"));
                }
                tokens.push(Token::And);
            }
            _ => {
                let mut word = String::new();
                while let Some(&ch) = chars.peek() {
                    if ch.is_whitespace() || "'\"=!<>&≠≤≥".contains(ch) {
                        break;
                    }
                    word.push(ch);
                    chars.next();
                }
                if word.eq_ignore_ascii_case("and") {
                    tokens.push(Token::And);
                } else {
                    tokens.push(Token::Word(word));
                }
            }
        }
    }
    Ok(tokens)
}

impl FromStr for PropertyExpr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tokens = tokenize(s)?;
        let mut atoms = Vec::new();
        let mut it = tokens.into_iter();
        loop {
            let key = match it.next() {
                None if atoms.is_empty() => break,
                None => return Err(ParseError::new("expression ends after AND")),
                Some(Token::Word(k)) => k,
                Some(t) => return Err(ParseError::new(format!("expected property name, found {t:?}"))),
            };
            let op = match it.next() {
                Some(Token::Op(op)) => op,
                _ => return Err(ParseError::new(format!("expected comparison after '{key}'"))),
            };
            let value = match it.next() {
                Some(Token::Word(w)) => Scalar::parse_token(&w),
                Some(Token::Quoted(q)) => Scalar::Str(q),
                _ => {
                    return Err(ParseError::new(format!(
                        "expected literal after '{key} {}'",
                        op.as_str()
                    )))
                }
            };
            atoms.push(Atom { key, op, value });
            match it.next() {
                None => break,
                Some(Token::And) => continue,
                Some(t) => return Err(ParseError::new(format!("expected AND, found {t:?}"))),
            }
        }
        Ok(PropertyExpr { atoms })
    }
}
