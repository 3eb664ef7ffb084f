//! Line-oriented snapshot file for the store.
//!
//! The file starts with a `# batchsched snapshot v1` line. Each table is
//! introduced by a `[name]` header line and followed by one row per line,
//! fields separated by tabs. Jobs use the column order of the jobs table
//! (`idJob jobType infoType state reservation message user nbNodes weight
//! command bpid queueName maxTime properties launchingDirectory
//! submissionTime startTime stopTime`) followed by `bestEffort reservedStart
//! actualDuration`. Timestamps are decimal integers; an absent optional value
//! is an empty field. Backslash, tab, CR and LF inside text are written as
//! `\\`, `\t`, `\r` and `\n`. See `docs/snapshot-format.md` for the full
//! layout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{AccountingRecord, StoreError, Tables};
use crate::model::{
    Atom, CompareOp, Job, JobId, JobState, JobType, Node, NodeAllocation, NodeHealth, PropertyExpr, ReservationStatus,
    Time,
};

pub const HEADER: &str = "# batchsched snapshot v1";

const JOB_COLUMNS: usize = 21;

/// A point-in-time copy of every table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    tables: Tables,
}

impl Snapshot {
    pub(crate) fn from_tables(tables: &Tables) -> Snapshot {
        Snapshot { tables: tables.clone() }
    }

    pub(crate) fn into_tables(self) -> Tables {
        self.tables
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.tables.jobs.values()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.tables.nodes.values()
    }

    pub fn accounting(&self) -> &[AccountingRecord] {
        &self.tables.accounting
    }

    pub fn render(&self) -> String {
        let t = &self.tables;
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        out.push_str("[meta]\n");
        let _ = writeln!(out, "next_id\t{}", t.next_id);

        out.push_str("[nodes]\n");
        for n in t.nodes.values() {
            let props = PropertyExpr {
                atoms: n
                    .properties
                    .iter()
                    .map(|(k, v)| Atom::new(k.clone(), CompareOp::Eq, v.clone()))
                    .collect(),
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                escape(&n.name),
                n.capacity,
                n.health,
                escape(&props.to_string())
            );
        }

        out.push_str("[jobs]\n");
        for j in t.jobs.values() {
            let fields = [
                j.id.to_string(),
                j.job_type.to_string(),
                escape(&j.info_type),
                j.state.to_string(),
                j.reservation.to_string(),
                escape(&j.message),
                escape(&j.user),
                j.nb_nodes.to_string(),
                j.weight.to_string(),
                escape(&j.command),
                opt(j.bpid),
                escape(&j.queue),
                j.max_time.to_string(),
                escape(&j.properties.to_string()),
                escape(&j.launching_directory),
                j.submission_time.to_string(),
                opt(j.start_time),
                opt(j.stop_time),
                j.best_effort.to_string(),
                opt(j.reserved_start),
                opt(j.actual_duration),
            ];
            out.push_str(&fields.join("\t"));
            out.push('\n');
        }

        for (name, table) in [("assignments", &t.assignments), ("reservations", &t.reservations)] {
            let _ = writeln!(out, "[{name}]");
            for (id, allocs) in table {
                for a in allocs {
                    let _ = writeln!(out, "{}\t{}\t{}", id, escape(&a.node), a.procs);
                }
            }
        }

        out.push_str("[cancel_flags]\n");
        for id in &t.cancel_flags {
            let _ = writeln!(out, "{id}");
        }

        out.push_str("[accounting]\n");
        for r in &t.accounting {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.time, r.job, r.kind, escape(&r.detail));
        }
        out
    }

    /// Writes to a temporary sibling file and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.render())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Snapshot, StoreError> {
        Snapshot::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Snapshot, StoreError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(corrupt(1, format!("missing '{HEADER}' header"))),
        }
        let mut t = Tables::default();
        let mut section = String::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.to_string();
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let err = |msg: String| corrupt(lineno, msg);
            match section.as_str() {
                "meta" => match f.as_slice() {
                    ["next_id", n] => t.next_id = num(n, lineno)?,
                    _ => return Err(err(format!("unknown meta row '{line}'"))),
                },
                "nodes" => {
                    if f.len() != 4 {
                        return Err(err(format!("node row has {} fields, expected 4", f.len())));
                    }
                    let name = unescape(f[0], lineno)?;
                    let props: PropertyExpr = parse_with(&unescape(f[3], lineno)?, lineno)?;
                    let mut properties = BTreeMap::new();
                    for atom in props.atoms {
                        if atom.op != CompareOp::Eq {
                            return Err(err("node properties must be key = value".into()));
                        }
                        properties.insert(atom.key, atom.value);
                    }
                    let node = Node {
                        name: name.clone(),
                        capacity: num(f[1], lineno)?,
                        health: parse_with::<NodeHealth>(f[2], lineno)?,
                        properties,
                    };
                    t.nodes.insert(name, node);
                }
                "jobs" => {
                    if f.len() != JOB_COLUMNS {
                        return Err(err(format!("job row has {} fields, expected {JOB_COLUMNS}", f.len())));
                    }
                    let job = Job {
                        id: JobId(num(f[0], lineno)?),
                        job_type: parse_with::<JobType>(f[1], lineno)?,
                        info_type: unescape(f[2], lineno)?,
                        state: parse_with::<JobState>(f[3], lineno)?,
                        reservation: parse_with::<ReservationStatus>(f[4], lineno)?,
                        message: unescape(f[5], lineno)?,
                        user: unescape(f[6], lineno)?,
                        nb_nodes: num(f[7], lineno)?,
                        weight: num(f[8], lineno)?,
                        command: unescape(f[9], lineno)?,
                        bpid: opt_num(f[10], lineno)?,
                        queue: unescape(f[11], lineno)?,
                        max_time: num(f[12], lineno)?,
                        properties: parse_with(&unescape(f[13], lineno)?, lineno)?,
                        launching_directory: unescape(f[14], lineno)?,
                        submission_time: num(f[15], lineno)?,
                        start_time: opt_num(f[16], lineno)?,
                        stop_time: opt_num(f[17], lineno)?,
                        best_effort: parse_with::<bool>(f[18], lineno)?,
                        reserved_start: opt_num(f[19], lineno)?,
                        actual_duration: opt_num(f[20], lineno)?,
                    };
                    t.jobs.insert(job.id, job);
                }
                "assignments" | "reservations" => {
                    if f.len() != 3 {
                        return Err(err(format!("allocation row has {} fields, expected 3", f.len())));
                    }
                    let id = JobId(num(f[0], lineno)?);
                    let alloc = NodeAllocation::new(unescape(f[1], lineno)?, num(f[2], lineno)?);
                    let table = if section == "assignments" {
                        &mut t.assignments
                    } else {
                        &mut t.reservations
                    };
                    table.entry(id).or_default().push(alloc);
                }
                "cancel_flags" => {
                    t.cancel_flags.insert(JobId(num(f[0], lineno)?));
                }
                "accounting" => {
                    if f.len() != 4 {
                        return Err(err(format!("accounting row has {} fields, expected 4", f.len())));
                    }
                    t.accounting.push(AccountingRecord {
                        time: num::<Time>(f[0], lineno)?,
                        job: JobId(num(f[1], lineno)?),
                        kind: parse_with(f[2], lineno)?,
                        detail: unescape(f[3], lineno)?,
                    });
                }
                "" => return Err(err("row before any table header".into())),
                other => return Err(err(format!("unknown table '{other}'"))),
            }
        }
        Ok(Snapshot { tables: t })
    }
}

fn corrupt(line: usize, msg: String) -> StoreError {
    StoreError::Corrupt { line, msg }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn num<T: FromStr>(s: &str, line: usize) -> Result<T, StoreError> {
    s.parse().map_err(|_| corrupt(line, format!("bad number '{s}'")))
}

fn opt_num<T: FromStr>(s: &str, line: usize) -> Result<Option<T>, StoreError> {
    if s.is_empty() {
        Ok(None)
    } else {
        num(s, line).map(Some)
    }
}

fn parse_with<T: FromStr>(s: &str, line: usize) -> Result<T, StoreError>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| corrupt(line, e.to_string()))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str, line: usize) -> Result<String, StoreError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(corrupt(line, format!("bad escape '\\{}'", other.unwrap_or(' ')))),
        }
    }
    Ok(out)
}
