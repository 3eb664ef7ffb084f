//! Workload replay and metrics.
//!
//! Efficiency is `E = W / (P * T)`: W the jobmix work in processor-seconds,
//! P the processor count and T the elapsed time from the first submission
//! to the last job end. `W / P` is the elapsed time of a perfect packing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::executor::ScriptedProbe;
use crate::kernel::{Diagnostic, Kernel, KernelConfig, Mode};
use crate::model::{JobId, JobState, Node, NodeAllocation, Policy, Time};
use crate::store::{JobFilter, Store, StoreError};
use crate::workload::{WorkloadError, WorkloadJob, WorkloadSpec};

pub const PLOT_HEADER: &str = "time\tbusy_procs";

/// User name attached to replayed submissions.
pub const BENCH_USER: &str = "bench";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("benchmarks run in simulation mode only")]
    NotSimulation,
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    NotQuiescent(Diagnostic),
}

/// `W / (P * T)`, undefined when P or T is not positive.
pub fn efficiency(work: i64, processors: u64, elapsed: Time) -> Option<f64> {
    (processors > 0 && elapsed > 0).then(|| work as f64 / (processors as f64 * elapsed as f64))
}

/// Elapsed time of a perfect packing, `W / P`.
pub fn lower_bound(work: i64, processors: u64) -> Option<f64> {
    (processors > 0).then(|| work as f64 / processors as f64)
}

/// One executed job, as observed after the run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobOutcome {
    pub job: JobId,
    pub state: JobState,
    pub submission: Time,
    pub start: Option<Time>,
    pub stop: Option<Time>,
    pub procs: u64,
    pub assignment: Vec<NodeAllocation>,
}

impl JobOutcome {
    /// Termination date minus submission date.
    pub fn response_time(&self) -> Option<Time> {
        self.stop.map(|s| s - self.submission)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    /// Jobmix work in processor-seconds.
    pub work: i64,
    pub processors: u64,
    pub elapsed: Time,
    pub jobs: Vec<JobOutcome>,
    /// Processor-time points where a node held more than its capacity.
    pub oversubscriptions: usize,
    pub steps: u64,
}

impl MetricsReport {
    pub fn efficiency(&self) -> Option<f64> {
        efficiency(self.work, self.processors, self.elapsed)
    }

    pub fn lower_bound(&self) -> Option<f64> {
        lower_bound(self.work, self.processors)
    }

    pub fn count(&self, state: JobState) -> usize {
        self.jobs.iter().filter(|j| j.state == state).count()
    }

    pub fn response_times(&self) -> Vec<(JobId, Time)> {
        self.jobs
            .iter()
            .filter_map(|j| Some((j.job, j.response_time()?)))
            .collect()
    }

    pub fn mean_response(&self) -> Option<f64> {
        let r = self.response_times();
        (!r.is_empty()).then(|| r.iter().map(|(_, t)| *t as f64).sum::<f64>() / r.len() as f64)
    }

    /// Busy processors over time, counting terminated jobs only. Each point
    /// holds until the next one; the last point is always zero.
    pub fn utilization(&self) -> Vec<(Time, u64)> {
        let mut deltas: BTreeMap<Time, i64> = BTreeMap::new();
        for j in self.jobs.iter().filter(|j| j.state == JobState::Terminated) {
            if let (Some(s), Some(e)) = (j.start, j.stop) {
                *deltas.entry(s).or_default() += j.procs as i64;
                *deltas.entry(e).or_default() -= j.procs as i64;
            }
        }
        let mut busy = 0i64;
        let mut series = Vec::with_capacity(deltas.len());
        for (t, d) in deltas {
            busy += d;
            if series.last().is_some_and(|(_, b): &(Time, u64)| *b == busy as u64) {
                continue;
            }
            series.push((t, busy as u64));
        }
        series
    }
}

/// Integral of a step series in processor-seconds.
pub fn integrate(series: &[(Time, u64)]) -> i64 {
    series.windows(2).map(|w| (w[1].0 - w[0].0) * w[0].1 as i64).sum()
}

/// Counts instants where a node's busy processors exceed its capacity,
/// checked at every interval endpoint.
pub fn count_oversubscriptions(nodes: &[Node], jobs: &[JobOutcome]) -> usize {
    let mut per_node: BTreeMap<&str, BTreeMap<Time, i64>> = BTreeMap::new();
    for j in jobs {
        let (Some(s), Some(e)) = (j.start, j.stop) else {
            continue;
        };
        for a in &j.assignment {
            let d = per_node.entry(a.node.as_str()).or_default();
            *d.entry(s).or_default() += i64::from(a.procs);
            *d.entry(e).or_default() -= i64::from(a.procs);
        }
    }
    let mut violations = 0;
    for (name, deltas) in per_node {
        let cap = nodes
            .iter()
            .find(|n| n.name == name)
            .map_or(0, |n| i64::from(n.capacity));
        let mut busy = 0;
        for d in deltas.values() {
            busy += d;
            if busy > cap {
                violations += 1;
            }
        }
    }
    violations
}

fn collect(kernel: &Kernel, label: &str, work: i64) -> MetricsReport {
    let store = kernel.store();
    let nodes = store.nodes();
    let mut started: BTreeMap<JobId, Vec<NodeAllocation>> = BTreeMap::new();
    for e in kernel.executions() {
        started.insert(e.job, e.assignment.clone());
    }
    let jobs: Vec<JobOutcome> = store
        .query_jobs(&JobFilter::default())
        .into_iter()
        .map(|j| JobOutcome {
            job: j.id,
            state: j.state,
            submission: j.submission_time,
            start: j.start_time,
            stop: j.stop_time,
            procs: j.procs(),
            assignment: started.remove(&j.id).unwrap_or_default(),
        })
        .collect();
    let first = jobs.iter().map(|j| j.submission).min();
    let last = jobs.iter().filter_map(|j| j.stop).max();
    let elapsed = match (first, last) {
        (Some(f), Some(l)) => l - f,
        _ => 0,
    };
    MetricsReport {
        label: label.to_string(),
        work,
        processors: nodes.iter().map(|n| u64::from(n.capacity)).sum(),
        elapsed,
        oversubscriptions: count_oversubscriptions(&nodes, &jobs),
        jobs,
        steps: kernel.stats().steps,
    }
}

/// Scripted outages drive both the monitoring wakeups and the probe.
fn sim_kernel(workload: &WorkloadSpec, mut config: KernelConfig) -> Result<Kernel, BenchError> {
    if config.mode != Mode::Simulation {
        return Err(BenchError::NotSimulation);
    }
    config.mode = Mode::Simulation;
    let store = Arc::new(Store::new());
    for n in &workload.nodes {
        store.add_node(n.clone())?;
    }
    let down = workload
        .outages
        .iter()
        .map(|o| (o.node.clone(), o.from, o.to))
        .collect();
    let mut kernel = Kernel::with_probe(store, config, Arc::new(ScriptedProbe::new(down)));
    for o in &workload.outages {
        kernel.script_node_outage(&o.node, o.from, o.to);
    }
    Ok(kernel)
}

/// Replays `workload` with every regular queue set to `policy` and runs to
/// quiescence.
pub fn bench_run(workload: &WorkloadSpec, policy: Policy, config: &KernelConfig) -> Result<MetricsReport, BenchError> {
    workload.validate()?;
    workload.check_queues(&config.queues)?;
    let mut config = config.clone();
    for q in config.queues.iter_mut().filter(|q| !q.best_effort) {
        q.policy = policy;
    }
    let mut kernel = sim_kernel(workload, config)?;
    for job in &workload.jobs {
        kernel.submit_at(job.submit, job.to_request(BENCH_USER));
    }
    kernel.run_until_quiescent().map_err(BenchError::NotQuiescent)?;
    Ok(collect(&kernel, &policy.to_string(), workload.work()))
}

/// Submits `n` identical jobs of `nodes_per_job` nodes and `duration`
/// seconds at t=0 and runs to quiescence.
pub fn bench_burst(
    n: usize,
    nodes_per_job: u32,
    duration: Time,
    cluster: &[Node],
    config: &KernelConfig,
) -> Result<MetricsReport, BenchError> {
    let workload = WorkloadSpec {
        nodes: cluster.to_vec(),
        jobs: vec![WorkloadJob::new(0, nodes_per_job, 1, duration, duration); n],
        outages: Vec::new(),
    };
    let mut report = bench_run(&workload, Policy::Fifo, config)?;
    report.label = format!("burst of {n}");
    Ok(report)
}

fn or_na(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.decimals$}"))
}

/// Summary table in the shape used to compare scheduler runs.
pub fn report_render(report: &MetricsReport) -> String {
    let mut out = String::new();
    let rows: [(&str, String); 9] = [
        (
            "Run",
            if report.label.is_empty() {
                "-".into()
            } else {
                report.label.clone()
            },
        ),
        ("Jobmix work (CPU-sec)", report.work.to_string()),
        ("Processors", report.processors.to_string()),
        ("Lower bound (sec)", or_na(report.lower_bound(), 1)),
        ("Elapsed time (sec)", report.elapsed.to_string()),
        ("Efficiency", or_na(report.efficiency(), 4)),
        (
            "Jobs",
            format!(
                "{} ({} terminated, {} error)",
                report.jobs.len(),
                report.count(JobState::Terminated),
                report.count(JobState::Error)
            ),
        ),
        ("Mean response time (sec)", or_na(report.mean_response(), 1)),
        ("Oversubscriptions", report.oversubscriptions.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<26}{v}");
    }
    out
}

pub fn plot_data(report: &MetricsReport) -> String {
    let mut out = format!("{PLOT_HEADER}\n");
    for (t, b) in report.utilization() {
        let _ = writeln!(out, "{t}\t{b}");
    }
    out
}

pub fn write_plot(report: &MetricsReport, path: impl AsRef<Path>) -> std::io::Result<()> {
    fs::write(path, plot_data(report))
}

/// Per-job response times, one `id<TAB>seconds` line each.
pub fn response_data(report: &MetricsReport) -> String {
    let mut out = String::from("job\tresponse\n");
    for (id, r) in report.response_times() {
        let _ = writeln!(out, "{id}\t{r}");
    }
    out
}
