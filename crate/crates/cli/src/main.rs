use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use batchsched::admission::SubmissionRequest;
use batchsched::bench::{self, MetricsReport};
use batchsched::commands::{self, CommandOutput, RemoteEngine, StatFilter, EXIT_REJECTED, EXIT_UNREACHABLE};
use batchsched::kernel::daemon::{self, ClientError, Daemon, Request, ENV_SOCKET};
use batchsched::kernel::{Kernel, KernelConfig, Mode};
use batchsched::model::{JobId, JobState, JobType, Node, Policy, Time};
use batchsched::store::Store;
use batchsched::workload::WorkloadSpec;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "batchsched",
    version,
    about = "Batch scheduler engine, client commands and benchmark harness"
)]
struct Cli {
    /// Engine socket.
    #[arg(long, global = true, env = ENV_SOCKET)]
    socket: Option<PathBuf>,
    /// Engine configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Submit a job; prints its id.
    Submit {
        #[arg(short = 'n', long = "nodes")]
        nb_nodes: Option<u32>,
        /// Processors per node.
        #[arg(short = 'w', long)]
        weight: Option<u32>,
        /// Walltime in seconds.
        #[arg(short = 't', long = "walltime")]
        max_time: Option<Time>,
        #[arg(short = 'q', long)]
        queue: Option<String>,
        /// Property expression, e.g. "mem >= 4 AND switch = 'sw1'".
        #[arg(short = 'p', long)]
        properties: Option<String>,
        /// Advance reservation start (seconds since the epoch).
        #[arg(short = 'r', long)]
        reservation: Option<Time>,
        #[arg(short = 'b', long)]
        best_effort: bool,
        #[arg(short = 'I', long)]
        interactive: bool,
        #[arg(long, env = "USER", default_value = "nobody")]
        user: String,
        /// Launching directory; defaults to the current one.
        #[arg(short = 'd', long)]
        directory: Option<PathBuf>,
        #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
        command: Vec<String>,
    },
    /// Request removal of a job.
    Del { id: u64 },
    /// List jobs.
    Stat {
        #[arg(short = 'u', long)]
        user: Option<String>,
        #[arg(short = 's', long)]
        state: Option<JobState>,
        #[arg(short = 'q', long)]
        queue: Option<String>,
    },
    /// Replay a workload file in simulation and print the metrics.
    BenchRun {
        workload: PathBuf,
        #[arg(long, default_value = "fifo")]
        policy: Policy,
        /// Write the utilization series here.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Write per-job response times here.
        #[arg(long)]
        responses: Option<PathBuf>,
    },
    /// Submit many identical jobs at once in simulation.
    BenchBurst {
        #[arg(short = 'n', long, default_value_t = 100)]
        jobs: usize,
        #[arg(long, default_value_t = 1)]
        nodes_per_job: u32,
        /// Run length of each job in seconds.
        #[arg(long, default_value_t = 10)]
        duration: Time,
        /// Simulated cluster size.
        #[arg(long, default_value_t = 17)]
        cluster_nodes: usize,
        #[arg(long, default_value_t = 2)]
        capacity: u32,
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long)]
        responses: Option<PathBuf>,
    },
    /// Stop a running engine.
    Shutdown,
    /// Run the engine, executing jobs as local processes.
    Daemon {
        /// Node as name:capacity; repeatable. Defaults to one node sized to
        /// this machine.
        #[arg(long = "node")]
        nodes: Vec<String>,
        /// Persist the tables to this file and recover from it at start.
        #[arg(long)]
        state_file: Option<PathBuf>,
    },
}

fn default_socket() -> PathBuf {
    std::env::temp_dir().join("batchsched.sock")
}

fn load_config(path: Option<&PathBuf>) -> Result<KernelConfig, String> {
    let mut config = match path {
        Some(p) => KernelConfig::load(p).map_err(|e| e.to_string())?,
        None => KernelConfig::default(),
    };
    config.apply_env(|k| std::env::var(k).ok()).map_err(|e| e.to_string())?;
    Ok(config)
}

fn parse_node(spec: &str) -> Result<Node, String> {
    let (name, cap) = spec
        .split_once(':')
        .ok_or_else(|| format!("node '{spec}' must be name:capacity"))?;
    let cap = cap.parse().map_err(|_| format!("bad capacity in '{spec}'"))?;
    Ok(Node::new(name, cap))
}

fn emit(out: CommandOutput) -> ExitCode {
    print!("{}", out.stdout);
    eprint!("{}", out.stderr);
    let _ = std::io::stdout().flush();
    ExitCode::from(out.code as u8)
}

fn fail(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("batchsched: {message}");
    ExitCode::from(EXIT_REJECTED as u8)
}

fn finish_bench(report: &MetricsReport, plot: Option<PathBuf>, responses: Option<PathBuf>) -> ExitCode {
    print!("{}", bench::report_render(report));
    if let Some(p) = plot {
        if let Err(e) = bench::write_plot(report, &p) {
            return fail(format!("{}: {e}", p.display()));
        }
    }
    if let Some(p) = responses {
        if let Err(e) = std::fs::write(&p, bench::response_data(report)) {
            return fail(format!("{}: {e}", p.display()));
        }
    }
    ExitCode::SUCCESS
}

fn run(cli: Cli) -> ExitCode {
    let socket = cli.socket.unwrap_or_else(default_socket);
    let config = match load_config(cli.config.as_ref()) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match cli.command {
        Verb::Submit {
            nb_nodes,
            weight,
            max_time,
            queue,
            properties,
            reservation,
            best_effort,
            interactive,
            user,
            directory,
            command,
        } => {
            let directory = directory.or_else(|| std::env::current_dir().ok());
            let request = SubmissionRequest {
                job_type: interactive.then_some(JobType::Interactive),
                queue,
                nb_nodes,
                weight,
                max_time,
                properties,
                launching_directory: directory.map(|d| d.display().to_string()),
                reservation_start: reservation,
                best_effort,
                ..SubmissionRequest::new(user, command.join(" "))
            };
            emit(commands::cmd_submit(&mut RemoteEngine::new(socket), request))
        }
        Verb::Del { id } => emit(commands::cmd_del(&mut RemoteEngine::new(socket), JobId(id))),
        Verb::Stat { user, state, queue } => {
            let filter = StatFilter { user, state, queue };
            emit(commands::cmd_stat(&mut RemoteEngine::new(socket), &filter))
        }
        Verb::Shutdown => match daemon::call(&socket, &Request::Shutdown) {
            Ok(_) => ExitCode::SUCCESS,
            Err(e @ ClientError::Unreachable { .. }) => {
                eprintln!("batchsched: {e}");
                ExitCode::from(EXIT_UNREACHABLE as u8)
            }
            Err(e) => fail(e),
        },
        Verb::BenchRun {
            workload,
            policy,
            plot,
            responses,
        } => {
            let spec = match WorkloadSpec::load(&workload) {
                Ok(w) => w,
                Err(e) => return fail(format!("{}: {e}", workload.display())),
            };
            match bench::bench_run(&spec, policy, &config) {
                Ok(r) => finish_bench(&r, plot, responses),
                Err(e) => fail(e),
            }
        }
        Verb::BenchBurst {
            jobs,
            nodes_per_job,
            duration,
            cluster_nodes,
            capacity,
            plot,
            responses,
        } => {
            let cluster: Vec<Node> = (0..cluster_nodes)
                .map(|i| Node::new(format!("node{i:02}"), capacity))
                .collect();
            match bench::bench_burst(jobs, nodes_per_job, duration, &cluster, &config) {
                Ok(r) => finish_bench(&r, plot, responses),
                Err(e) => fail(e),
            }
        }
        Verb::Daemon { nodes, state_file } => {
            let store = match &state_file {
                Some(p) => match Store::open(p) {
                    Ok(s) => s,
                    Err(e) => return fail(format!("{}: {e}", p.display())),
                },
                None => Store::with_system_time(),
            };
            let nodes = if nodes.is_empty() {
                let cpus = std::thread::available_parallelism().map_or(1, |n| n.get() as u32);
                vec![Node::new("localhost", cpus)]
            } else {
                match nodes.iter().map(|s| parse_node(s)).collect::<Result<Vec<_>, _>>() {
                    Ok(n) => n,
                    Err(e) => return fail(e),
                }
            };
            let known: Vec<String> = store.nodes().into_iter().map(|n| n.name).collect();
            for n in nodes.into_iter().filter(|n| !known.contains(&n.name)) {
                if let Err(e) = store.add_node(n) {
                    return fail(e);
                }
            }
            let config = KernelConfig {
                mode: Mode::Real,
                ..config
            };
            let daemon = match Daemon::start(Kernel::new(Arc::new(store), config), &socket) {
                Ok(d) => d,
                Err(e) => return fail(format!("{}: {e}", socket.display())),
            };
            log::info!("listening on {}", socket.display());
            daemon.join();
            ExitCode::SUCCESS
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run(Cli::parse())
}
