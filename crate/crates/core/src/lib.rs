//! A queue-based batch scheduler for clusters.
//!
//! Jobs move through a fixed state machine ([`model`]) and every component
//! communicates only through a shared table store ([`store`]). Submissions
//! pass an ordered list of admission rules ([`admission`]); a central
//! automaton ([`kernel`]) consumes a coalescing notification buffer and runs
//! the planner ([`scheduler`]), which keeps a per-node Gantt timeline with
//! advance reservations, conservative backfilling and best-effort
//! preemption. The [`executor`] drives jobs either on a virtual clock or as
//! local processes, and [`bench`] replays workloads to measure efficiency
//! and response time.

pub mod admission;
pub mod bench;
pub mod commands;
pub mod executor;
pub mod kernel;
pub mod model;
pub mod scheduler;
pub mod store;
pub mod workload;
