//! Engine configuration: a TOML file plus environment overrides.
//!
//! ```toml
//! scheduling_period = 60
//! monitoring_period = 300
//! health_check = true
//! probe_timeout = 5
//! mode = "simulation"          # or "real"
//! victim_policy = "youngest_first"
//! auto_ack = true
//! ack_timeout = 60
//!
//! [[queue]]
//! name = "default"
//! priority = 0
//! policy = "FIFO"
//!
//! [[admission_rule]]
//! name = "default-queue"
//! when = { missing = "queue" }
//! action = { set_default = { field = "queue", value = "default" } }
//! ```
//!
//! Without `[[queue]]` tables the default and best-effort queues are used;
//! without `[[admission_rule]]` tables the shipped rule list is used.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::admission::{default_queues, default_rules, AdmissionRule};
use crate::model::{Queue, Time};
use crate::scheduler::VictimPolicy;

pub const ENV_SCHEDULING_PERIOD: &str = "BATCHSCHED_SCHEDULING_PERIOD";
pub const ENV_MONITORING_PERIOD: &str = "BATCHSCHED_MONITORING_PERIOD";
pub const ENV_MODE: &str = "BATCHSCHED_MODE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Simulation,
    Real,
}

impl std::str::FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "simulation" | "sim" => Ok(Mode::Simulation),
            "real" => Ok(Mode::Real),
            _ => Err(ConfigError::Invalid(format!("unknown mode '{s}'"))),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Seconds between forced scheduling, cancellation and state-change runs.
    pub scheduling_period: Time,
    /// Seconds between node probes.
    pub monitoring_period: Time,
    /// Probe assigned nodes before each launch.
    pub health_check: bool,
    /// Seconds a node may take to answer a probe.
    pub probe_timeout: Time,
    pub mode: Mode,
    pub victim_policy: VictimPolicy,
    /// Acknowledge reservations on the client's behalf.
    pub auto_ack: bool,
    /// Seconds an unacknowledged reservation waits before it is dropped.
    pub ack_timeout: Time,
    /// Simulation only: task runs before giving up on quiescence.
    pub step_budget: u64,
    #[serde(rename = "queue")]
    pub queues: Vec<Queue>,
    #[serde(rename = "admission_rule")]
    pub admission_rules: Vec<AdmissionRule>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            scheduling_period: 60,
            monitoring_period: 300,
            health_check: false,
            probe_timeout: 5,
            mode: Mode::Simulation,
            victim_policy: VictimPolicy::YoungestFirst,
            auto_ack: true,
            ack_timeout: 60,
            step_budget: 1_000_000,
            queues: default_queues(),
            admission_rules: default_rules(),
        }
    }
}

impl KernelConfig {
    pub fn from_toml(text: &str) -> Result<KernelConfig, ConfigError> {
        let config: KernelConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<KernelConfig, ConfigError> {
        KernelConfig::from_toml(&fs::read_to_string(path)?)
    }

    /// Applies overrides from `lookup` (normally `std::env::var`).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let period = |name: &str, v: String| {
            v.trim()
                .parse::<Time>()
                .map_err(|_| ConfigError::Invalid(format!("{name} must be an integer, got '{v}'")))
        };
        if let Some(v) = lookup(ENV_SCHEDULING_PERIOD) {
            self.scheduling_period = period(ENV_SCHEDULING_PERIOD, v)?;
        }
        if let Some(v) = lookup(ENV_MONITORING_PERIOD) {
            self.monitoring_period = period(ENV_MONITORING_PERIOD, v)?;
        }
        if let Some(v) = lookup(ENV_MODE) {
            self.mode = v.parse()?;
        }
        self.validate()
    }

    pub fn from_env_only() -> Result<KernelConfig, ConfigError> {
        let mut c = KernelConfig::default();
        c.apply_env(|k| std::env::var(k).ok())?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scheduling_period < 1 || self.monitoring_period < 1 {
            return Err(ConfigError::Invalid("periods must be at least 1 second".into()));
        }
        if self.probe_timeout < 1 || self.ack_timeout < 1 {
            return Err(ConfigError::Invalid("timeouts must be at least 1 second".into()));
        }
        let mut names = BTreeSet::new();
        for q in &self.queues {
            if !names.insert(q.name.as_str()) {
                return Err(ConfigError::Invalid(format!("queue '{}' declared twice", q.name)));
            }
        }
        if self.queues.is_empty() {
            return Err(ConfigError::Invalid("at least one queue is required".into()));
        }
        Ok(())
    }

    pub fn queue(&self, name: &str) -> Option<&Queue> {
        self.queues.iter().find(|q| q.name == name)
    }

    pub fn queue_mut(&mut self, name: &str) -> Option<&mut Queue> {
        self.queues.iter_mut().find(|q| q.name == name)
    }
}
