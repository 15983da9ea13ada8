//! Experiment plans: TOML files describing a workload, a topology, knob
//! settings, a sweep, a fault schedule and the thresholds to assert.
//!
//! ```toml
//! name = "fault-timeline"
//! experiment = "fault"
//! seed = 7
//!
//! [workload]
//! function = "sleep_ms(100)"
//! count = 670
//! arrival = "uniform"
//! rate_per_s = 56.0
//!
//! [topology]
//! nodes = 2
//! workers_per_node = 4
//!
//! [[faults]]
//! at_ms = 2000
//! action = "kill-manager"
//! manager = 0
//!
//! [[faults]]
//! at_ms = 4000
//! action = "restart"
//! ```

use std::path::Path;

use fabric_core::Runtime;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ProviderKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// One run of the workload.
    Run,
    /// Worker-count sweep, strong or weak.
    Scaling,
    /// The workload under a fault schedule, with a latency timeline.
    Fault,
    /// Sequential echo round trips, warm then cold.
    Latency,
    /// A sweep over one optimization knob.
    Optimization,
    /// Periodic waves of several task classes against an elastic pool.
    Elasticity,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    /// Everything at t=0.
    #[default]
    Burst,
    /// One task every `1 / rate_per_s` seconds.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    /// Function body, e.g. `noop` or `sleep_ms(1000)` for the bench runtime.
    pub function: String,
    #[serde(default)]
    pub runtime: Runtime,
    /// Tasks to submit (inputs, when batching).
    pub count: u32,
    #[serde(default)]
    pub arrival: Arrival,
    #[serde(default)]
    pub rate_per_s: Option<f64>,
    #[serde(default)]
    pub tag: String,
    #[serde(default = "yes")]
    pub retriable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default = "one")]
    pub endpoints: u32,
    /// Managers; started by the harness for the external provider.
    #[serde(default = "one")]
    pub nodes: u32,
    #[serde(default = "eight")]
    pub workers_per_node: u32,
    #[serde(default = "external")]
    pub provider: ProviderKind,
    #[serde(default)]
    pub max_blocks: Option<u32>,
    #[serde(default)]
    pub queue_delay_ms: u64,
    #[serde(default)]
    pub queue_jitter_ms: u64,
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_ms: u64,
    #[serde(default = "three")]
    pub miss_threshold: u32,
}

fn one() -> u32 {
    1
}

fn three() -> u32 {
    3
}

fn eight() -> u32 {
    8
}

fn external() -> ProviderKind {
    ProviderKind::External
}

fn default_heartbeat_ms() -> u64 {
    500
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            endpoints: 1,
            nodes: 1,
            workers_per_node: 8,
            provider: ProviderKind::External,
            max_blocks: None,
            queue_delay_ms: 0,
            queue_jitter_ms: 0,
            heartbeat_ms: default_heartbeat_ms(),
            miss_threshold: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Knobs {
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub batch_count: Option<usize>,
    #[serde(default)]
    pub prefetch_count: Option<u32>,
    /// Fraction of tasks whose input repeats an earlier one.
    #[serde(default)]
    pub memo_repeat_fraction: f64,
    #[serde(default)]
    pub memoize: bool,
    #[serde(default = "default_warm_ttl_ms")]
    pub warm_ttl_ms: u64,
    #[serde(default = "yes")]
    pub executor_batching: bool,
    #[serde(default = "default_advert_interval_ms")]
    pub advert_interval_ms: u64,
    #[serde(default)]
    pub max_workers_per_tag: Option<u32>,
    #[serde(default = "default_idle_timeout_ms")]
    pub idle_timeout_ms: u64,
    #[serde(default = "default_scaler_interval_ms")]
    pub scaler_interval_ms: u64,
}

fn default_warm_ttl_ms() -> u64 {
    600_000
}

fn default_advert_interval_ms() -> u64 {
    10
}

fn default_idle_timeout_ms() -> u64 {
    30_000
}

fn default_scaler_interval_ms() -> u64 {
    1000
}

impl Default for Knobs {
    fn default() -> Self {
        Knobs {
            batch_size: None,
            batch_count: None,
            prefetch_count: None,
            memo_repeat_fraction: 0.0,
            memoize: false,
            warm_ttl_ms: default_warm_ttl_ms(),
            executor_batching: true,
            advert_interval_ms: default_advert_interval_ms(),
            max_workers_per_tag: None,
            idle_timeout_ms: default_idle_timeout_ms(),
            scaler_interval_ms: default_scaler_interval_ms(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    #[default]
    Strong,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    Memo,
    Prefetch,
    BatchSize,
    ExecutorBatching,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub mode: ScalingMode,
    /// Total worker counts for a scaling sweep.
    #[serde(default)]
    pub workers: Vec<u32>,
    #[serde(default = "ten")]
    pub tasks_per_worker: u32,
    #[serde(default)]
    pub knob: Option<Knob>,
    #[serde(default)]
    pub memo_fractions: Vec<f64>,
    #[serde(default)]
    pub prefetch: Vec<u32>,
    #[serde(default)]
    pub batch_sizes: Vec<usize>,
    #[serde(default)]
    pub executor_batching: Vec<bool>,
    /// Each batch-size point submits exactly one batch of that size instead
    /// of `workload.count` inputs.
    #[serde(default)]
    pub single_batch: bool,
    /// Fresh deployments per sweep point; the point's value is the fastest.
    #[serde(default = "one")]
    pub trials: u32,
    /// Sequential round trips for the latency experiment.
    #[serde(default = "ten")]
    pub repetitions: u32,
}

fn ten() -> u32 {
    10
}

impl Default for Sweep {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultAction {
    KillManager,
    KillAgent,
    /// Restarts the most recently killed process that is still down.
    Restart,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    /// Offset from the first submission.
    pub at_ms: u64,
    pub action: FaultAction,
    /// Manager index for `kill-manager`.
    #[serde(default)]
    pub manager: u32,
}

/// One task class of an elasticity experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskClass {
    pub tag: String,
    pub function: String,
    pub per_wave: u32,
    /// Worker count the class must reach in every wave.
    pub expect_workers: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waves {
    #[serde(default)]
    pub count: u32,
    #[serde(default)]
    pub interval_ms: u64,
    #[serde(default)]
    pub classes: Vec<TaskClass>,
}

/// Thresholds asserted after the run. Unset fields fall back to defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    /// Adjacent sweep points may rise by this fraction and still count as
    /// non-increasing.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Upper bound on an optimized/baseline completion ratio.
    #[serde(default)]
    pub max_ratio: Option<f64>,
    /// Two sweep points count as flat within this fraction.
    #[serde(default = "default_flat")]
    pub flat_within: f64,
    /// Upper bound on max/min completion in a weak-scaling sweep.
    #[serde(default = "default_weak_spread")]
    pub weak_spread: f64,
    #[serde(default = "default_outage_factor")]
    pub outage_factor: f64,
    #[serde(default = "default_recovery_factor")]
    pub recovery_factor: f64,
    #[serde(default = "default_recovery_within_ms")]
    pub recovery_within_ms: u64,
    /// Upper bound on t_w as a fraction of the round trip.
    #[serde(default = "default_tw_fraction")]
    pub tw_fraction: f64,
    /// Sweep points up to which a trend must hold.
    #[serde(default)]
    pub trend_until: Option<f64>,
    /// Sweep points from which results must be flat within `flat_within`.
    #[serde(default)]
    pub flat_from: Option<f64>,
    /// Check the latency timeline around the first kill/restart pair.
    #[serde(default)]
    pub timeline: bool,
    #[serde(default)]
    pub max_runtime_s: Option<u64>,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_noise() -> f64 {
    0.10
}

fn default_flat() -> f64 {
    0.20
}

fn default_weak_spread() -> f64 {
    1.25
}

fn default_outage_factor() -> f64 {
    2.0
}

fn default_recovery_factor() -> f64 {
    1.5
}

fn default_recovery_within_ms() -> u64 {
    5000
}

fn default_tw_fraction() -> f64 {
    0.10
}

fn default_timeout_s() -> u64 {
    300
}

impl Default for Expect {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: Option<u64>,
    pub workload: Workload,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub knobs: Knobs,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub waves: Waves,
    #[serde(default)]
    pub expect: Expect,
}

/// Desk-scale ceilings.
pub const MAX_ENDPOINTS: u32 = 2;
pub const MAX_NODES: u32 = 4;
pub const MAX_WORKERS: u32 = 32;
pub const MAX_TASKS: u32 = 10_000;

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<ExperimentPlan, ConfigError> {
        let plan: ExperimentPlan = crate::config::load(path)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.workload.count == 0 {
            return bad("workload.count must be positive".into());
        }
        if self.workload.count > MAX_TASKS {
            return bad(format!("workload.count exceeds {MAX_TASKS}"));
        }
        let t = &self.topology;
        if t.endpoints == 0 || t.endpoints > MAX_ENDPOINTS {
            return bad(format!("topology.endpoints must be in 1..={MAX_ENDPOINTS}"));
        }
        if t.nodes == 0 || t.nodes > MAX_NODES {
            return bad(format!("topology.nodes must be in 1..={MAX_NODES}"));
        }
        if t.workers_per_node == 0 || t.nodes * t.workers_per_node > MAX_WORKERS {
            return bad(format!("topology must have 1..={MAX_WORKERS} workers"));
        }
        if self.workload.arrival == Arrival::Uniform && !self.workload.rate_per_s.is_some_and(|r| r > 0.0) {
            return bad("uniform arrival needs a positive rate_per_s".into());
        }
        if !(0.0..=1.0).contains(&self.knobs.memo_repeat_fraction) {
            return bad("memo_repeat_fraction must be in [0, 1]".into());
        }
        if self.sweep.workers.iter().any(|&w| w == 0 || w > MAX_WORKERS) {
            return bad(format!("sweep.workers must be in 1..={MAX_WORKERS}"));
        }
        if self.sweep.memo_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("sweep.memo_fractions must be in [0, 1]".into());
        }
        if self.sweep.trials == 0 {
            return bad("sweep.trials must be positive".into());
        }
        if self.sweep.batch_sizes.contains(&0) {
            return bad("sweep.batch_sizes must be positive".into());
        }
        if self.faults.windows(2).any(|w| w[0].at_ms >= w[1].at_ms) {
            return bad("fault times must be strictly increasing".into());
        }
        match self.experiment {
            Experiment::Scaling if self.sweep.workers.is_empty() => bad("scaling needs sweep.workers".into()),
            Experiment::Fault if self.faults.is_empty() => bad("fault needs a fault schedule".into()),
            Experiment::Optimization if self.sweep.knob.is_none() => bad("optimization needs sweep.knob".into()),
            Experiment::Elasticity if self.waves.classes.is_empty() || self.waves.count == 0 => {
                bad("elasticity needs waves with classes".into())
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        "name = \"x\"\nexperiment = \"run\"\n[workload]\nfunction = \"noop\"\ncount = 10\n"
    }

    #[test]
    fn minimal_plan_gets_defaults() {
        let p: ExperimentPlan = toml::from_str(minimal()).unwrap();
        p.validate().unwrap();
        assert_eq!(p.topology, Topology::default());
        assert_eq!(p.expect.noise, 0.10);
        assert_eq!(p.workload.arrival, Arrival::Burst);
        assert!(p.workload.retriable);
        assert_eq!(p.sweep.trials, 1);
        assert_eq!(p.sweep.tasks_per_worker, 10);
    }

    #[test]
    fn fault_times_must_increase() {
        let text = format!(
            "{}[[faults]]\nat_ms = 2000\naction = \"kill-manager\"\n[[faults]]\nat_ms = 2000\naction = \"restart\"\n",
            minimal()
        );
        let p: ExperimentPlan = toml::from_str(&text).unwrap();
        assert!(p.validate().is_err());
    }

    #[test]
    fn counts_must_be_positive_and_desk_scale() {
        let mut p: ExperimentPlan = toml::from_str(minimal()).unwrap();
        p.workload.count = 0;
        assert!(p.validate().is_err());
        p.workload.count = MAX_TASKS + 1;
        assert!(p.validate().is_err());
        p.workload.count = 5;
        p.topology.nodes = 5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{}bogus = 1\n", minimal());
        assert!(toml::from_str::<ExperimentPlan>(&text).is_err());
    }
}
