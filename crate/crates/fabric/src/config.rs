//! TOML configuration files for the coordinator, agent and manager.
//!
//! Every key has a default except the ones that identify a deployment
//! (`endpoint_id`, `token`). Durations are whole milliseconds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use fabric_core::heartbeat::HeartbeatConfig;
use fabric_core::scaling::{ScalingPolicy, TagLimits};
use fabric_core::EndpointId;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save<T: Serialize>(path: &Path, value: &T) -> Result<(), ConfigError> {
    let text = toml::to_string(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn localhost() -> String {
    "127.0.0.1".into()
}

fn default_payload_cap() -> usize {
    fabric_core::PAYLOAD_CAP
}

fn default_purge_grace_ms() -> u64 {
    10 * 60 * 1000
}

/// Coordinator settings.
///
/// ```toml
/// listen = "127.0.0.1:8080"
/// data_dir = "/var/lib/fabric"      # omit for an in-memory store
/// forwarder_host = "127.0.0.1"
/// payload_cap = 1048576
/// purge_grace_ms = 600000
/// fsync = false
///
/// [heartbeat]
/// interval_ms = 1000
/// miss_threshold = 3
///
/// [tokens]
/// "secret-token" = "alice"
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatorConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Address forwarders bind to and advertise.
    #[serde(default = "localhost")]
    pub forwarder_host: String,
    #[serde(default = "default_payload_cap")]
    pub payload_cap: usize,
    #[serde(default = "default_purge_grace_ms")]
    pub purge_grace_ms: u64,
    #[serde(default)]
    pub fsync: bool,
    #[serde(default)]
    pub heartbeat: HeartbeatConfig,
    /// Bearer token to principal.
    #[serde(default)]
    pub tokens: BTreeMap<String, String>,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            listen: default_listen(),
            data_dir: None,
            forwarder_host: localhost(),
            payload_cap: default_payload_cap(),
            purge_grace_ms: default_purge_grace_ms(),
            fsync: false,
            heartbeat: HeartbeatConfig::default(),
            tokens: BTreeMap::new(),
        }
    }
}

impl CoordinatorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.heartbeat.validate().map_err(|e| ConfigError::Invalid(e.into()))?;
        if self.payload_cap == 0 || self.payload_cap > crate::net::LINK_FRAME_CAP / 2 {
            return Err(ConfigError::Invalid(format!(
                "payload_cap must be in 1..={}",
                crate::net::LINK_FRAME_CAP / 2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    /// Managers run as local child processes started immediately.
    #[default]
    Local,
    /// Like `local`, after a simulated batch-queue wait.
    SimulatedBatch,
    /// No provisioning; managers are started by someone else.
    External,
}

/// Batch queue wait for the simulated provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct QueueDelay {
    #[serde(default)]
    pub fixed_ms: u64,
    /// Extra uniformly distributed wait in `[0, jitter_ms]`.
    #[serde(default)]
    pub jitter_ms: u64,
}

fn one() -> u32 {
    1
}

fn eight() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default = "one")]
    pub nodes_per_block: u32,
    #[serde(default = "eight")]
    pub workers_per_node: u32,
    #[serde(default = "one")]
    pub init_blocks: u32,
    #[serde(default)]
    pub min_blocks: u32,
    #[serde(default = "one")]
    pub max_blocks: u32,
    #[serde(default)]
    pub queue_delay: QueueDelay,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Local,
            nodes_per_block: 1,
            workers_per_node: 8,
            init_blocks: 1,
            min_blocks: 0,
            max_blocks: 1,
            queue_delay: QueueDelay::default(),
        }
    }
}

fn default_idle_timeout_ms() -> u64 {
    30_000
}

fn default_scaler_interval_ms() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    #[serde(default = "default_idle_timeout_ms")]
    pub idle_timeout_ms: u64,
    #[serde(default = "default_scaler_interval_ms")]
    pub interval_ms: u64,
    #[serde(default)]
    pub tags: BTreeMap<String, TagLimits>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            idle_timeout_ms: default_idle_timeout_ms(),
            interval_ms: default_scaler_interval_ms(),
            tags: BTreeMap::new(),
        }
    }
}

/// Launch environment for workers of one container tag.
///
/// `command` is a template; `{worker}` expands to the worker binary and
/// `{tag}` to the tag. Only variables in `env` plus those named in
/// `env_allow` reach the worker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SandboxSpec {
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub env_allow: Vec<String>,
    /// Working directory; defaults to `<sandbox_root>/<tag>`.
    #[serde(default)]
    pub cwd: Option<PathBuf>,
    #[serde(default)]
    pub cpu_seconds: Option<u64>,
    #[serde(default)]
    pub memory_bytes: Option<u64>,
    #[serde(default)]
    pub command: Vec<String>,
}

fn default_advert_interval_ms() -> u64 {
    10
}

fn default_warm_ttl_ms() -> u64 {
    300_000
}

fn yes() -> bool {
    true
}

fn default_agent_listen() -> String {
    "127.0.0.1:0".into()
}

fn default_coordinator() -> String {
    "http://127.0.0.1:8080".into()
}

/// Endpoint agent settings.
///
/// ```toml
/// endpoint_id = "0123456789abcdef0123456789abcdef"
/// coordinator = "http://127.0.0.1:8080"
/// token = "secret-token"
/// listen = "127.0.0.1:0"        # manager-facing address
/// prefetch_count = 8            # defaults to workers_per_node
/// advert_interval_ms = 10
/// executor_batching = true
/// warm_ttl_ms = 300000
/// seed = 7
/// tags = ["default"]
///
/// [provider]
/// kind = "local"                # local | simulated-batch | external
/// nodes_per_block = 1
/// workers_per_node = 8
/// init_blocks = 1
/// min_blocks = 0
/// max_blocks = 1
/// queue_delay = { fixed_ms = 0, jitter_ms = 0 }
///
/// [scaling]
/// idle_timeout_ms = 30000
/// interval_ms = 1000
/// tags.default = { min_workers = 0, max_workers = 10 }
///
/// [sandbox.default]
/// cpu_seconds = 600
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub endpoint_id: EndpointId,
    #[serde(default = "default_coordinator")]
    pub coordinator: String,
    pub token: String,
    #[serde(default = "default_agent_listen")]
    pub listen: String,
    #[serde(default)]
    pub prefetch_count: Option<u32>,
    #[serde(default = "default_advert_interval_ms")]
    pub advert_interval_ms: u64,
    /// Off: managers take one task per advertisement cycle.
    #[serde(default = "yes")]
    pub executor_batching: bool,
    #[serde(default = "default_warm_ttl_ms")]
    pub warm_ttl_ms: u64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub heartbeat: HeartbeatConfig,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub scaling: ScalingConfig,
    #[serde(default)]
    pub sandbox: BTreeMap<String, SandboxSpec>,
    /// Where pid files, manager configs and sandboxes go.
    #[serde(default)]
    pub state_dir: Option<PathBuf>,
    #[serde(default)]
    pub manager_bin: Option<PathBuf>,
    #[serde(default)]
    pub worker_bin: Option<PathBuf>,
}

impl AgentConfig {
    pub fn new(endpoint_id: EndpointId, coordinator: impl Into<String>, token: impl Into<String>) -> Self {
        AgentConfig {
            endpoint_id,
            coordinator: coordinator.into(),
            token: token.into(),
            listen: default_agent_listen(),
            prefetch_count: None,
            advert_interval_ms: default_advert_interval_ms(),
            executor_batching: true,
            warm_ttl_ms: default_warm_ttl_ms(),
            seed: None,
            tags: Vec::new(),
            heartbeat: HeartbeatConfig::default(),
            provider: ProviderConfig::default(),
            scaling: ScalingConfig::default(),
            sandbox: BTreeMap::new(),
            state_dir: None,
            manager_bin: None,
            worker_bin: None,
        }
    }

    pub fn prefetch(&self) -> u32 {
        self.prefetch_count.unwrap_or(self.provider.workers_per_node)
    }

    pub fn scaling_policy(&self) -> ScalingPolicy {
        let external = self.provider.kind == ProviderKind::External;
        ScalingPolicy {
            tags: self.scaling.tags.clone(),
            idle_timeout: Duration::from_millis(self.scaling.idle_timeout_ms),
            min_blocks: if external { 0 } else { self.provider.min_blocks },
            max_blocks: if external { 0 } else { self.provider.max_blocks },
            nodes_per_block: self.provider.nodes_per_block,
            workers_per_node: self.provider.workers_per_node,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.heartbeat.validate().map_err(|e| ConfigError::Invalid(e.into()))?;
        let p = &self.provider;
        if p.nodes_per_block == 0 || p.workers_per_node == 0 {
            return Err(ConfigError::Invalid("nodes_per_block and workers_per_node must be positive".into()));
        }
        if p.min_blocks > p.max_blocks {
            return Err(ConfigError::Invalid("min_blocks exceeds max_blocks".into()));
        }
        if self.advert_interval_ms == 0 {
            return Err(ConfigError::Invalid("advert_interval_ms must be positive".into()));
        }
        for (tag, lim) in &self.scaling.tags {
            if lim.min_workers > lim.max_workers {
                return Err(ConfigError::Invalid(format!("min_workers exceeds max_workers for tag {tag}")));
            }
        }
        Ok(())
    }
}

fn default_backoff_base_ms() -> u64 {
    100
}

fn default_backoff_cap_ms() -> u64 {
    2000
}

/// Manager settings, written by the agent for the managers it launches.
///
/// ```toml
/// worker_bin = "/usr/local/bin/worker"
/// sandbox_root = "/tmp/fabric-sandbox"
/// backoff_base_ms = 100
/// backoff_cap_ms = 2000
///
/// [sandbox.default]
/// env = { LANG = "C" }
/// cpu_seconds = 600
/// memory_bytes = 2147483648
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManagerConfig {
    #[serde(default)]
    pub worker_bin: Option<PathBuf>,
    #[serde(default)]
    pub sandbox_root: Option<PathBuf>,
    /// Tag to spec. Empty means any tag runs with default settings; `"*"`
    /// matches tags without their own entry.
    #[serde(default)]
    pub sandbox: BTreeMap<String, SandboxSpec>,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap_ms")]
    pub backoff_cap_ms: u64,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            worker_bin: None,
            sandbox_root: None,
            sandbox: BTreeMap::new(),
            backoff_base_ms: default_backoff_base_ms(),
            backoff_cap_ms: default_backoff_cap_ms(),
        }
    }
}

impl ManagerConfig {
    /// The spec for `tag`, or `None` when the tag is not allowed.
    pub fn spec_for(&self, tag: &str) -> Option<SandboxSpec> {
        if self.sandbox.is_empty() {
            return Some(SandboxSpec::default());
        }
        self.sandbox.get(tag).or_else(|| self.sandbox.get("*")).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinator_defaults() {
        let c: CoordinatorConfig = toml::from_str("").unwrap();
        assert_eq!(c, CoordinatorConfig::default());
        assert_eq!(c.heartbeat.interval, Duration::from_secs(1));
        assert_eq!(c.heartbeat.miss_threshold, 3);
        assert_eq!(c.purge_grace_ms, 600_000);
        c.validate().unwrap();
    }

    #[test]
    fn coordinator_tokens_and_heartbeat() {
        let c: CoordinatorConfig = toml::from_str(
            r#"
            listen = "0.0.0.0:9000"
            [heartbeat]
            interval_ms = 250
            [tokens]
            "t1" = "alice"
            "#,
        )
        .unwrap();
        assert_eq!(c.tokens["t1"], "alice");
        assert_eq!(c.heartbeat.interval, Duration::from_millis(250));
        assert_eq!(c.heartbeat.miss_threshold, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<CoordinatorConfig>("bogus = 1").is_err());
    }

    #[test]
    fn agent_round_trip_and_policy() {
        let text = r#"
            endpoint_id = "000000000000000000000000000000ff"
            token = "t"
            tags = ["a"]
            [provider]
            kind = "simulated-batch"
            workers_per_node = 4
            max_blocks = 3
            queue_delay = { fixed_ms = 10000 }
            [scaling]
            idle_timeout_ms = 3000
            tags.a = { max_workers = 10 }
        "#;
        let a: AgentConfig = toml::from_str(text).unwrap();
        a.validate().unwrap();
        assert_eq!(a.endpoint_id, EndpointId::from_u128(255));
        assert_eq!(a.provider.kind, ProviderKind::SimulatedBatch);
        assert_eq!(a.prefetch(), 4);
        let p = a.scaling_policy();
        assert_eq!(p.limits("a").max_workers, 10);
        assert_eq!(p.limits("a").min_workers, 0);
        assert_eq!(p.max_blocks, 3);
        assert_eq!(p.idle_timeout, Duration::from_secs(3));
        let back: AgentConfig = toml::from_str(&toml::to_string(&a).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn sandbox_lookup() {
        let mut m = ManagerConfig::default();
        assert!(m.spec_for("anything").is_some());
        m.sandbox.insert("a".into(), SandboxSpec::default());
        assert!(m.spec_for("a").is_some());
        assert!(m.spec_for("b").is_none());
        m.sandbox.insert("*".into(), SandboxSpec::default());
        assert!(m.spec_for("b").is_some());
    }
}
