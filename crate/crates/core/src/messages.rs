//! Structured frame payloads. All of these travel as codec 1 (JSON text).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::capacity::CapacityAdvertisement;
use crate::codec::{Codec, CodecError, Envelope};
use crate::function::Runtime;
use crate::ids::{EndpointId, FunctionId, ManagerId, TaskId};
use crate::lifecycle::{LifecycleEvent, TaskError};

/// Encodes a message struct as a text-codec envelope.
pub fn to_envelope<T: Serialize>(msg: &T) -> Envelope {
    let payload = serde_json::to_vec(msg).unwrap_or_default();
    Envelope::new(Codec::Text, payload)
}

pub fn from_envelope<T: DeserializeOwned>(env: &Envelope) -> Result<T, CodecError> {
    if env.codec_id != Codec::Text.id() {
        return Err(CodecError::CorruptPayload {
            codec: Codec::from_id(env.codec_id).ok_or(CodecError::UnknownCodec(env.codec_id))?,
            reason: String::from("control messages use the text codec"),
        });
    }
    serde_json::from_slice(&env.payload).map_err(|e| CodecError::CorruptPayload {
        codec: Codec::Text,
        reason: alloc::format!("{e}"),
    })
}

/// Agent to forwarder, first frame on a link.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterAgent {
    pub endpoint_id: EndpointId,
    pub token: String,
}

/// Forwarder to agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRegisterAck {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub heartbeat_ms: u64,
    #[serde(default)]
    pub miss_threshold: u32,
}

/// Agent to forwarder: how many tasks the agent wants outstanding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentAdvert {
    pub window: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagWorkers {
    pub idle: u32,
    pub workers: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ManagerStatus {
    Active,
    Suspended,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerSummary {
    pub manager_id: ManagerId,
    pub node_id: String,
    pub status: ManagerStatus,
    pub slots: u32,
    pub outstanding: u32,
    pub tags: BTreeMap<String, TagWorkers>,
}

/// Agent to forwarder inside HEARTBEAT frames.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStatus {
    pub queued: u32,
    pub managers: Vec<ManagerSummary>,
    #[serde(default)]
    pub counters: BTreeMap<String, u64>,
}

impl AgentStatus {
    pub fn workers_by_tag(&self) -> BTreeMap<String, TagWorkers> {
        let mut out: BTreeMap<String, TagWorkers> = BTreeMap::new();
        for m in self.managers.iter().filter(|m| m.status != ManagerStatus::Lost) {
            for (tag, w) in &m.tags {
                let e = out.entry(tag.clone()).or_default();
                e.idle += w.idle;
                e.workers += w.workers;
            }
        }
        out
    }
}

fn yes() -> bool {
    true
}

/// One task inside a TASK_DISPATCH frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchTask {
    pub task_id: TaskId,
    pub function_id: FunctionId,
    pub function_version: u32,
    pub runtime: Runtime,
    pub container_tag: String,
    /// Present the first time a function version is sent on a session.
    #[serde(default, with = "crate::function::b64::option", skip_serializing_if = "Option::is_none")]
    pub body: Option<Vec<u8>>,
    pub input: Envelope,
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub batch: bool,
    #[serde(default)]
    pub attempt: u32,
    #[serde(default = "yes")]
    pub retriable: bool,
    /// Asks the manager to start a new worker for this task.
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub cold: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispatch {
    pub tasks: Vec<DispatchTask>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutcome {
    Ok(Envelope),
    Err(TaskError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: TaskId,
    #[serde(default)]
    pub attempt: u32,
    pub outcome: TaskOutcome,
    #[serde(with = "crate::lifecycle::dur_ns")]
    pub t_w: Duration,
    #[serde(default, with = "crate::lifecycle::dur_ns")]
    pub t_e: Duration,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Results {
    pub results: Vec<TaskResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AckEvent {
    pub task_id: TaskId,
    pub event: LifecycleEvent,
}

/// Progress notices (assigned, started) flowing upstream.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAck {
    pub events: Vec<AckEvent>,
}

/// Manager to agent, first frame on a link.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterManager {
    pub node_id: String,
    pub slots: u32,
    pub tags: BTreeMap<String, u32>,
    #[serde(default)]
    pub pid: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_id: Option<u64>,
}

/// Agent to manager.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerRegisterAck {
    pub manager_id: ManagerId,
    pub heartbeat_ms: u64,
    pub miss_threshold: u32,
    pub advert_interval_ms: u64,
    pub warm_ttl_ms: u64,
    #[serde(default)]
    pub pins: BTreeMap<String, u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_limit: Option<u32>,
}

/// Manager to agent inside CAPACITY_ADVERT frames.
pub type ManagerAdvert = CapacityAdvertisement;

/// Worker to manager, first frame after launch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerHello {
    pub tag: String,
    pub pid: u32,
}

/// Manager to worker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerTask {
    pub task_id: TaskId,
    pub runtime: Runtime,
    #[serde(with = "crate::function::b64")]
    pub body: Vec<u8>,
    pub input: Envelope,
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub batch: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifecycle::ErrorKind;
    use alloc::vec;

    #[test]
    fn dispatch_round_trip() {
        let d = Dispatch {
            tasks: vec![DispatchTask {
                task_id: TaskId::from_u128(1),
                function_id: FunctionId::from_u128(2),
                function_version: 1,
                runtime: Runtime::Bench,
                container_tag: "default".into(),
                body: Some(b"echo".to_vec()),
                input: Envelope::raw(b"hi".to_vec()),
                batch: false,
                attempt: 0,
                retriable: true,
                cold: true,
            }],
        };
        let env = to_envelope(&d);
        assert_eq!(env.codec_id, 1);
        let back: Dispatch = from_envelope(&env).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn result_outcome_shapes() {
        let ok = TaskResult {
            task_id: TaskId::from_u128(5),
            attempt: 1,
            outcome: TaskOutcome::Ok(Envelope::raw(b"x".to_vec())),
            t_w: Duration::from_micros(3),
            t_e: Duration::ZERO,
        };
        let s = serde_json::to_string(&ok).unwrap();
        assert!(s.contains(r#""outcome":{"ok":"#), "{s}");
        assert!(s.contains(r#""t_w":3000"#), "{s}");
        let err = TaskResult {
            outcome: TaskOutcome::Err(TaskError::new(ErrorKind::Execution, "boom")),
            ..ok.clone()
        };
        let r = Results { results: vec![ok, err] };
        let back: Results = from_envelope(&to_envelope(&r)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn non_text_envelope_is_rejected() {
        let env = Envelope::raw(b"{}".to_vec());
        assert!(from_envelope::<AgentAdvert>(&env).is_err());
    }

    #[test]
    fn workers_by_tag_skips_lost_managers() {
        let mut tags = BTreeMap::new();
        tags.insert("a".into(), TagWorkers { idle: 1, workers: 2 });
        let m = |id: u128, status| ManagerSummary {
            manager_id: ManagerId::from_u128(id),
            node_id: "n".into(),
            status,
            slots: 4,
            outstanding: 0,
            tags: tags.clone(),
        };
        let s = AgentStatus {
            queued: 0,
            managers: vec![m(1, ManagerStatus::Active), m(2, ManagerStatus::Lost), m(3, ManagerStatus::Suspended)],
            counters: BTreeMap::new(),
        };
        assert_eq!(s.workers_by_tag()["a"], TagWorkers { idle: 2, workers: 4 });
    }
}
