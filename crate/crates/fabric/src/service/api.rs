//! JSON bodies of the HTTP API, shared by the server and [`crate::client`].

use std::collections::BTreeMap;

use fabric_core::function::{b64, Runtime};
use fabric_core::lifecycle::{TaskError, TimingBreakdown, Transition};
use fabric_core::messages::{AgentStatus, TagWorkers};
use fabric_core::{EndpointId, Envelope, FunctionId, TaskId, TaskState};
use serde::{Deserialize, Serialize};

fn yes() -> bool {
    true
}

/// `POST /api/functions`. Passing `function_id` updates a function the
/// caller owns and bumps its version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterFunctionRequest {
    #[serde(default)]
    pub name: String,
    #[serde(with = "b64")]
    pub body: Vec<u8>,
    #[serde(default)]
    pub runtime: Runtime,
    #[serde(default)]
    pub container_tag: String,
    #[serde(default)]
    pub memoize: bool,
    #[serde(default)]
    pub allowed_principals: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function_id: Option<FunctionId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterFunctionResponse {
    pub function_id: FunctionId,
    pub version: u32,
}

/// `POST /api/endpoints`. Passing `endpoint_id` re-registers an existing
/// endpoint and returns its current forwarder address.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterEndpointRequest {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_id: Option<EndpointId>,
    /// Principals allowed to submit; `"*"` admits everyone. The owner is
    /// always included.
    #[serde(default)]
    pub allowed_principals: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterEndpointResponse {
    pub endpoint_id: EndpointId,
    pub forwarder: String,
}

/// `POST /api/tasks`. Exactly one of `input` and `inputs` must be given;
/// `inputs` creates one independent task per element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub function_id: FunctionId,
    pub endpoint_id: EndpointId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<Envelope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<Envelope>>,
    #[serde(default = "yes")]
    pub retriable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub task_ids: Vec<TaskId>,
    pub states: Vec<TaskState>,
}

/// `POST /api/batches`: one task per partition of `inputs`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRequest {
    pub function_id: FunctionId,
    pub endpoint_id: EndpointId,
    pub inputs: Vec<Envelope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_count: Option<usize>,
    #[serde(default = "yes")]
    pub retriable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub task_ids: Vec<TaskId>,
    pub sizes: Vec<usize>,
}

/// `GET /api/tasks/{id}` and the rows of `POST /api/tasks/status`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: TaskId,
    pub function_id: FunctionId,
    pub function_version: u32,
    pub endpoint_id: EndpointId,
    pub state: TaskState,
    pub attempt: u32,
    pub retriable: bool,
    pub batch: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<TaskError>,
    pub timing: TimingBreakdown,
    pub submitted_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispatched_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusRequest {
    pub task_ids: Vec<TaskId>,
    /// Include per-state transition timestamps.
    #[serde(default)]
    pub transitions: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub tasks: Vec<TaskView>,
}

/// `GET /api/tasks/{id}/result` on success.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultResponse {
    pub task_id: TaskId,
    pub result: Envelope,
    pub timing: TimingBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConnectionState {
    Registered,
    Connected,
    Disconnected,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointCounters {
    pub submitted: u64,
    pub dispatched: u64,
    pub results: u64,
    /// Results for tasks that had already finished (first completion wins).
    pub duplicates: u64,
    /// Results for tasks that had been requeued and not yet redispatched.
    pub stale: u64,
    pub requeued: u64,
    pub lost_failed: u64,
    pub memo_hits: u64,
    pub disconnects: u64,
}

/// `GET /api/endpoints/{id}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointView {
    pub endpoint_id: EndpointId,
    pub name: String,
    pub description: String,
    pub owner: String,
    pub state: ConnectionState,
    pub forwarder: String,
    pub last_heartbeat_us: u64,
    pub queued: usize,
    pub in_flight: usize,
    pub results: usize,
    pub failed: usize,
    pub window: u32,
    pub counters: EndpointCounters,
    pub workers: BTreeMap<String, TagWorkers>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentStatus>,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// Stable machine-readable code, e.g. `not_ready`.
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<TaskState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_error: Option<TaskError>,
}
