//! Core data model and policy logic for the fabric function execution service.
//!
//! Everything here is pure: no IO, no clocks, no threads. Callers pass
//! timestamps in and get decisions back. The `fabric` crate wires these
//! pieces to sockets, processes and files.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod batch;
pub mod capacity;
pub mod codec;
pub mod frame;
pub mod function;
pub mod heartbeat;
pub mod ids;
pub mod lifecycle;
pub mod memo;
pub mod messages;
pub mod scaling;
pub mod sched;
pub mod value;
pub mod warm;

pub use batch::{partition, BatchSpec, Partition, PartitionError};
pub use capacity::{dispatch_budget, CapacityAdvertisement, TagCapacity};
pub use codec::{deserialize, pack_envelopes, serialize, unpack_envelopes, Codec, CodecError, Envelope, DEFAULT_REGISTRY};
pub use frame::{decode_frame, encode_frame, FrameDecoder, FrameError, Message, MessageType};
pub use function::{BenchOp, FunctionRecord, Runtime};
pub use heartbeat::{lost_peers, HeartbeatConfig, Liveness};
pub use ids::{EndpointId, FunctionId, ManagerId, TaskId};
pub use lifecycle::{IllegalTransition, LifecycleEvent, TaskRecord, TaskState, TimingBreakdown};
pub use memo::{memo_key, MemoKey};
pub use sched::{schedule, Candidate, Placement};
pub use value::Value;

/// Default payload cap for inputs, results and frames (1 MiB).
pub const PAYLOAD_CAP: usize = 1 << 20;

/// Container tag used when a function does not name one.
pub const DEFAULT_TAG: &str = "default";

/// Normalizes an empty container tag to [`DEFAULT_TAG`].
pub fn normalize_tag(tag: &str) -> &str {
    if tag.is_empty() {
        DEFAULT_TAG
    } else {
        tag
    }
}
