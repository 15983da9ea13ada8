//! Task records and the lifecycle state machine.
//!
//! ```text
//! RECEIVED -persisted-> QUEUED -delivered-> DISPATCHED -assigned-> SCHEDULED
//!   -started-> RUNNING -completed-> SUCCEEDED
//!                      -failed----> FAILED
//! {DISPATCHED,SCHEDULED,RUNNING} -lost-> LOST_REQUEUED (retriable) | FAILED
//! LOST_REQUEUED -persisted-> QUEUED
//! ```

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::time::Duration;

use serde::{Deserialize, Serialize};

use crate::codec::Envelope;
use crate::ids::{EndpointId, FunctionId, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Received,
    Queued,
    Dispatched,
    Scheduled,
    Running,
    Succeeded,
    Failed,
    LostRequeued,
}

impl TaskState {
    pub const ALL: [TaskState; 8] = [
        TaskState::Received,
        TaskState::Queued,
        TaskState::Dispatched,
        TaskState::Scheduled,
        TaskState::Running,
        TaskState::Succeeded,
        TaskState::Failed,
        TaskState::LostRequeued,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Succeeded | TaskState::Failed)
    }

    /// Handed to an agent and not yet terminal.
    pub fn is_in_flight(self) -> bool {
        matches!(self, TaskState::Dispatched | TaskState::Scheduled | TaskState::Running)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Received => "RECEIVED",
            TaskState::Queued => "QUEUED",
            TaskState::Dispatched => "DISPATCHED",
            TaskState::Scheduled => "SCHEDULED",
            TaskState::Running => "RUNNING",
            TaskState::Succeeded => "SUCCEEDED",
            TaskState::Failed => "FAILED",
            TaskState::LostRequeued => "LOST_REQUEUED",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleEvent {
    Persisted,
    /// Popped by a forwarder. Observational: moves no state on its own.
    Dequeued,
    Delivered,
    Assigned,
    Started,
    Completed,
    Failed,
    Lost,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 8] = [
        LifecycleEvent::Persisted,
        LifecycleEvent::Dequeued,
        LifecycleEvent::Delivered,
        LifecycleEvent::Assigned,
        LifecycleEvent::Started,
        LifecycleEvent::Completed,
        LifecycleEvent::Failed,
        LifecycleEvent::Lost,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition: {event:?} in state {from}")]
pub struct IllegalTransition {
    pub from: TaskState,
    pub event: LifecycleEvent,
}

/// The transition table.
pub fn next_state(
    from: TaskState,
    event: LifecycleEvent,
    retriable: bool,
) -> Result<TaskState, IllegalTransition> {
    use LifecycleEvent as E;
    use TaskState as S;
    let to = match (from, event) {
        (S::Received, E::Persisted) => S::Queued,
        (S::LostRequeued, E::Persisted) => S::Queued,
        (S::Queued, E::Delivered) => S::Dispatched,
        (S::Dispatched, E::Assigned) => S::Scheduled,
        (S::Scheduled, E::Started) => S::Running,
        (S::Running, E::Completed) => S::Succeeded,
        (S::Running, E::Failed) => S::Failed,
        (S::Dispatched | S::Scheduled | S::Running, E::Lost) => {
            if retriable {
                S::LostRequeued
            } else {
                S::Failed
            }
        }
        _ => return Err(IllegalTransition { from, event }),
    };
    Ok(to)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// The function ran and reported an error.
    Execution,
    /// The worker broke its sandbox limits and was killed.
    SandboxViolation,
    /// The executing component disappeared and the task was not retriable.
    Lost,
    /// No worker could be launched for the task's container tag.
    LaunchFailure,
    /// The endpoint was deleted while the task was pending.
    EndpointDeleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskError {
    pub kind: ErrorKind,
    pub message: String,
}

impl TaskError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        TaskError {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for TaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

/// Where time went for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TimingBreakdown {
    /// Coordinator: authenticate, persist, enqueue.
    #[serde(with = "dur_ns")]
    pub t_s: Duration,
    /// Forwarder: dequeue and forward, then persist the result.
    #[serde(with = "dur_ns")]
    pub t_f: Duration,
    /// Endpoint: agent and manager residence excluding execution.
    #[serde(with = "dur_ns")]
    pub t_e: Duration,
    /// Worker: function execution only.
    #[serde(with = "dur_ns")]
    pub t_w: Duration,
}

impl TimingBreakdown {
    pub fn accounted(&self) -> Duration {
        self.t_s + self.t_f + self.t_e + self.t_w
    }
}

/// Serde helper: durations as integer nanoseconds.
pub mod dur_ns {
    use core::time::Duration;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_nanos().min(u64::MAX as u128) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_nanos(u64::deserialize(d)?))
    }
}

/// Serde helper: `Duration` as whole milliseconds.
pub mod dur_ms {
    use core::time::Duration;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis().min(u64::MAX as u128) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub state: TaskState,
    /// Microseconds on the recorder's clock (unix time at the coordinator).
    pub at_us: u64,
}

/// Terminal outcome of one execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success(Envelope),
    Failure(TaskError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub function_id: FunctionId,
    pub function_version: u32,
    pub endpoint_id: EndpointId,
    /// Principal that submitted the task.
    pub submitter: String,
    pub input: Envelope,
    /// Input is a batch of element envelopes; the result is a list in the same order.
    #[serde(default)]
    pub batch: bool,
    pub state: TaskState,
    #[serde(default)]
    pub result: Option<Envelope>,
    #[serde(default)]
    pub error: Option<TaskError>,
    pub retriable: bool,
    pub attempt: u32,
    #[serde(default)]
    pub timing: TimingBreakdown,
    #[serde(default)]
    pub transitions: Vec<Transition>,
}

impl TaskRecord {
    pub fn new(
        task_id: TaskId,
        function_id: FunctionId,
        function_version: u32,
        endpoint_id: EndpointId,
        submitter: impl Into<String>,
        input: Envelope,
        now_us: u64,
    ) -> Self {
        TaskRecord {
            task_id,
            function_id,
            function_version,
            endpoint_id,
            submitter: submitter.into(),
            input,
            batch: false,
            state: TaskState::Received,
            result: None,
            error: None,
            retriable: true,
            attempt: 0,
            timing: TimingBreakdown::default(),
            transitions: alloc::vec![Transition {
                state: TaskState::Received,
                at_us: now_us,
            }],
        }
    }

    /// Applies a data-free event. `completed` and `failed` go through [`TaskRecord::finish`].
    pub fn advance(&mut self, event: LifecycleEvent, now_us: u64) -> Result<TaskState, IllegalTransition> {
        if matches!(event, LifecycleEvent::Completed | LifecycleEvent::Failed) {
            return Err(IllegalTransition { from: self.state, event });
        }
        let to = next_state(self.state, event, self.retriable)?;
        if event == LifecycleEvent::Lost && to == TaskState::Failed {
            self.error = Some(TaskError::new(ErrorKind::Lost, "executor lost and task is not retriable"));
        }
        if self.state == TaskState::LostRequeued && to == TaskState::Queued {
            self.attempt += 1;
        }
        self.set_state(to, now_us);
        Ok(to)
    }

    /// Applies `completed` or `failed` together with the outcome, so that
    /// `result` is set exactly when SUCCEEDED and `error` exactly when FAILED.
    pub fn finish(&mut self, outcome: Outcome, now_us: u64) -> Result<TaskState, IllegalTransition> {
        let event = match outcome {
            Outcome::Success(_) => LifecycleEvent::Completed,
            Outcome::Failure(_) => LifecycleEvent::Failed,
        };
        let to = next_state(self.state, event, self.retriable)?;
        match outcome {
            Outcome::Success(env) => self.result = Some(env),
            Outcome::Failure(err) => self.error = Some(err),
        }
        self.set_state(to, now_us);
        Ok(to)
    }

    /// Creates a record that is already SUCCEEDED with a cached result.
    pub fn succeed_from_cache(&mut self, result: Envelope, now_us: u64) {
        debug_assert_eq!(self.state, TaskState::Received);
        self.result = Some(result);
        self.set_state(TaskState::Succeeded, now_us);
    }

    /// Fails a task that never reached an executor (e.g. its endpoint was deleted).
    pub fn abort(&mut self, error: TaskError, now_us: u64) {
        debug_assert!(!self.state.is_terminal());
        self.error = Some(error);
        self.set_state(TaskState::Failed, now_us);
    }

    fn set_state(&mut self, to: TaskState, now_us: u64) {
        self.state = to;
        self.transitions.push(Transition { state: to, at_us: now_us });
    }

    /// Time of the first entry into `state`.
    pub fn first_time_in(&self, state: TaskState) -> Option<u64> {
        self.transitions.iter().find(|t| t.state == state).map(|t| t.at_us)
    }

    pub fn submitted_at_us(&self) -> u64 {
        self.transitions.first().map(|t| t.at_us).unwrap_or(0)
    }

    pub fn finished_at_us(&self) -> Option<u64> {
        if self.state.is_terminal() {
            self.transitions.last().map(|t| t.at_us)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use LifecycleEvent as E;
    use TaskState as S;

    fn record() -> TaskRecord {
        TaskRecord::new(TaskId(1), FunctionId(2), 1, EndpointId(3), "alice", Envelope::raw(b"x".to_vec()), 0)
    }

    /// Declared edge set, written out independently of `next_state`.
    fn declared(from: S, ev: E, retriable: bool) -> Option<S> {
        let edges: &[(S, E, S)] = &[
            (S::Received, E::Persisted, S::Queued),
            (S::LostRequeued, E::Persisted, S::Queued),
            (S::Queued, E::Delivered, S::Dispatched),
            (S::Dispatched, E::Assigned, S::Scheduled),
            (S::Scheduled, E::Started, S::Running),
            (S::Running, E::Completed, S::Succeeded),
            (S::Running, E::Failed, S::Failed),
        ];
        if ev == E::Lost && matches!(from, S::Dispatched | S::Scheduled | S::Running) {
            return Some(if retriable { S::LostRequeued } else { S::Failed });
        }
        edges.iter().find(|(f, e, _)| *f == from && *e == ev).map(|(_, _, t)| *t)
    }

    #[test]
    fn exhaustive_transition_table() {
        let mut legal = 0;
        for retriable in [true, false] {
            for s in S::ALL {
                for e in E::ALL {
                    let got = next_state(s, e, retriable).ok();
                    assert_eq!(got, declared(s, e, retriable), "{s:?} x {e:?} retriable={retriable}");
                    legal += got.is_some() as usize;
                }
            }
        }
        assert_eq!(legal, 2 * 10);
    }

    #[test]
    fn terminal_states_have_no_exits() {
        for s in [S::Succeeded, S::Failed] {
            for e in E::ALL {
                assert!(next_state(s, e, true).is_err());
            }
        }
    }

    #[test]
    fn queued_delivered_dispatches() {
        assert_eq!(next_state(S::Queued, E::Delivered, true), Ok(S::Dispatched));
    }

    #[test]
    fn non_retriable_loss_fails() {
        let mut r = record();
        r.retriable = false;
        for e in [E::Persisted, E::Delivered, E::Assigned, E::Started] {
            r.advance(e, 1).unwrap();
        }
        assert_eq!(r.advance(E::Lost, 2), Ok(S::Failed));
        assert_eq!(r.error.as_ref().unwrap().kind, ErrorKind::Lost);
        assert!(r.result.is_none());
    }

    #[test]
    fn requeue_bumps_attempt() {
        let mut r = record();
        r.advance(E::Persisted, 1).unwrap();
        r.advance(E::Delivered, 2).unwrap();
        assert_eq!(r.attempt, 0);
        assert_eq!(r.advance(E::Lost, 3), Ok(S::LostRequeued));
        assert_eq!(r.advance(E::Persisted, 4), Ok(S::Queued));
        assert_eq!(r.attempt, 1);
        assert_eq!(r.transitions.len(), 5);
    }

    #[test]
    fn finish_sets_exactly_one_outcome_field() {
        let mut r = record();
        for e in [E::Persisted, E::Delivered, E::Assigned, E::Started] {
            r.advance(e, 1).unwrap();
        }
        assert!(r.advance(E::Completed, 2).is_err());
        r.finish(Outcome::Success(Envelope::raw(b"y".to_vec())), 2).unwrap();
        assert_eq!(r.state, S::Succeeded);
        assert!(r.result.is_some() && r.error.is_none());
        assert_eq!(r.finished_at_us(), Some(2));
        // a second completion is illegal
        assert!(r.finish(Outcome::Success(Envelope::empty()), 3).is_err());
        assert_eq!(r.result.as_ref().unwrap().payload, b"y");
    }

    #[test]
    fn json_state_names() {
        assert_eq!(serde_json::to_string(&S::LostRequeued).unwrap(), "\"LOST_REQUEUED\"");
        let r = record();
        let back: TaskRecord = serde_json::from_slice(&serde_json::to_vec(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
