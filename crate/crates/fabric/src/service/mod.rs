//! The coordinator: registries, durable per-endpoint queues, the memo cache
//! and the per-endpoint forwarders.
//!
//! All mutable state sits behind one mutex. Every mutation that must survive
//! a restart is written to the store before the lock is released.

pub mod api;
mod forwarder;
pub mod http;

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use fabric_core::batch::{partition_with_len, BatchSpec, PartitionError};
use fabric_core::lifecycle::{ErrorKind, LifecycleEvent, Outcome, TaskError};
use fabric_core::messages::{AckEvent, AgentStatus, DispatchTask, TaskOutcome, TaskResult};
use fabric_core::{
    memo_key, pack_envelopes, EndpointId, Envelope, FunctionId, FunctionRecord, MemoKey, TaskId, TaskRecord,
    TaskState,
};
use serde::{Deserialize, Serialize};
use tokio::sync::{watch, Notify};

use crate::config::CoordinatorConfig;
use crate::now_us;
use crate::store::{KvStore, MemStore, Mutation, StoreError, WalStore};
use api::*;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("missing or unknown bearer token")]
    Unauthenticated,
    #[error("principal {principal} may not {action}")]
    Unauthorized { principal: String, action: &'static str },
    #[error("unknown function {0}")]
    UnknownFunction(FunctionId),
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(EndpointId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("payload of {size} bytes exceeds the cap of {cap}")]
    PayloadTooLarge { size: usize, cap: usize },
    #[error("invalid batch spec: {0}")]
    InvalidSpec(#[from] PartitionError),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("task is not finished (state {0})")]
    NotReady(TaskState),
    #[error("result was purged after retrieval")]
    ResultPurged,
    #[error("task failed: {0}")]
    TaskFailed(TaskError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthenticated | ApiError::Unauthorized { .. } => "unauthorized",
            ApiError::UnknownFunction(_) => "unknown_function",
            ApiError::UnknownEndpoint(_) => "unknown_endpoint",
            ApiError::UnknownTask(_) => "unknown_task",
            ApiError::PayloadTooLarge { .. } => "payload_too_large",
            ApiError::InvalidSpec(_) => "invalid_spec",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::NotReady(_) => "not_ready",
            ApiError::ResultPurged => "result_purged",
            ApiError::TaskFailed(_) => "task_failed",
            ApiError::Store(_) => "internal",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            ApiError::Unauthenticated => 401,
            ApiError::Unauthorized { .. } => 403,
            ApiError::UnknownFunction(_) | ApiError::UnknownEndpoint(_) | ApiError::UnknownTask(_) => 404,
            ApiError::PayloadTooLarge { .. } => 413,
            ApiError::InvalidSpec(_) | ApiError::BadRequest(_) => 400,
            ApiError::NotReady(_) => 202,
            ApiError::ResultPurged => 410,
            ApiError::TaskFailed(_) => 422,
            ApiError::Store(_) => 500,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            error: self.code().to_string(),
            message: self.to_string(),
            state: match self {
                ApiError::NotReady(s) => Some(*s),
                ApiError::TaskFailed(_) => Some(TaskState::Failed),
                _ => None,
            },
            task_error: match self {
                ApiError::TaskFailed(e) => Some(e.clone()),
                _ => None,
            },
        }
    }
}

fn unauthorized(principal: &str, action: &'static str) -> ApiError {
    ApiError::Unauthorized {
        principal: principal.to_string(),
        action,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EndpointRecord {
    endpoint_id: EndpointId,
    name: String,
    description: String,
    owner: String,
    allowed_principals: BTreeSet<String>,
    state: ConnectionState,
    forwarder: String,
    last_heartbeat_us: u64,
    registered_at_us: u64,
}

impl EndpointRecord {
    fn admits(&self, principal: &str) -> bool {
        principal == self.owner || self.allowed_principals.contains(principal) || self.allowed_principals.contains("*")
    }
}

/// Durable form of a task.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredTask {
    task: TaskRecord,
    queue_seq: u64,
    #[serde(default)]
    retrieved_at_us: Option<u64>,
    #[serde(default)]
    purged: bool,
}

struct TaskEntry {
    rec: TaskRecord,
    queue_seq: u64,
    retrieved_at_us: Option<u64>,
    purged: bool,
    memo: Option<MemoKey>,
}

impl TaskEntry {
    fn mutation(&self) -> Mutation {
        let stored = StoredTask {
            task: self.rec.clone(),
            queue_seq: self.queue_seq,
            retrieved_at_us: self.retrieved_at_us,
            purged: self.purged,
        };
        Mutation::Put(task_key(self.rec.task_id), serde_json::to_vec(&stored).unwrap_or_default())
    }

    fn view(&self, transitions: bool) -> TaskView {
        let r = &self.rec;
        TaskView {
            task_id: r.task_id,
            function_id: r.function_id,
            function_version: r.function_version,
            endpoint_id: r.endpoint_id,
            state: r.state,
            attempt: r.attempt,
            retriable: r.retriable,
            batch: r.batch,
            error: r.error.clone(),
            timing: r.timing,
            submitted_us: r.submitted_at_us(),
            dispatched_us: r.first_time_in(TaskState::Dispatched),
            finished_us: r.finished_at_us(),
            transitions: if transitions { r.transitions.clone() } else { Vec::new() },
        }
    }
}

fn task_key(id: TaskId) -> String {
    format!("task/{id}")
}

fn fn_key(id: FunctionId, version: u32) -> String {
    format!("fn/{id}/{version:010}")
}

fn ep_key(id: EndpointId) -> String {
    format!("ep/{id}")
}

struct ForwarderHandle {
    notify: Arc<Notify>,
    stop: watch::Sender<bool>,
}

struct Endpoint {
    rec: EndpointRecord,
    queue: VecDeque<TaskId>,
    in_flight: HashMap<TaskId, u64>,
    results: HashSet<TaskId>,
    failed: HashSet<TaskId>,
    counters: EndpointCounters,
    agent: Option<AgentStatus>,
    window: u32,
    session: u64,
    forwarder: Option<ForwarderHandle>,
}

impl Endpoint {
    fn new(rec: EndpointRecord) -> Self {
        Endpoint {
            rec,
            queue: VecDeque::new(),
            in_flight: HashMap::new(),
            results: HashSet::new(),
            failed: HashSet::new(),
            counters: EndpointCounters::default(),
            agent: None,
            window: 0,
            session: 0,
            forwarder: None,
        }
    }

    fn notify(&self) {
        if let Some(f) = &self.forwarder {
            f.notify.notify_one();
        }
    }
}

struct Inner {
    store: Box<dyn KvStore>,
    functions: HashMap<FunctionId, Vec<FunctionRecord>>,
    endpoints: HashMap<EndpointId, Endpoint>,
    tasks: HashMap<TaskId, TaskEntry>,
    memo: HashMap<MemoKey, Envelope>,
    next_seq: u64,
    next_session: u64,
    purge: VecDeque<(u64, TaskId)>,
}

impl Inner {
    fn function(&self, id: FunctionId, version: u32) -> Option<&FunctionRecord> {
        self.functions.get(&id)?.get(version.checked_sub(1)? as usize)
    }

    fn latest(&self, id: FunctionId) -> Option<&FunctionRecord> {
        self.functions.get(&id)?.last()
    }

    fn seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }
}

/// Data a forwarder needs to push one popped batch.
pub(crate) struct Popped {
    pub tasks: Vec<DispatchTask>,
    pub memo_completed: Vec<TaskId>,
}

pub struct Coordinator {
    cfg: CoordinatorConfig,
    inner: Mutex<Inner>,
    waiters: Mutex<HashMap<TaskId, Arc<Notify>>>,
}

impl Coordinator {
    /// Opens the store and rebuilds queues from it. Forwarders start with
    /// [`Coordinator::start`].
    pub fn open(cfg: CoordinatorConfig) -> Result<Arc<Self>, StoreError> {
        let store: Box<dyn KvStore> = match &cfg.data_dir {
            Some(dir) => Box::new(WalStore::open_with(dir.join("wal.log"), cfg.fsync)?),
            None => Box::new(MemStore::default()),
        };
        let mut inner = Inner {
            store,
            functions: HashMap::new(),
            endpoints: HashMap::new(),
            tasks: HashMap::new(),
            memo: HashMap::new(),
            next_seq: 0,
            next_session: 0,
            purge: VecDeque::new(),
        };
        recover(&mut inner, &cfg)?;
        Ok(Arc::new(Coordinator {
            cfg,
            inner: Mutex::new(inner),
            waiters: Mutex::new(HashMap::new()),
        }))
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.cfg
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Starts a forwarder for every known endpoint and the purge timer.
    pub fn start(self: &Arc<Self>) -> Result<(), std::io::Error> {
        let ids: Vec<EndpointId> = self.lock().endpoints.keys().copied().collect();
        for id in ids {
            self.ensure_forwarder(id)?;
        }
        let me = Arc::downgrade(self);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(1));
            loop {
                tick.tick().await;
                let Some(c) = me.upgrade() else { return };
                if let Err(e) = c.purge_retrieved(now_us()) {
                    tracing::error!("purge failed: {e}");
                }
            }
        });
        Ok(())
    }

    /// Stops every forwarder.
    pub fn shutdown(&self) {
        let mut g = self.lock();
        for ep in g.endpoints.values_mut() {
            if let Some(f) = ep.forwarder.take() {
                let _ = f.stop.send(true);
            }
        }
    }

    pub fn principal_for(&self, token: &str) -> Option<String> {
        self.cfg.tokens.get(token).cloned()
    }

    fn check_size(&self, size: usize) -> Result<(), ApiError> {
        if size > self.cfg.payload_cap {
            return Err(ApiError::PayloadTooLarge {
                size,
                cap: self.cfg.payload_cap,
            });
        }
        Ok(())
    }

    pub fn register_function(
        &self,
        principal: &str,
        req: RegisterFunctionRequest,
    ) -> Result<RegisterFunctionResponse, ApiError> {
        self.check_size(req.body.len())?;
        let mut g = self.lock();
        let (function_id, version, owner) = match req.function_id {
            Some(id) => {
                let prev = g.latest(id).ok_or(ApiError::UnknownFunction(id))?;
                if prev.owner != principal {
                    return Err(unauthorized(principal, "update a function it does not own"));
                }
                (id, prev.version + 1, prev.owner.clone())
            }
            None => (FunctionId::from_u128(rand::random()), 1, principal.to_string()),
        };
        let mut allowed: BTreeSet<String> = req.allowed_principals.into_iter().collect();
        allowed.insert(owner.clone());
        let rec = FunctionRecord {
            function_id,
            version,
            name: req.name,
            body: req.body,
            runtime: req.runtime,
            container_tag: req.container_tag,
            memoize: req.memoize,
            owner,
            allowed_principals: allowed,
            registered_at_us: now_us(),
        };
        let bytes = serde_json::to_vec(&rec).unwrap_or_default();
        g.store.apply(vec![Mutation::Put(fn_key(function_id, version), bytes)])?;
        g.functions.entry(function_id).or_default().push(rec);
        Ok(RegisterFunctionResponse { function_id, version })
    }

    pub fn get_function(&self, principal: &str, id: FunctionId) -> Result<FunctionRecord, ApiError> {
        let g = self.lock();
        let f = g.latest(id).ok_or(ApiError::UnknownFunction(id))?;
        if !f.is_allowed(principal) {
            return Err(unauthorized(principal, "read this function"));
        }
        Ok(f.clone())
    }

    pub fn register_endpoint(
        self: &Arc<Self>,
        principal: &str,
        req: RegisterEndpointRequest,
    ) -> Result<RegisterEndpointResponse, ApiError> {
        let endpoint_id = {
            let mut g = self.lock();
            match req.endpoint_id {
                Some(id) => {
                    let ep = g.endpoints.get(&id).ok_or(ApiError::UnknownEndpoint(id))?;
                    if ep.rec.owner != principal {
                        return Err(unauthorized(principal, "re-register an endpoint it does not own"));
                    }
                    id
                }
                None => {
                    let id = EndpointId::from_u128(rand::random());
                    let mut allowed: BTreeSet<String> = req.allowed_principals.into_iter().collect();
                    allowed.insert(principal.to_string());
                    let rec = EndpointRecord {
                        endpoint_id: id,
                        name: req.name,
                        description: req.description,
                        owner: principal.to_string(),
                        allowed_principals: allowed,
                        state: ConnectionState::Registered,
                        forwarder: String::new(),
                        last_heartbeat_us: 0,
                        registered_at_us: now_us(),
                    };
                    let bytes = serde_json::to_vec(&rec).unwrap_or_default();
                    g.store.apply(vec![Mutation::Put(ep_key(id), bytes)])?;
                    g.endpoints.insert(id, Endpoint::new(rec));
                    id
                }
            }
        };
        let forwarder = self
            .ensure_forwarder(endpoint_id)
            .map_err(|e| ApiError::BadRequest(format!("cannot start forwarder: {e}")))?;
        Ok(RegisterEndpointResponse {
            endpoint_id,
            forwarder: forwarder.to_string(),
        })
    }

    /// Starts the endpoint's forwarder unless it is running; returns its address.
    fn ensure_forwarder(self: &Arc<Self>, id: EndpointId) -> Result<SocketAddr, std::io::Error> {
        let mut g = self.lock();
        let Some(ep) = g.endpoints.get_mut(&id) else {
            return Err(std::io::Error::other("endpoint vanished"));
        };
        if ep.forwarder.is_some() {
            if let Ok(addr) = ep.rec.forwarder.parse() {
                return Ok(addr);
            }
        }
        let listener = std::net::TcpListener::bind((self.cfg.forwarder_host.as_str(), 0))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let listener = tokio::net::TcpListener::from_std(listener)?;
        let notify = Arc::new(Notify::new());
        let (stop, stop_rx) = watch::channel(false);
        ep.forwarder = Some(ForwarderHandle {
            notify: notify.clone(),
            stop,
        });
        ep.rec.forwarder = addr.to_string();
        let bytes = serde_json::to_vec(&ep.rec).unwrap_or_default();
        if let Err(e) = g.store.apply(vec![Mutation::Put(ep_key(id), bytes)]) {
            tracing::error!("persisting endpoint {id}: {e}");
        }
        drop(g);
        tokio::spawn(forwarder::serve(self.clone(), id, listener, notify, stop_rx));
        Ok(addr)
    }

    pub fn get_endpoint(&self, principal: &str, id: EndpointId) -> Result<EndpointView, ApiError> {
        let g = self.lock();
        let ep = g.endpoints.get(&id).ok_or(ApiError::UnknownEndpoint(id))?;
        if !ep.rec.admits(principal) {
            return Err(unauthorized(principal, "view this endpoint"));
        }
        Ok(EndpointView {
            endpoint_id: id,
            name: ep.rec.name.clone(),
            description: ep.rec.description.clone(),
            owner: ep.rec.owner.clone(),
            state: ep.rec.state,
            forwarder: ep.rec.forwarder.clone(),
            last_heartbeat_us: ep.rec.last_heartbeat_us,
            queued: ep.queue.len(),
            in_flight: ep.in_flight.len(),
            results: ep.results.len(),
            failed: ep.failed.len(),
            window: ep.window,
            counters: ep.counters.clone(),
            workers: ep.agent.as_ref().map(|a| a.workers_by_tag()).unwrap_or_default(),
            agent: ep.agent.clone(),
        })
    }

    /// Stops the forwarder and fails every task that has not finished.
    pub fn delete_endpoint(&self, principal: &str, id: EndpointId) -> Result<usize, ApiError> {
        let mut finished = Vec::new();
        {
            let mut g = self.lock();
            let ep = g.endpoints.get(&id).ok_or(ApiError::UnknownEndpoint(id))?;
            if ep.rec.owner != principal {
                return Err(unauthorized(principal, "delete an endpoint it does not own"));
            }
            let mut ep = g.endpoints.remove(&id).expect("checked above");
            if let Some(f) = ep.forwarder.take() {
                let _ = f.stop.send(true);
            }
            let now = now_us();
            let mut muts = vec![Mutation::Delete(ep_key(id))];
            let pending: Vec<TaskId> = ep.queue.drain(..).chain(ep.in_flight.drain().map(|(t, _)| t)).collect();
            for t in pending {
                if let Some(e) = g.tasks.get_mut(&t) {
                    if !e.rec.state.is_terminal() {
                        e.rec.abort(TaskError::new(ErrorKind::EndpointDeleted, "endpoint was deleted"), now);
                        muts.push(e.mutation());
                        finished.push(t);
                    }
                }
            }
            g.store.apply(muts)?;
        }
        self.wake(&finished);
        Ok(finished.len())
    }

    /// Creates tasks. `inputs` are independent tasks unless `batch` is set,
    /// in which case each input is a packed batch.
    #[allow(clippy::too_many_arguments)]
    fn create_tasks(
        &self,
        principal: &str,
        function_id: FunctionId,
        endpoint_id: EndpointId,
        inputs: Vec<Envelope>,
        retriable: bool,
        batch: bool,
        started: Instant,
    ) -> Result<(Vec<TaskId>, Vec<TaskState>), ApiError> {
        for i in &inputs {
            self.check_size(i.payload.len())?;
        }
        let mut g = self.lock();
        let f = g.latest(function_id).ok_or(ApiError::UnknownFunction(function_id))?;
        if !f.is_allowed(principal) {
            return Err(unauthorized(principal, "invoke this function"));
        }
        let (version, memoize, body) = (f.version, f.memoize, f.body.clone());
        let ep = g.endpoints.get(&endpoint_id).ok_or(ApiError::UnknownEndpoint(endpoint_id))?;
        if !ep.rec.admits(principal) {
            return Err(unauthorized(principal, "submit to this endpoint"));
        }
        let now = now_us();
        let mut ids = Vec::with_capacity(inputs.len());
        let mut states = Vec::with_capacity(inputs.len());
        let mut entries = Vec::with_capacity(inputs.len());
        let mut hits = 0;
        for input in inputs {
            let task_id = TaskId::from_u128(rand::random());
            let mut rec = TaskRecord::new(task_id, function_id, version, endpoint_id, principal, input, now);
            rec.retriable = retriable;
            rec.batch = batch;
            let memo = memoize.then(|| memo_key(&body, &rec.input));
            let cached = memo.and_then(|k| g.memo.get(&k).cloned());
            let queue_seq = match cached {
                Some(result) => {
                    rec.succeed_from_cache(result, now);
                    hits += 1;
                    0
                }
                None => {
                    let _ = rec.advance(LifecycleEvent::Persisted, now);
                    g.seq()
                }
            };
            ids.push(task_id);
            states.push(rec.state);
            entries.push(TaskEntry {
                rec,
                queue_seq,
                retrieved_at_us: None,
                purged: false,
                memo,
            });
        }
        let t_s = started.elapsed() / entries.len().max(1) as u32;
        let mut muts = Vec::with_capacity(entries.len());
        for e in &mut entries {
            e.rec.timing.t_s = t_s;
            muts.push(e.mutation());
        }
        g.store.apply(muts)?;
        let ep = g.endpoints.get_mut(&endpoint_id).expect("checked above");
        ep.counters.submitted += entries.len() as u64;
        ep.counters.memo_hits += hits;
        for e in &entries {
            if e.rec.state == TaskState::Queued {
                ep.queue.push_back(e.rec.task_id);
            } else {
                ep.results.insert(e.rec.task_id);
            }
        }
        ep.notify();
        for e in entries {
            g.tasks.insert(e.rec.task_id, e);
        }
        Ok((ids, states))
    }

    pub fn submit(&self, principal: &str, req: SubmitRequest, started: Instant) -> Result<SubmitResponse, ApiError> {
        let inputs = match (req.input, req.inputs) {
            (Some(i), None) => vec![i],
            (None, Some(v)) => v,
            _ => return Err(ApiError::BadRequest("give exactly one of input and inputs".into())),
        };
        let (task_ids, states) = self.create_tasks(
            principal,
            req.function_id,
            req.endpoint_id,
            inputs,
            req.retriable,
            false,
            started,
        )?;
        Ok(SubmitResponse { task_ids, states })
    }

    pub fn submit_batch(&self, principal: &str, req: BatchRequest, started: Instant) -> Result<BatchResponse, ApiError> {
        let spec = BatchSpec {
            batch_size: req.batch_size,
            batch_count: req.batch_count,
        };
        let n = req.inputs.len();
        let mut packed = Vec::new();
        let mut sizes = Vec::new();
        for chunk in partition_with_len(req.inputs, n, spec)? {
            sizes.push(chunk.len());
            packed.push(pack_envelopes(&chunk));
        }
        let (task_ids, _) = self.create_tasks(
            principal,
            req.function_id,
            req.endpoint_id,
            packed,
            req.retriable,
            true,
            started,
        )?;
        Ok(BatchResponse { task_ids, sizes })
    }

    fn readable<'a>(g: &'a Inner, principal: &str, id: TaskId) -> Result<&'a TaskEntry, ApiError> {
        let e = g.tasks.get(&id).ok_or(ApiError::UnknownTask(id))?;
        if e.rec.submitter != principal {
            let owner = g.function(e.rec.function_id, e.rec.function_version).map(|f| f.owner.as_str());
            if owner != Some(principal) {
                return Err(unauthorized(principal, "read this task"));
            }
        }
        Ok(e)
    }

    pub fn status(&self, principal: &str, id: TaskId) -> Result<TaskView, ApiError> {
        let g = self.lock();
        Ok(Self::readable(&g, principal, id)?.view(true))
    }

    /// Views of the readable tasks among `ids`; others are omitted.
    pub fn status_many(&self, principal: &str, req: &StatusRequest) -> StatusResponse {
        let g = self.lock();
        let tasks = req
            .task_ids
            .iter()
            .filter_map(|id| Self::readable(&g, principal, *id).ok())
            .map(|e| e.view(req.transitions))
            .collect();
        StatusResponse { tasks }
    }

    /// Result of a finished task. The first successful read starts the
    /// purge grace period.
    pub fn result(&self, principal: &str, id: TaskId) -> Result<ResultResponse, ApiError> {
        let mut g = self.lock();
        let e = Self::readable(&g, principal, id)?;
        match e.rec.state {
            TaskState::Succeeded => {}
            TaskState::Failed => {
                return Err(ApiError::TaskFailed(e.rec.error.clone().unwrap_or_else(|| {
                    TaskError::new(ErrorKind::Execution, "unknown failure")
                })))
            }
            s => return Err(ApiError::NotReady(s)),
        }
        if e.purged {
            return Err(ApiError::ResultPurged);
        }
        let resp = ResultResponse {
            task_id: id,
            result: e.rec.result.clone().unwrap_or_else(Envelope::empty),
            timing: e.rec.timing,
        };
        if e.retrieved_at_us.is_none() {
            let now = now_us();
            let grace = self.cfg.purge_grace_ms * 1000;
            let e = g.tasks.get_mut(&id).expect("read above");
            e.retrieved_at_us = Some(now);
            let m = e.mutation();
            g.store.apply(vec![m])?;
            g.purge.push_back((now + grace, id));
        }
        Ok(resp)
    }

    /// Waits until `id` is terminal or `wait` elapses.
    pub async fn wait_terminal(&self, id: TaskId, wait: Duration) {
        let deadline = tokio::time::Instant::now() + wait;
        loop {
            let notify = {
                let mut w = self.waiters.lock().unwrap_or_else(|e| e.into_inner());
                w.entry(id).or_insert_with(|| Arc::new(Notify::new())).clone()
            };
            let fut = notify.notified();
            tokio::pin!(fut);
            fut.as_mut().enable();
            let done = self.lock().tasks.get(&id).is_none_or(|e| e.rec.state.is_terminal());
            if done {
                return;
            }
            if tokio::time::timeout_at(deadline, fut).await.is_err() {
                return;
            }
        }
    }

    fn wake(&self, ids: &[TaskId]) {
        if ids.is_empty() {
            return;
        }
        let mut w = self.waiters.lock().unwrap_or_else(|e| e.into_inner());
        if w.is_empty() {
            return;
        }
        for id in ids {
            if let Some(n) = w.remove(id) {
                n.notify_waiters();
            }
        }
    }

    /// Drops results whose grace period after retrieval has passed.
    pub fn purge_retrieved(&self, now: u64) -> Result<usize, StoreError> {
        let mut g = self.lock();
        let mut muts = Vec::new();
        while let Some(&(at, id)) = g.purge.front() {
            if at > now {
                break;
            }
            g.purge.pop_front();
            let Some(e) = g.tasks.get_mut(&id) else { continue };
            e.purged = true;
            e.rec.result = None;
            muts.push(e.mutation());
            let ep = e.rec.endpoint_id;
            if let Some(ep) = g.endpoints.get_mut(&ep) {
                ep.results.remove(&id);
            }
        }
        let n = muts.len();
        g.store.apply(muts)?;
        Ok(n)
    }

    // ---- forwarder side ----

    fn authenticate_agent(&self, id: EndpointId, token: &str) -> Result<(), String> {
        let principal = self.principal_for(token).ok_or("unknown token")?;
        let g = self.lock();
        let ep = g.endpoints.get(&id).ok_or("unknown endpoint")?;
        if ep.rec.owner != principal {
            return Err(format!("{principal} does not own endpoint {id}"));
        }
        Ok(())
    }

    /// Makes a new agent link current, recovering anything the previous one
    /// left in flight.
    fn attach_agent(&self, id: EndpointId) -> Option<u64> {
        let requeued = {
            let mut g = self.lock();
            g.next_session += 1;
            let session = g.next_session;
            let requeued = requeue_in_flight(&mut g, id);
            let ep = g.endpoints.get_mut(&id)?;
            ep.session = session;
            ep.window = 0;
            ep.rec.state = ConnectionState::Connected;
            ep.rec.last_heartbeat_us = now_us();
            (session, requeued)
        };
        self.wake(&requeued.1);
        Some(requeued.0)
    }

    /// Ends `session` if it is still current; returns how many tasks went back
    /// to the queue or failed.
    fn detach_agent(&self, id: EndpointId, session: u64) -> usize {
        let finished = {
            let mut g = self.lock();
            match g.endpoints.get(&id) {
                Some(ep) if ep.session == session => {}
                _ => return 0,
            }
            let finished = requeue_in_flight(&mut g, id);
            if let Some(ep) = g.endpoints.get_mut(&id) {
                ep.session = 0;
                ep.window = 0;
                ep.rec.state = ConnectionState::Disconnected;
                ep.counters.disconnects += 1;
            }
            finished
        };
        let n = finished.len();
        self.wake(&finished);
        n
    }

    fn is_current(&self, id: EndpointId, session: u64) -> bool {
        self.lock().endpoints.get(&id).is_some_and(|e| e.session == session)
    }

    fn agent_seen(&self, id: EndpointId, status: Option<AgentStatus>, window: Option<u32>) {
        let mut g = self.lock();
        if let Some(ep) = g.endpoints.get_mut(&id) {
            ep.rec.last_heartbeat_us = now_us();
            if let Some(s) = status {
                ep.agent = Some(s);
            }
            if let Some(w) = window {
                ep.window = w;
            }
        }
    }

    /// Pops queued tasks up to the agent's window. Tasks whose memoized
    /// result appeared while they waited complete here without dispatch.
    fn pop_dispatch(
        &self,
        id: EndpointId,
        session: u64,
        bodies_sent: &mut HashSet<(FunctionId, u32)>,
        max_tasks: usize,
        max_bytes: usize,
    ) -> Popped {
        let mut out = Popped {
            tasks: Vec::new(),
            memo_completed: Vec::new(),
        };
        let mut g = self.lock();
        let inner = &mut *g;
        let Some(ep) = inner.endpoints.get_mut(&id) else { return out };
        if ep.session != session || ep.rec.state != ConnectionState::Connected {
            return out;
        }
        let now = now_us();
        let mut bytes = 0;
        let mut muts = Vec::new();
        while (ep.in_flight.len() as u32) < ep.window && out.tasks.len() < max_tasks && bytes < max_bytes {
            let Some(tid) = ep.queue.pop_front() else { break };
            let Some(e) = inner.tasks.get_mut(&tid) else { continue };
            if e.rec.state != TaskState::Queued {
                continue;
            }
            let _ = e.rec.advance(LifecycleEvent::Dequeued, now);
            if let Some(result) = e.memo.and_then(|k| inner.memo.get(&k)) {
                for ev in [LifecycleEvent::Delivered, LifecycleEvent::Assigned, LifecycleEvent::Started] {
                    let _ = e.rec.advance(ev, now);
                }
                let _ = e.rec.finish(Outcome::Success(result.clone()), now);
                muts.push(e.mutation());
                ep.results.insert(tid);
                ep.counters.memo_hits += 1;
                out.memo_completed.push(tid);
                continue;
            }
            let Some(f) = inner
                .functions
                .get(&e.rec.function_id)
                .and_then(|v| v.get(e.rec.function_version as usize - 1))
            else {
                e.rec.abort(TaskError::new(ErrorKind::LaunchFailure, "function record missing"), now);
                muts.push(e.mutation());
                ep.failed.insert(tid);
                out.memo_completed.push(tid);
                continue;
            };
            let _ = e.rec.advance(LifecycleEvent::Delivered, now);
            let key = (f.function_id, f.version);
            let body = if bodies_sent.insert(key) {
                bytes += f.body.len();
                Some(f.body.clone())
            } else {
                None
            };
            bytes += e.rec.input.payload.len() + 200;
            ep.in_flight.insert(tid, now);
            ep.counters.dispatched += 1;
            out.tasks.push(DispatchTask {
                task_id: tid,
                function_id: f.function_id,
                function_version: f.version,
                runtime: f.runtime,
                container_tag: fabric_core::normalize_tag(&f.container_tag).to_string(),
                body,
                input: e.rec.input.clone(),
                batch: e.rec.batch,
                attempt: e.rec.attempt,
                retriable: e.rec.retriable,
                cold: false,
            });
        }
        if !muts.is_empty() {
            if let Err(err) = inner.store.apply(muts) {
                tracing::error!("persisting memo completions: {err}");
            }
        }
        out
    }

    fn add_forward_time(&self, ids: &[TaskId], d: Duration) {
        let mut g = self.lock();
        for id in ids {
            if let Some(e) = g.tasks.get_mut(id) {
                e.rec.timing.t_f += d;
            }
        }
    }

    fn apply_acks(&self, events: &[AckEvent]) {
        let mut g = self.lock();
        let now = now_us();
        for ev in events {
            if let Some(e) = g.tasks.get_mut(&ev.task_id) {
                let _ = e.rec.advance(ev.event, now);
            }
        }
    }

    /// Records results from the current session. First completion wins.
    fn apply_results(&self, id: EndpointId, session: u64, results: Vec<TaskResult>, received: Instant) {
        let mut finished = Vec::new();
        {
            let mut g = self.lock();
            let inner = &mut *g;
            let Some(ep) = inner.endpoints.get_mut(&id) else { return };
            if ep.session != session {
                return;
            }
            let now = now_us();
            let mut muts = Vec::new();
            let mut touched = Vec::new();
            for r in results {
                let Some(e) = inner.tasks.get_mut(&r.task_id) else { continue };
                ep.counters.results += 1;
                if e.rec.state.is_terminal() {
                    ep.counters.duplicates += 1;
                    continue;
                }
                if !e.rec.state.is_in_flight() {
                    ep.counters.stale += 1;
                    continue;
                }
                for ev in [LifecycleEvent::Assigned, LifecycleEvent::Started] {
                    let _ = e.rec.advance(ev, now);
                }
                e.rec.timing.t_w = r.t_w;
                e.rec.timing.t_e = r.t_e;
                ep.in_flight.remove(&r.task_id);
                match r.outcome {
                    TaskOutcome::Err(err) if err.kind == ErrorKind::Lost => {
                        let _ = e.rec.advance(LifecycleEvent::Lost, now);
                        if e.rec.state == TaskState::LostRequeued {
                            let _ = e.rec.advance(LifecycleEvent::Persisted, now);
                            inner.next_seq += 1;
                            e.queue_seq = inner.next_seq;
                            ep.queue.push_back(r.task_id);
                            ep.counters.requeued += 1;
                        } else {
                            ep.failed.insert(r.task_id);
                            ep.counters.lost_failed += 1;
                            finished.push(r.task_id);
                        }
                    }
                    TaskOutcome::Err(err) => {
                        let _ = e.rec.finish(Outcome::Failure(err), now);
                        ep.failed.insert(r.task_id);
                        finished.push(r.task_id);
                    }
                    TaskOutcome::Ok(env) => {
                        if let Some(k) = e.memo {
                            inner.memo.entry(k).or_insert_with(|| env.clone());
                        }
                        let _ = e.rec.finish(Outcome::Success(env), now);
                        ep.results.insert(r.task_id);
                        finished.push(r.task_id);
                    }
                }
                touched.push(r.task_id);
            }
            for t in &touched {
                if let Some(e) = inner.tasks.get(t) {
                    muts.push(e.mutation());
                }
            }
            if let Err(err) = inner.store.apply(muts) {
                tracing::error!("persisting results: {err}");
            }
            let d = received.elapsed();
            for t in &touched {
                if let Some(e) = inner.tasks.get_mut(t) {
                    e.rec.timing.t_f += d;
                }
            }
        }
        self.wake(&finished);
    }

    /// Verifies that every unfinished task of every endpoint sits in exactly
    /// one of queue and in-flight, and finished ones in results or failed.
    pub fn check_invariants(&self) -> Result<(), String> {
        let g = self.lock();
        for (id, ep) in &g.endpoints {
            let mut seen = HashSet::new();
            let sets: [(&str, Vec<TaskId>); 4] = [
                ("queue", ep.queue.iter().copied().collect()),
                ("in_flight", ep.in_flight.keys().copied().collect()),
                ("results", ep.results.iter().copied().collect()),
                ("failed", ep.failed.iter().copied().collect()),
            ];
            for (name, ids) in sets {
                for t in ids {
                    if !seen.insert(t) {
                        return Err(format!("task {t} appears twice on endpoint {id} ({name})"));
                    }
                    let Some(e) = g.tasks.get(&t) else {
                        return Err(format!("{name} of {id} holds unknown task {t}"));
                    };
                    let ok = match name {
                        "queue" => e.rec.state == TaskState::Queued,
                        "in_flight" => e.rec.state.is_in_flight(),
                        "results" => e.rec.state == TaskState::Succeeded,
                        _ => e.rec.state == TaskState::Failed,
                    };
                    if !ok {
                        return Err(format!("task {t} in {name} has state {}", e.rec.state));
                    }
                }
            }
            for (t, e) in &g.tasks {
                if e.rec.endpoint_id == *id && !seen.contains(t) && !e.purged {
                    return Err(format!("task {t} ({}) is in no set", e.rec.state));
                }
            }
        }
        Ok(())
    }
}

/// Moves every in-flight task of `id` back to the queue tail, or to FAILED
/// when it is not retriable. Returns the tasks that became terminal.
fn requeue_in_flight(g: &mut Inner, id: EndpointId) -> Vec<TaskId> {
    let inner = &mut *g;
    let Some(ep) = inner.endpoints.get_mut(&id) else { return Vec::new() };
    let mut ids: Vec<(u64, TaskId)> = ep.in_flight.drain().map(|(t, at)| (at, t)).collect();
    ids.sort();
    let now = now_us();
    let mut muts = Vec::new();
    let mut failed = Vec::new();
    for (_, t) in ids {
        let Some(e) = inner.tasks.get_mut(&t) else { continue };
        if e.rec.advance(LifecycleEvent::Lost, now).is_err() {
            continue;
        }
        if e.rec.state == TaskState::LostRequeued {
            let _ = e.rec.advance(LifecycleEvent::Persisted, now);
            inner.next_seq += 1;
            e.queue_seq = inner.next_seq;
            ep.queue.push_back(t);
            ep.counters.requeued += 1;
        } else {
            ep.failed.insert(t);
            ep.counters.lost_failed += 1;
            failed.push(t);
        }
        muts.push(e.mutation());
    }
    if let Err(err) = inner.store.apply(muts) {
        tracing::error!("persisting requeue: {err}");
    }
    failed
}

fn recover(g: &mut Inner, cfg: &CoordinatorConfig) -> Result<(), StoreError> {
    for (_, v) in g.store.scan_prefix("fn/") {
        match serde_json::from_slice::<FunctionRecord>(&v) {
            Ok(f) => g.functions.entry(f.function_id).or_default().push(f),
            Err(e) => tracing::error!("skipping unreadable function record: {e}"),
        }
    }
    for versions in g.functions.values_mut() {
        versions.sort_by_key(|f| f.version);
    }
    for (_, v) in g.store.scan_prefix("ep/") {
        match serde_json::from_slice::<EndpointRecord>(&v) {
            Ok(mut rec) => {
                if rec.state == ConnectionState::Connected {
                    rec.state = ConnectionState::Disconnected;
                }
                rec.forwarder.clear();
                g.endpoints.insert(rec.endpoint_id, Endpoint::new(rec));
            }
            Err(e) => tracing::error!("skipping unreadable endpoint record: {e}"),
        }
    }
    let now = now_us();
    let grace = cfg.purge_grace_ms * 1000;
    let mut queued: Vec<(u64, TaskId)> = Vec::new();
    let mut muts = Vec::new();
    let mut purge = Vec::new();
    for (_, v) in g.store.scan_prefix("task/") {
        let st = match serde_json::from_slice::<StoredTask>(&v) {
            Ok(st) => st,
            Err(e) => {
                tracing::error!("skipping unreadable task record: {e}");
                continue;
            }
        };
        let mut e = TaskEntry {
            rec: st.task,
            queue_seq: st.queue_seq,
            retrieved_at_us: st.retrieved_at_us,
            purged: st.purged,
            memo: None,
        };
        let f = g
            .functions
            .get(&e.rec.function_id)
            .and_then(|v| v.get((e.rec.function_version as usize).saturating_sub(1)));
        if let Some(f) = f.filter(|f| f.memoize) {
            let k = memo_key(&f.body, &e.rec.input);
            e.memo = Some(k);
            if let (TaskState::Succeeded, Some(r)) = (e.rec.state, &e.rec.result) {
                g.memo.entry(k).or_insert_with(|| r.clone());
            }
        }
        let mut changed = false;
        match e.rec.state {
            TaskState::Received => {
                let _ = e.rec.advance(LifecycleEvent::Persisted, now);
                changed = true;
            }
            s if s.is_in_flight() => {
                let _ = e.rec.advance(LifecycleEvent::Lost, now);
                if e.rec.state == TaskState::LostRequeued {
                    let _ = e.rec.advance(LifecycleEvent::Persisted, now);
                }
                changed = true;
            }
            TaskState::LostRequeued => {
                let _ = e.rec.advance(LifecycleEvent::Persisted, now);
                changed = true;
            }
            _ => {}
        }
        if changed {
            muts.push(e.mutation());
        }
        g.next_seq = g.next_seq.max(e.queue_seq);
        if let Some(at) = e.retrieved_at_us.filter(|_| !e.purged) {
            purge.push((at + grace, e.rec.task_id));
        }
        let Some(ep) = g.endpoints.get_mut(&e.rec.endpoint_id) else {
            g.tasks.insert(e.rec.task_id, e);
            continue;
        };
        match e.rec.state {
            TaskState::Queued => queued.push((e.queue_seq, e.rec.task_id)),
            TaskState::Succeeded if !e.purged => {
                ep.results.insert(e.rec.task_id);
            }
            TaskState::Failed => {
                ep.failed.insert(e.rec.task_id);
            }
            _ => {}
        }
        g.tasks.insert(e.rec.task_id, e);
    }
    queued.sort();
    for (_, t) in queued {
        let ep_id = g.tasks[&t].rec.endpoint_id;
        if let Some(ep) = g.endpoints.get_mut(&ep_id) {
            ep.queue.push_back(t);
        }
    }
    purge.sort();
    g.purge = purge.into();
    g.store.apply(muts)?;
    Ok(())
}

