//! The per-node manager: owns a pool of worker processes, advertises their
//! capacity to the agent over one link, and fans dispatched tasks out to
//! workers of the matching container tag.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::PathBuf;
use std::process::ExitStatus;
use std::time::{Duration, Instant};

use fabric_core::frame::{Message, MessageType};
use fabric_core::lifecycle::{ErrorKind, LifecycleEvent, TaskError};
use fabric_core::messages::{
    from_envelope, AckEvent, Dispatch, DispatchTask, ManagerRegisterAck, RegisterManager, TaskAck, TaskOutcome,
    TaskResult, WorkerHello, WorkerTask,
};
use fabric_core::warm::{reap_warm, WarmPoolPolicy, WorkerState, WorkerView};
use fabric_core::{normalize_tag, CapacityAdvertisement, FunctionId, TagCapacity};
use tokio::net::TcpStream;
use tokio::sync::mpsc;

use crate::config::ManagerConfig;
use crate::net::{empty_frame, json_frame, spawn_reader, spawn_writer};
use crate::sandbox::{classify_exit, Launch};

/// Consecutive failed launches of a tag before its queued tasks fail.
const MAX_LAUNCH_FAILURES: u32 = 3;

#[derive(Debug, Clone)]
pub struct ManagerOptions {
    pub agent: String,
    pub node_id: String,
    pub workers: u32,
    /// Tags to deploy workers for at start; the slots are split between them.
    pub tags: Vec<String>,
    pub block_id: Option<u64>,
    pub config: ManagerConfig,
}

struct Running {
    task_id: fabric_core::TaskId,
    attempt: u32,
    session: u64,
}

struct Worker {
    tag: String,
    state: WorkerState,
    pid: u32,
    tx: mpsc::UnboundedSender<Vec<u8>>,
    running: Option<Running>,
    warm_since_us: u64,
}

struct Pending {
    task: DispatchTask,
    session: u64,
}

enum WorkerEvent {
    Frame(u64, Option<Message>),
    Exit(u64, Option<ExitStatus>),
}

struct Session {
    id: u64,
    out: mpsc::UnboundedSender<Vec<u8>>,
    ack: ManagerRegisterAck,
    bodies: HashMap<(FunctionId, u32), Vec<u8>>,
    received: BTreeMap<String, u64>,
    last_sent: Option<CapacityAdvertisement>,
    seq: u64,
}

pub struct Manager {
    opts: ManagerOptions,
    worker_bin: PathBuf,
    sandbox_root: PathBuf,
    workers: BTreeMap<u64, Worker>,
    next_worker: u64,
    pending: BTreeMap<String, VecDeque<Pending>>,
    launch_failures: BTreeMap<String, u32>,
    /// Cold requests per tag not yet turned into workers.
    cold: BTreeMap<String, u32>,
    suspended: bool,
    events_tx: mpsc::UnboundedSender<WorkerEvent>,
    events_rx: mpsc::UnboundedReceiver<WorkerEvent>,
    frames_tx: mpsc::UnboundedSender<(u64, Option<Message>)>,
    frames_rx: mpsc::UnboundedReceiver<(u64, Option<Message>)>,
}

/// Why a session ended.
enum SessionEnd {
    AgentLost,
    Shutdown,
}

impl Manager {
    pub fn new(opts: ManagerOptions) -> Manager {
        let worker_bin = opts
            .config
            .worker_bin
            .clone()
            .unwrap_or_else(|| crate::sibling_binary("worker"));
        let sandbox_root = opts
            .config
            .sandbox_root
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join(format!("fabric-sandbox-{}", std::process::id())));
        let (events_tx, events_rx) = mpsc::unbounded_channel();
        let (frames_tx, frames_rx) = mpsc::unbounded_channel();
        Manager {
            opts,
            worker_bin,
            sandbox_root,
            workers: BTreeMap::new(),
            next_worker: 0,
            pending: BTreeMap::new(),
            launch_failures: BTreeMap::new(),
            cold: BTreeMap::new(),
            suspended: false,
            events_tx,
            events_rx,
            frames_tx,
            frames_rx,
        }
    }

    /// Launches initial workers, then registers with the agent and serves
    /// until told to shut down, reconnecting after agent loss.
    pub async fn run(mut self) -> std::io::Result<()> {
        let tags: Vec<String> = self.opts.tags.iter().map(|t| normalize_tag(t).to_string()).collect();
        if !tags.is_empty() {
            for i in 0..self.opts.workers as usize {
                let tag = tags[i % tags.len()].clone();
                if let Err(e) = self.deploy(&tag) {
                    tracing::error!("manager: cannot launch initial worker for {tag}: {e}");
                }
            }
            self.await_hellos(Duration::from_secs(10)).await;
        }
        let base = Duration::from_millis(self.opts.config.backoff_base_ms.max(1));
        let cap = Duration::from_millis(self.opts.config.backoff_cap_ms.max(1));
        let mut backoff = base;
        let mut session_id = 0;
        loop {
            let stream = match TcpStream::connect(&self.opts.agent).await {
                Ok(s) => s,
                Err(e) => {
                    tracing::debug!("manager: agent {} unreachable: {e}", self.opts.agent);
                    self.idle_wait(backoff).await;
                    backoff = (backoff * 2).min(cap);
                    continue;
                }
            };
            let _ = stream.set_nodelay(true);
            session_id += 1;
            match self.session(stream, session_id).await {
                Ok(SessionEnd::Shutdown) => break,
                Ok(SessionEnd::AgentLost) => backoff = base,
                Err(e) => {
                    tracing::debug!("manager: registration failed: {e}");
                    self.idle_wait(backoff).await;
                    backoff = (backoff * 2).min(cap);
                }
            }
            self.drop_session_work();
        }
        self.kill_all();
        Ok(())
    }

    /// Keeps worker bookkeeping current while no agent is connected.
    async fn idle_wait(&mut self, d: Duration) {
        let deadline = tokio::time::Instant::now() + d;
        loop {
            tokio::select! {
                _ = tokio::time::sleep_until(deadline) => return,
                Some(ev) = self.events_rx.recv() => self.on_worker_event(ev, None),
                Some((k, m)) = self.frames_rx.recv() => self.on_worker_event(WorkerEvent::Frame(k, m), None),
            }
        }
    }

    async fn await_hellos(&mut self, limit: Duration) {
        let deadline = tokio::time::Instant::now() + limit;
        while self.workers.values().any(|w| w.state == WorkerState::Starting) {
            tokio::select! {
                _ = tokio::time::sleep_until(deadline) => return,
                Some(ev) = self.events_rx.recv() => self.on_worker_event(ev, None),
                Some((k, m)) = self.frames_rx.recv() => self.on_worker_event(WorkerEvent::Frame(k, m), None),
            }
        }
    }

    fn drop_session_work(&mut self) {
        // tasks queued for a lost session are recovered upstream
        self.pending.clear();
        self.cold.clear();
        self.suspended = false;
    }

    async fn session(&mut self, stream: TcpStream, id: u64) -> std::io::Result<SessionEnd> {
        let (rd, wr) = stream.into_split();
        let out = spawn_writer(wr);
        let (agent_tx, mut agent_rx) = mpsc::unbounded_channel();
        let reader = spawn_reader(rd, id, agent_tx);
        let reg = RegisterManager {
            node_id: self.opts.node_id.clone(),
            slots: self.opts.workers,
            tags: self.tag_counts(),
            pid: std::process::id(),
            block_id: self.opts.block_id,
        };
        let _ = out.send(json_frame(MessageType::RegisterManager, &reg));
        let ack = loop {
            let msg = tokio::time::timeout(Duration::from_secs(10), agent_rx.recv()).await;
            match msg {
                Ok(Some((_, Some(m)))) if m.msg_type == MessageType::RegisterAck => {
                    break from_envelope::<ManagerRegisterAck>(&m.body)
                        .map_err(|e| std::io::Error::other(format!("bad registration ack: {e}")))?;
                }
                Ok(Some((_, Some(_)))) => continue,
                _ => {
                    reader.abort();
                    return Err(std::io::Error::other("agent closed the link during registration"));
                }
            }
        };
        tracing::info!("manager {}: registered as {}", self.opts.node_id, ack.manager_id);
        let hb = Duration::from_millis(ack.heartbeat_ms.max(1));
        let timeout = hb * ack.miss_threshold.max(1);
        let mut s = Session {
            id,
            out,
            ack,
            bodies: HashMap::new(),
            received: BTreeMap::new(),
            last_sent: None,
            seq: 0,
        };
        let mut heartbeat = tokio::time::interval(hb);
        let mut advert_tick =
            tokio::time::interval(Duration::from_millis(s.ack.advert_interval_ms.max(1)));
        advert_tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        let mut reap_tick = tokio::time::interval(
            Duration::from_millis((s.ack.warm_ttl_ms / 4).clamp(50, 1000)),
        );
        let mut last_seen = Instant::now();
        self.send_advert(&mut s);

        let end = loop {
            let mut acks = Vec::new();
            tokio::select! {
                msg = agent_rx.recv() => {
                    let Some((_, Some(m))) = msg else { break SessionEnd::AgentLost };
                    last_seen = Instant::now();
                    match m.msg_type {
                        MessageType::TaskDispatch => match from_envelope::<Dispatch>(&m.body) {
                            Ok(d) => self.accept(&mut s, d.tasks),
                            Err(e) => tracing::warn!("manager: bad dispatch: {e}"),
                        },
                        MessageType::HeartbeatAck | MessageType::Heartbeat => {}
                        MessageType::SuspendManager => {
                            self.suspended = true;
                            self.send_advert(&mut s);
                        }
                        MessageType::ShutdownManager => break SessionEnd::Shutdown,
                        other => tracing::warn!("manager: unexpected {other:?}"),
                    }
                }
                Some(ev) = self.events_rx.recv() => self.on_worker_event(ev, Some(&mut s)),
                Some((k, m)) = self.frames_rx.recv() => self.on_worker_event(WorkerEvent::Frame(k, m), Some(&mut s)),
                _ = heartbeat.tick() => {
                    if last_seen.elapsed() > timeout {
                        tracing::warn!("manager {}: agent heartbeat lost", self.opts.node_id);
                        break SessionEnd::AgentLost;
                    }
                    let _ = s.out.send(empty_frame(MessageType::Heartbeat));
                    self.send_advert(&mut s);
                }
                _ = advert_tick.tick() => {
                    if self.advert_changed(&s) {
                        self.send_advert(&mut s);
                    }
                }
                _ = reap_tick.tick() => self.reap(&s),
            }
            self.ensure_workers(&mut s);
            self.assign(&mut s, &mut acks);
            if !acks.is_empty() {
                let _ = s.out.send(json_frame(MessageType::TaskAck, &TaskAck { events: acks }));
            }
            if self.capacity_grew(&s) {
                self.send_advert(&mut s);
            }
            if s.out.is_closed() {
                break SessionEnd::AgentLost;
            }
        };
        reader.abort();
        Ok(end)
    }

    fn tag_counts(&self) -> BTreeMap<String, u32> {
        let mut m = BTreeMap::new();
        for w in self.workers.values().filter(|w| w.state != WorkerState::Dead) {
            *m.entry(w.tag.clone()).or_insert(0) += 1;
        }
        m
    }

    fn live_workers(&self) -> u32 {
        self.workers.values().filter(|w| w.state != WorkerState::Dead).count() as u32
    }

    fn spare_slots(&self) -> u32 {
        self.opts.workers.saturating_sub(self.live_workers())
    }

    fn advert(&self, s: &Session) -> CapacityAdvertisement {
        let mut tags: BTreeMap<String, TagCapacity> = BTreeMap::new();
        for w in self.workers.values() {
            let c = tags.entry(w.tag.clone()).or_default();
            match w.state {
                WorkerState::Idle => {
                    c.idle_now += 1;
                    c.anticipated += 1;
                }
                WorkerState::Busy | WorkerState::Starting => c.anticipated += 1,
                WorkerState::Draining | WorkerState::Dead => continue,
            }
            c.workers += 1;
        }
        for (tag, q) in &self.pending {
            tags.entry(tag.clone()).or_default().queued = q.len() as u32;
        }
        for (tag, n) in &s.received {
            tags.entry(tag.clone()).or_default().received = *n;
        }
        let mut spare = self.spare_slots();
        if self.suspended {
            for c in tags.values_mut() {
                c.idle_now = 0;
                c.anticipated = 0;
            }
            spare = 0;
        }
        CapacityAdvertisement {
            seq: s.seq,
            tags,
            slots: self.opts.workers,
            spare_slots: spare,
            batch_limit: s.ack.batch_limit,
        }
    }

    fn advert_changed(&self, s: &Session) -> bool {
        let mut now = self.advert(s);
        match &s.last_sent {
            Some(prev) => {
                now.seq = prev.seq;
                now != *prev
            }
            None => true,
        }
    }

    /// The agent, working from the last advert, would see less free
    /// capacity for some tag than there is now. Free capacity counts idle
    /// workers net of queued tasks, plus tasks received since that advert
    /// (which the agent treats as still in transit).
    fn capacity_grew(&self, s: &Session) -> bool {
        if s.ack.batch_limit.is_some() {
            return false;
        }
        let Some(prev) = &s.last_sent else { return true };
        let free = |c: &TagCapacity| c.idle_now as i64 - c.queued as i64 + c.received as i64;
        let now = self.advert(s);
        now.tags.iter().any(|(t, c)| {
            c.idle_now > 0 && prev.tags.get(t).is_none_or(|p| free(c) > free(p))
        })
    }

    fn send_advert(&self, s: &mut Session) {
        s.seq += 1;
        let adv = self.advert(s);
        let _ = s.out.send(json_frame(MessageType::CapacityAdvert, &adv));
        s.last_sent = Some(adv);
    }

    fn accept(&mut self, s: &mut Session, tasks: Vec<DispatchTask>) {
        for mut t in tasks {
            let tag = normalize_tag(&t.container_tag).to_string();
            t.container_tag = tag.clone();
            *s.received.entry(tag.clone()).or_insert(0) += 1;
            if let Some(body) = &t.body {
                s.bodies.insert((t.function_id, t.function_version), body.clone());
            }
            if self.opts.config.spec_for(&tag).is_none() {
                self.report(
                    s,
                    &t,
                    TaskOutcome::Err(TaskError::new(ErrorKind::LaunchFailure, format!("unknown container tag {tag:?}"))),
                );
                continue;
            }
            if t.cold {
                *self.cold.entry(tag.clone()).or_insert(0) += 1;
            }
            self.pending.entry(tag).or_default().push_back(Pending { task: t, session: s.id });
        }
    }

    fn report(&self, s: &Session, t: &DispatchTask, outcome: TaskOutcome) {
        let r = TaskResult {
            task_id: t.task_id,
            attempt: t.attempt,
            outcome,
            t_w: Duration::ZERO,
            t_e: Duration::ZERO,
        };
        let _ = s.out.send(json_frame(MessageType::TaskResult, &r));
    }

    /// Launches one worker per cold request, and one for any tag with
    /// queued tasks but no live worker. Idle workers of other tags are
    /// recycled when no slot is free; busy ones are never preempted.
    fn ensure_workers(&mut self, s: &mut Session) {
        let tags: Vec<String> = self.pending.iter().filter(|(_, q)| !q.is_empty()).map(|(t, _)| t.clone()).collect();
        for tag in tags {
            if self.launch_failures.get(&tag).copied().unwrap_or(0) >= MAX_LAUNCH_FAILURES {
                self.fail_tag(s, &tag, "workers keep failing to start");
                continue;
            }
            let live = self
                .workers
                .values()
                .any(|w| w.tag == tag && !matches!(w.state, WorkerState::Dead | WorkerState::Draining));
            let cold = self.cold.get(&tag).copied().unwrap_or(0);
            let mut need = if cold == 0 && !live { 1 } else { cold };
            while need > 0 {
                if self.spare_slots() == 0 && !self.recycle_idle_other(&tag) {
                    break;
                }
                match self.deploy(&tag) {
                    Ok(()) => {
                        need -= 1;
                        if let Some(c) = self.cold.get_mut(&tag) {
                            *c = c.saturating_sub(1);
                        }
                    }
                    Err(e) => {
                        tracing::error!("manager: launching worker for {tag}: {e}");
                        *self.launch_failures.entry(tag.clone()).or_insert(0) += 1;
                        if self.launch_failures[&tag] >= MAX_LAUNCH_FAILURES {
                            self.fail_tag(s, &tag, &e.to_string());
                        }
                        break;
                    }
                }
            }
        }
    }

    fn recycle_idle_other(&mut self, tag: &str) -> bool {
        let victim = self
            .workers
            .iter()
            .filter(|(_, w)| w.tag != tag && w.state == WorkerState::Idle)
            .filter(|(_, w)| self.pending.get(&w.tag).is_none_or(|q| q.is_empty()))
            .min_by_key(|(_, w)| w.warm_since_us)
            .map(|(k, _)| *k);
        match victim {
            Some(k) => {
                self.kill_worker(k);
                true
            }
            None => false,
        }
    }

    fn fail_tag(&mut self, s: &mut Session, tag: &str, why: &str) {
        self.launch_failures.remove(tag);
        if let Some(q) = self.pending.remove(tag) {
            for p in q {
                let err = TaskError::new(ErrorKind::LaunchFailure, format!("cannot launch worker for {tag}: {why}"));
                self.report(s, &p.task, TaskOutcome::Err(err));
            }
        }
    }

    fn deploy(&mut self, tag: &str) -> std::io::Result<()> {
        let spec = self
            .opts
            .config
            .spec_for(tag)
            .ok_or_else(|| std::io::Error::other(format!("unknown container tag {tag:?}")))?;
        let launch = Launch::resolve(&spec, &self.worker_bin, tag, &self.sandbox_root);
        let mut child = launch.spawn()?;
        let pid = child.id().unwrap_or(0);
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        let key = self.next_worker;
        self.next_worker += 1;
        let tx = spawn_writer(stdin);
        spawn_reader(stdout, key, self.frames_tx.clone());
        let events = self.events_tx.clone();
        tokio::spawn(async move {
            let status = child.wait().await.ok();
            let _ = events.send(WorkerEvent::Exit(key, status));
        });
        self.workers.insert(
            key,
            Worker {
                tag: tag.to_string(),
                state: WorkerState::Starting,
                pid,
                tx,
                running: None,
                warm_since_us: crate::now_us(),
            },
        );
        tracing::debug!("manager: deployed worker {key} ({tag}, pid {pid})");
        Ok(())
    }

    fn kill_worker(&mut self, key: u64) {
        if let Some(w) = self.workers.get_mut(&key) {
            w.state = WorkerState::Draining;
            if w.pid != 0 {
                // SAFETY: plain syscall; the pid belongs to our own child, which is not reaped until its exit event.
                unsafe {
                    libc::kill(w.pid as libc::pid_t, libc::SIGKILL);
                }
            }
        }
    }

    fn kill_all(&mut self) {
        let keys: Vec<u64> = self.workers.keys().copied().collect();
        for k in keys {
            self.kill_worker(k);
        }
    }

    fn reap(&mut self, s: &Session) {
        let policy = WarmPoolPolicy {
            ttl: Duration::from_millis(s.ack.warm_ttl_ms),
            max_warm_per_tag: None,
            pins: s.ack.pins.clone(),
        };
        let views: Vec<WorkerView<'_, u64>> = self
            .workers
            .iter()
            .map(|(k, w)| WorkerView {
                id: *k,
                tag: &w.tag,
                state: w.state,
                warm_since_us: w.warm_since_us,
            })
            .collect();
        let doomed = reap_warm(&views, &policy, crate::now_us());
        for k in doomed {
            tracing::debug!("manager: reaping idle worker {k}");
            self.kill_worker(k);
        }
    }

    /// Hands queued tasks to idle workers, FIFO per tag.
    fn assign(&mut self, s: &mut Session, acks: &mut Vec<AckEvent>) {
        for (tag, q) in self.pending.iter_mut() {
            while !q.is_empty() {
                let Some((_, w)) = self
                    .workers
                    .iter_mut()
                    .find(|(_, w)| w.tag == *tag && w.state == WorkerState::Idle)
                else {
                    break;
                };
                let p = q.pop_front().expect("non-empty");
                let t = p.task;
                let body = t
                    .body
                    .clone()
                    .or_else(|| s.bodies.get(&(t.function_id, t.function_version)).cloned());
                let Some(body) = body else {
                    let err = TaskError::new(ErrorKind::Execution, "function body was never sent on this link");
                    let r = TaskResult {
                        task_id: t.task_id,
                        attempt: t.attempt,
                        outcome: TaskOutcome::Err(err),
                        t_w: Duration::ZERO,
                        t_e: Duration::ZERO,
                    };
                    let _ = s.out.send(json_frame(MessageType::TaskResult, &r));
                    continue;
                };
                let wt = WorkerTask {
                    task_id: t.task_id,
                    runtime: t.runtime,
                    body,
                    input: t.input,
                    batch: t.batch,
                };
                if w.tx.send(json_frame(MessageType::TaskDispatch, &wt)).is_err() {
                    // the worker is going away; its exit event will follow
                    q.push_front(Pending {
                        task: DispatchTask {
                            input: wt.input,
                            body: Some(wt.body),
                            ..t
                        },
                        session: p.session,
                    });
                    w.state = WorkerState::Dead;
                    continue;
                }
                w.state = WorkerState::Busy;
                w.running = Some(Running {
                    task_id: t.task_id,
                    attempt: t.attempt,
                    session: p.session,
                });
                acks.push(AckEvent {
                    task_id: t.task_id,
                    event: LifecycleEvent::Started,
                });
            }
        }
    }

    fn on_worker_event(&mut self, ev: WorkerEvent, s: Option<&mut Session>) {
        match ev {
            WorkerEvent::Frame(key, None) => {
                tracing::debug!("manager: worker {key} closed its output");
            }
            WorkerEvent::Frame(key, Some(m)) => {
                let Some(w) = self.workers.get_mut(&key) else { return };
                match m.msg_type {
                    MessageType::Heartbeat => {
                        if let Ok(h) = from_envelope::<WorkerHello>(&m.body) {
                            if h.tag != w.tag {
                                tracing::error!("manager: worker {key} reports tag {} not {}", h.tag, w.tag);
                            }
                        }
                        if w.state == WorkerState::Starting {
                            w.state = WorkerState::Idle;
                            w.warm_since_us = crate::now_us();
                            self.launch_failures.remove(&w.tag);
                        }
                    }
                    MessageType::TaskResult => {
                        let Ok(r) = from_envelope::<TaskResult>(&m.body) else { return };
                        let Some(run) = w.running.take() else { return };
                        if w.state == WorkerState::Busy {
                            w.state = WorkerState::Idle;
                        }
                        w.warm_since_us = crate::now_us();
                        if let Some(s) = s {
                            if run.session == s.id && run.task_id == r.task_id {
                                let r = TaskResult { attempt: run.attempt, ..r };
                                let _ = s.out.send(json_frame(MessageType::TaskResult, &r));
                            }
                        }
                    }
                    _ => {}
                }
            }
            WorkerEvent::Exit(key, status) => {
                let Some(w) = self.workers.remove(&key) else { return };
                let was_starting = w.state == WorkerState::Starting;
                if let Some(run) = w.running {
                    let kind = classify_exit(status);
                    let msg = match status {
                        Some(st) => format!("worker exited mid-task: {st}"),
                        None => "worker exited mid-task".to_string(),
                    };
                    if let Some(s) = s {
                        if run.session == s.id {
                            let r = TaskResult {
                                task_id: run.task_id,
                                attempt: run.attempt,
                                outcome: TaskOutcome::Err(TaskError::new(kind, msg)),
                                t_w: Duration::ZERO,
                                t_e: Duration::ZERO,
                            };
                            let _ = s.out.send(json_frame(MessageType::TaskResult, &r));
                        }
                    }
                } else if was_starting {
                    tracing::warn!("manager: worker {key} ({}) died before its hello", w.tag);
                    *self.launch_failures.entry(w.tag).or_insert(0) += 1;
                }
            }
        }
    }
}
