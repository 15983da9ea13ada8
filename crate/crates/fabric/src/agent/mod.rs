//! The endpoint agent: holds the link to the endpoint's forwarder, accepts
//! manager links, places tasks on managers, recovers tasks from lost
//! managers and scales blocks through a provider.
//!
//! All scheduling state is owned by one event loop. Socket reads and writes
//! run in their own tasks and talk to the loop over channels.

pub mod provider;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use fabric_core::frame::{Message, MessageType};
use fabric_core::lifecycle::{ErrorKind, LifecycleEvent, TaskError};
use fabric_core::messages::{
    from_envelope, AckEvent, AgentAdvert, AgentRegisterAck, AgentStatus, Dispatch, DispatchTask, ManagerRegisterAck,
    ManagerStatus, ManagerSummary, RegisterAgent, RegisterManager, Results, TagWorkers, TaskAck, TaskOutcome,
    TaskResult,
};
use fabric_core::scaling::{plan_scaling, ManagerActivity, ScaleAction, ScalingPolicy, ScalingState};
use fabric_core::{
    dispatch_budget, normalize_tag, schedule, CapacityAdvertisement, Candidate, FunctionId, HeartbeatConfig,
    ManagerId, Placement, TaskId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

use crate::client::{Client, ClientError};
use crate::config::{AgentConfig, ConfigError, ManagerConfig, ProviderKind};
use crate::net::{empty_frame, json_frame, spawn_frame_reader, spawn_reader, spawn_writer, FrameReader};
use crate::service::api::RegisterEndpointRequest;
use provider::{BlockId, LaunchCommand, Provider};

const MAX_TASKS_PER_FRAME: usize = 256;
const HOUSEKEEPING: Duration = Duration::from_millis(25);
const RECONNECT_BASE: Duration = Duration::from_secs(1);
const RECONNECT_CAP: Duration = Duration::from_secs(30);
/// Grace for a retired manager to exit before its block is cancelled.
const RETIRE_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("coordinator rejected the agent: {0}")]
    AuthRejected(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

struct Queued {
    seq: u64,
    task: DispatchTask,
    received: Instant,
}

struct Outstanding {
    task: DispatchTask,
    received: Instant,
}

struct Mgr {
    conn: u64,
    out: mpsc::UnboundedSender<Vec<u8>>,
    node_id: String,
    slots: u32,
    block_id: Option<BlockId>,
    status: ManagerStatus,
    advert: Option<CapacityAdvertisement>,
    /// Cumulative tasks sent per tag on this registration.
    sent: BTreeMap<String, u64>,
    sent_since_advert: u32,
    /// Cold sends the manager has not yet acknowledged in an advert:
    /// (tag, value of `sent[tag]` after the send).
    cold_marks: Vec<(String, u64)>,
    /// Tags newly deployed here during the current advert cycle.
    new_tags: BTreeSet<String>,
    outstanding: HashMap<TaskId, Outstanding>,
    bodies_sent: HashSet<(FunctionId, u32)>,
    last_seen: Instant,
    idle_since_us: Option<u64>,
    frame: Vec<DispatchTask>,
    retired_at: Option<Instant>,
}

impl Mgr {
    fn tag_cap(&self, tag: &str) -> Option<&fabric_core::TagCapacity> {
        self.advert.as_ref()?.tags.get(tag)
    }

    fn workers_of(&self, tag: &str) -> u32 {
        self.tag_cap(tag).map_or(0, |c| c.workers)
    }

    fn cold_in_transit(&self, tag: &str) -> u32 {
        self.cold_marks.iter().filter(|(t, _)| t == tag).count() as u32
    }

    fn batch_room(&self) -> u32 {
        match self.advert.as_ref().and_then(|a| a.batch_limit) {
            Some(l) => l.saturating_sub(self.sent_since_advert),
            None => u32::MAX,
        }
    }

    fn warm_spare(&self, tag: &str, prefetch: u32) -> u32 {
        if self.status != ManagerStatus::Active {
            return 0;
        }
        let Some(cap) = self.tag_cap(tag) else { return 0 };
        if cap.workers == 0 {
            return 0;
        }
        let sent = self.sent.get(tag).copied().unwrap_or(0);
        let in_transit = sent.saturating_sub(cap.received).min(u32::MAX as u64) as u32;
        dispatch_budget(cap, prefetch, in_transit).min(self.batch_room())
    }

    fn spare_slots(&self) -> u32 {
        let adv = self.advert.as_ref().map_or(0, |a| a.spare_slots);
        adv.saturating_sub(self.cold_marks.len() as u32)
    }

    fn cold_spare(&self, tag: &str) -> u32 {
        if self.status != ManagerStatus::Active || self.advert.is_none() {
            return 0;
        }
        let deployed = self.workers_of(tag) > 0 || self.cold_in_transit(tag) > 0;
        if !deployed && !self.new_tags.is_empty() && !self.new_tags.contains(tag) {
            return 0;
        }
        self.spare_slots().min(self.batch_room())
    }

    fn summary(&self, id: ManagerId) -> ManagerSummary {
        let tags = self
            .advert
            .as_ref()
            .map(|a| {
                a.tags
                    .iter()
                    .filter(|(_, c)| c.workers > 0)
                    .map(|(t, c)| {
                        (
                            t.clone(),
                            TagWorkers {
                                idle: c.idle_now,
                                workers: c.workers,
                            },
                        )
                    })
                    .collect()
            })
            .unwrap_or_default();
        ManagerSummary {
            manager_id: id,
            node_id: self.node_id.clone(),
            status: self.status,
            slots: self.slots,
            outstanding: self.outstanding.len() as u32,
            tags,
        }
    }
}

struct Fwd {
    gen: u64,
    out: mpsc::UnboundedSender<Vec<u8>>,
    last_seen: Instant,
    last_beat: Instant,
    hb: HeartbeatConfig,
    window_sent: Option<u32>,
}

struct Link {
    reader: FrameReader<tokio::net::tcp::OwnedReadHalf>,
    writer: OwnedWriteHalf,
    ack: AgentRegisterAck,
}

enum ConnectError {
    Fatal(String),
    Retry(String),
}

/// A bound, not yet running agent.
pub struct Agent {
    cfg: AgentConfig,
    listener: TcpListener,
    addr: SocketAddr,
    state_dir: PathBuf,
}

impl Agent {
    /// Validates the config and binds the manager-facing listener.
    pub async fn bind(cfg: AgentConfig) -> Result<Agent, AgentError> {
        cfg.validate()?;
        let listener = TcpListener::bind(&cfg.listen).await?;
        let addr = listener.local_addr()?;
        let state_dir = cfg
            .state_dir
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join(format!("fabric-agent-{}", cfg.endpoint_id)));
        std::fs::create_dir_all(&state_dir)?;
        Ok(Agent {
            cfg,
            listener,
            addr,
            state_dir,
        })
    }

    /// Address managers connect to.
    pub fn manager_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn state_dir(&self) -> &std::path::Path {
        &self.state_dir
    }

    /// Runs until `shutdown` resolves or the coordinator rejects the agent.
    pub async fn run(self, shutdown: impl Future<Output = ()>) -> Result<(), AgentError> {
        let mut lp = Loop::new(self)?;
        lp.run(shutdown).await
    }
}

struct Loop {
    cfg: AgentConfig,
    listener: TcpListener,
    client: Client,
    prefetch: u32,
    policy: ScalingPolicy,
    launch: LaunchCommand,
    provider: Box<dyn Provider>,
    rng: ChaCha8Rng,

    queues: BTreeMap<String, VecDeque<Queued>>,
    next_seq: u64,
    bodies: HashMap<(FunctionId, u32), Vec<u8>>,
    managers: BTreeMap<ManagerId, Mgr>,
    conns: HashMap<u64, mpsc::UnboundedSender<Vec<u8>>>,
    conn_manager: HashMap<u64, ManagerId>,
    next_conn: u64,
    blocks: BTreeMap<BlockId, u32>,

    fwd: Option<Fwd>,
    fwd_gen: u64,
    connecting: bool,
    reconnect_at: Option<Instant>,
    backoff: Duration,

    counters: BTreeMap<String, u64>,
    out_results: Vec<TaskResult>,
    out_acks: Vec<AckEvent>,
    last_scale: Option<Instant>,
    starved: bool,
}

fn bump(counters: &mut BTreeMap<String, u64>, key: &str, n: u64) {
    *counters.entry(key.to_string()).or_insert(0) += n;
}

impl Loop {
    fn new(a: Agent) -> Result<Loop, AgentError> {
        let cfg = a.cfg;
        let seed = cfg.seed.unwrap_or_else(rand::random);
        let mcfg = ManagerConfig {
            worker_bin: cfg.worker_bin.clone(),
            sandbox_root: Some(a.state_dir.join("sandbox")),
            sandbox: cfg.sandbox.clone(),
            ..ManagerConfig::default()
        };
        let mcfg_path = a.state_dir.join(format!("manager-{}.toml", std::process::id()));
        crate::config::save(&mcfg_path, &mcfg)?;
        let mut args = vec![
            "--agent".to_string(),
            a.addr.to_string(),
            "--workers".to_string(),
            cfg.provider.workers_per_node.to_string(),
            "--config".to_string(),
            mcfg_path.to_string_lossy().into_owned(),
        ];
        if !cfg.tags.is_empty() {
            args.push("--tags".into());
            args.push(cfg.tags.join(","));
        }
        let launch = LaunchCommand {
            program: cfg.manager_bin.clone().unwrap_or_else(|| crate::sibling_binary("manager")),
            args,
            node_prefix: format!("{}-", &cfg.endpoint_id.to_string()[..8]),
        };
        Ok(Loop {
            client: Client::new(&cfg.coordinator, &cfg.token),
            prefetch: cfg.prefetch(),
            policy: cfg.scaling_policy(),
            provider: provider::from_config(&cfg.provider, seed ^ 0x5eed),
            rng: ChaCha8Rng::seed_from_u64(seed),
            launch,
            listener: a.listener,
            cfg,
            queues: BTreeMap::new(),
            next_seq: 0,
            bodies: HashMap::new(),
            managers: BTreeMap::new(),
            conns: HashMap::new(),
            conn_manager: HashMap::new(),
            next_conn: 0,
            blocks: BTreeMap::new(),
            fwd: None,
            fwd_gen: 0,
            connecting: false,
            reconnect_at: Some(Instant::now()),
            backoff: RECONNECT_BASE,
            counters: BTreeMap::new(),
            out_results: Vec::new(),
            out_acks: Vec::new(),
            last_scale: None,
            starved: false,
        })
    }

    async fn run(&mut self, shutdown: impl Future<Output = ()>) -> Result<(), AgentError> {
        tokio::pin!(shutdown);
        let (fwd_tx, mut fwd_rx) = mpsc::unbounded_channel::<(u64, Option<Message>)>();
        let (conn_tx, mut conn_rx) = mpsc::unbounded_channel::<(u64, Option<Message>)>();
        let (link_tx, mut link_rx) = mpsc::unbounded_channel::<Result<Link, ConnectError>>();
        let mut tick = tokio::time::interval(HOUSEKEEPING);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);

        let init = self.cfg.provider.init_blocks.min(self.policy.max_blocks);
        if init > 0 {
            self.submit_blocks(init);
        }

        loop {
            tokio::select! {
                _ = &mut shutdown => break,
                accepted = self.listener.accept() => {
                    if let Ok((stream, _)) = accepted {
                        self.accept(stream, &conn_tx);
                    }
                }
                Some((key, msg)) = conn_rx.recv() => match msg {
                    Some(m) => self.on_manager_frame(key, m),
                    None => self.on_conn_closed(key),
                },
                Some((gen, msg)) = fwd_rx.recv() => {
                    if self.fwd.as_ref().is_some_and(|f| f.gen == gen) {
                        match msg {
                            Some(m) => self.on_forwarder_frame(m),
                            None => self.forwarder_lost("link closed"),
                        }
                    }
                }
                Some(res) = link_rx.recv() => {
                    self.connecting = false;
                    match res {
                        Ok(link) => self.install_link(link, &fwd_tx),
                        Err(ConnectError::Fatal(e)) => {
                            self.stop_all();
                            return Err(AgentError::AuthRejected(e));
                        }
                        Err(ConnectError::Retry(e)) => {
                            tracing::info!("agent: forwarder connection failed: {e}");
                            self.reconnect_at = Some(Instant::now() + self.backoff);
                            self.backoff = (self.backoff * 2).min(RECONNECT_CAP);
                        }
                    }
                }
                _ = tick.tick() => self.housekeeping(&link_tx),
            }
            self.dispatch_pass();
            if self.starved && self.last_scale.is_none_or(|t| t.elapsed() >= Duration::from_millis(50)) {
                self.scale();
            }
            self.flush();
        }
        self.stop_all();
        Ok(())
    }

    fn accept(&mut self, stream: TcpStream, conn_tx: &mpsc::UnboundedSender<(u64, Option<Message>)>) {
        let _ = stream.set_nodelay(true);
        let (rd, wr) = stream.into_split();
        let key = self.next_conn;
        self.next_conn += 1;
        let out = spawn_writer(wr);
        spawn_reader(rd, key, conn_tx.clone());
        self.conns.insert(key, out);
    }

    fn install_link(&mut self, link: Link, fwd_tx: &mpsc::UnboundedSender<(u64, Option<Message>)>) {
        self.fwd_gen += 1;
        let gen = self.fwd_gen;
        let out = spawn_writer(link.writer);
        spawn_frame_reader(link.reader, gen, fwd_tx.clone());
        let hb = HeartbeatConfig {
            interval: Duration::from_millis(link.ack.heartbeat_ms.max(1)),
            miss_threshold: link.ack.miss_threshold.max(1),
        };
        self.fwd = Some(Fwd {
            gen,
            out,
            last_seen: Instant::now(),
            last_beat: Instant::now(),
            hb,
            window_sent: None,
        });
        self.backoff = RECONNECT_BASE;
        bump(&mut self.counters, "forwarder_connects", 1);
        tracing::info!("agent: connected to forwarder (session {gen})");
        self.send_status();
    }

    fn start_connect(&mut self, link_tx: &mpsc::UnboundedSender<Result<Link, ConnectError>>) {
        self.connecting = true;
        self.reconnect_at = None;
        let client = self.client.clone();
        let eid = self.cfg.endpoint_id;
        let token = self.cfg.token.clone();
        let tx = link_tx.clone();
        tokio::spawn(async move {
            let _ = tx.send(connect_forwarder(client, eid, token).await);
        });
    }

    fn forwarder_lost(&mut self, why: &str) {
        tracing::warn!("agent: forwarder link lost: {why}");
        self.fwd = None;
        // the coordinator requeues everything it had handed to this session
        let dropped: usize = self.queues.values().map(VecDeque::len).sum();
        self.queues.clear();
        bump(&mut self.counters, "forwarder_losses", 1);
        bump(&mut self.counters, "dropped_on_link_loss", dropped as u64);
        self.out_results.clear();
        self.out_acks.clear();
        self.reconnect_at = Some(Instant::now());
    }

    fn on_forwarder_frame(&mut self, m: Message) {
        if let Some(f) = self.fwd.as_mut() {
            f.last_seen = Instant::now();
        }
        match m.msg_type {
            MessageType::TaskDispatch => match from_envelope::<Dispatch>(&m.body) {
                Ok(d) => {
                    let now = Instant::now();
                    bump(&mut self.counters, "received", d.tasks.len() as u64);
                    for mut t in d.tasks {
                        if let Some(body) = t.body.take() {
                            self.bodies.insert((t.function_id, t.function_version), body);
                        }
                        let tag = normalize_tag(&t.container_tag).to_string();
                        t.container_tag = tag.clone();
                        self.next_seq += 1;
                        self.queues.entry(tag).or_default().push_back(Queued {
                            seq: self.next_seq,
                            task: t,
                            received: now,
                        });
                    }
                }
                Err(e) => tracing::warn!("agent: bad dispatch frame: {e}"),
            },
            MessageType::HeartbeatAck | MessageType::Heartbeat => {}
            other => tracing::warn!("agent: unexpected {other:?} from forwarder"),
        }
    }

    fn on_manager_frame(&mut self, key: u64, m: Message) {
        let Some(id) = self.conn_manager.get(&key).copied() else {
            if m.msg_type == MessageType::RegisterManager {
                match from_envelope::<RegisterManager>(&m.body) {
                    Ok(reg) => self.register_manager(key, reg),
                    Err(e) => tracing::warn!("agent: bad manager registration: {e}"),
                }
            }
            return;
        };
        let Some(mgr) = self.managers.get_mut(&id) else { return };
        mgr.last_seen = Instant::now();
        match m.msg_type {
            MessageType::CapacityAdvert => match from_envelope::<CapacityAdvertisement>(&m.body) {
                Ok(adv) => {
                    mgr.cold_marks.retain(|(tag, mark)| {
                        let received = adv.tags.get(tag).map_or(0, |c| c.received);
                        *mark > received
                    });
                    mgr.sent_since_advert = 0;
                    mgr.new_tags.clear();
                    mgr.advert = Some(adv);
                }
                Err(e) => tracing::warn!("agent: bad advert from {id}: {e}"),
            },
            MessageType::TaskResult => match from_envelope::<TaskResult>(&m.body) {
                Ok(r) => self.on_result(id, r),
                Err(e) => tracing::warn!("agent: bad result from {id}: {e}"),
            },
            MessageType::TaskAck => {
                if let Ok(a) = from_envelope::<TaskAck>(&m.body) {
                    self.out_acks.extend(a.events);
                }
            }
            MessageType::Heartbeat => {
                let _ = mgr.out.send(empty_frame(MessageType::HeartbeatAck));
            }
            MessageType::HeartbeatAck => {}
            other => tracing::warn!("agent: unexpected {other:?} from manager {id}"),
        }
    }

    fn register_manager(&mut self, key: u64, reg: RegisterManager) {
        let Some(out) = self.conns.get(&key).cloned() else { return };
        let id = ManagerId::from_u128(self.rng.random());
        let pins = self
            .policy
            .tags
            .iter()
            .filter(|(_, l)| l.min_workers > 0)
            .map(|(t, l)| (t.clone(), l.min_workers))
            .collect();
        let ack = ManagerRegisterAck {
            manager_id: id,
            heartbeat_ms: self.cfg.heartbeat.interval.as_millis() as u64,
            miss_threshold: self.cfg.heartbeat.miss_threshold,
            advert_interval_ms: self.cfg.advert_interval_ms,
            warm_ttl_ms: self.cfg.warm_ttl_ms,
            pins,
            batch_limit: if self.cfg.executor_batching { None } else { Some(1) },
        };
        let _ = out.send(json_frame(MessageType::RegisterAck, &ack));
        tracing::info!("agent: manager {} registered as {id} ({} slots)", reg.node_id, reg.slots);
        self.conn_manager.insert(key, id);
        self.managers.insert(
            id,
            Mgr {
                conn: key,
                out,
                node_id: reg.node_id,
                slots: reg.slots,
                block_id: reg.block_id,
                status: ManagerStatus::Active,
                advert: None,
                sent: BTreeMap::new(),
                sent_since_advert: 0,
                cold_marks: Vec::new(),
                new_tags: BTreeSet::new(),
                outstanding: HashMap::new(),
                bodies_sent: HashSet::new(),
                last_seen: Instant::now(),
                idle_since_us: Some(crate::now_us()),
                frame: Vec::new(),
                retired_at: None,
            },
        );
        bump(&mut self.counters, "manager_registrations", 1);
    }

    fn on_conn_closed(&mut self, key: u64) {
        self.conns.remove(&key);
        if let Some(id) = self.conn_manager.remove(&key) {
            let retired = self.managers.get(&id).is_some_and(|m| m.retired_at.is_some());
            if retired {
                self.drop_manager(id);
            } else {
                self.manager_lost(id, "link closed");
            }
        }
    }

    fn drop_manager(&mut self, id: ManagerId) -> Option<Mgr> {
        let m = self.managers.remove(&id)?;
        self.conn_manager.remove(&m.conn);
        self.conns.remove(&m.conn);
        Some(m)
    }

    /// Marks a manager lost and recovers its tasks: retriable ones go back
    /// to the agent queue, the rest are reported failed upstream.
    fn manager_lost(&mut self, id: ManagerId, why: &str) {
        let Some(m) = self.drop_manager(id) else { return };
        tracing::warn!("agent: manager {id} ({}) lost: {why}", m.node_id);
        bump(&mut self.counters, "manager_losses", 1);
        let _ = m.out.send(empty_frame(MessageType::ShutdownManager));
        let mut tasks: Vec<Outstanding> = m.outstanding.into_values().collect();
        tasks.sort_by_key(|o| o.received);
        for o in tasks {
            self.recover(o, "manager lost");
        }
    }

    fn recover(&mut self, o: Outstanding, why: &str) {
        if o.task.retriable {
            bump(&mut self.counters, "requeued", 1);
            self.next_seq += 1;
            let tag = o.task.container_tag.clone();
            self.queues.entry(tag).or_default().push_back(Queued {
                seq: self.next_seq,
                task: o.task,
                received: o.received,
            });
        } else {
            bump(&mut self.counters, "lost_failed", 1);
            self.out_results.push(TaskResult {
                task_id: o.task.task_id,
                attempt: o.task.attempt,
                outcome: TaskOutcome::Err(TaskError::new(ErrorKind::Lost, why)),
                t_w: Duration::ZERO,
                t_e: o.received.elapsed(),
            });
        }
    }

    fn on_result(&mut self, id: ManagerId, r: TaskResult) {
        let Some(mgr) = self.managers.get_mut(&id) else { return };
        let Some(o) = mgr.outstanding.remove(&r.task_id) else {
            bump(&mut self.counters, "orphan_results", 1);
            return;
        };
        if mgr.outstanding.is_empty() {
            mgr.idle_since_us = Some(crate::now_us());
        }
        if let TaskOutcome::Err(e) = &r.outcome {
            if e.kind == ErrorKind::Lost {
                let why = e.message.clone();
                self.recover(o, &why);
                return;
            }
        }
        bump(&mut self.counters, "results", 1);
        let hold = o.received.elapsed();
        self.out_results.push(TaskResult {
            t_e: hold.saturating_sub(r.t_w),
            ..r
        });
    }

    fn candidates(&self, tag: &str) -> Vec<Candidate<ManagerId>> {
        let limits = self.policy.limits(tag);
        let total: u32 = self
            .managers
            .values()
            .map(|m| m.workers_of(tag) + m.cold_in_transit(tag))
            .sum();
        let cold_room = limits.max_workers.saturating_sub(total);
        self.managers
            .iter()
            .map(|(id, m)| Candidate {
                id: *id,
                active: m.status == ManagerStatus::Active,
                warm_spare: m.warm_spare(tag, self.prefetch),
                cold_spare: if cold_room > 0 { m.cold_spare(tag) } else { 0 },
            })
            .collect()
    }

    /// Places queued tasks on managers, FIFO within a tag and by arrival
    /// across tags. A tag with no capacity does not hold up other tags.
    fn dispatch_pass(&mut self) {
        self.starved = false;
        if self.managers.is_empty() {
            self.starved = self.queues.values().any(|q| !q.is_empty());
            return;
        }
        let mut order: Vec<(u64, String)> = self
            .queues
            .iter()
            .filter_map(|(t, q)| q.front().map(|h| (h.seq, t.clone())))
            .collect();
        order.sort();
        for (_, tag) in order {
            loop {
                if self.queues.get(&tag).is_none_or(|q| q.is_empty()) {
                    break;
                }
                let cands = self.candidates(&tag);
                match schedule(&cands, &mut self.rng) {
                    Placement::Warm(id) => self.send_to(id, &tag, false),
                    Placement::Cold(id) => self.send_to(id, &tag, true),
                    Placement::NoCapacity => {
                        self.starved = true;
                        break;
                    }
                }
            }
        }
    }

    fn send_to(&mut self, id: ManagerId, tag: &str, cold: bool) {
        let q = self.queues.get_mut(tag).expect("non-empty queue");
        let item = q.pop_front().expect("non-empty queue");
        let mgr = self.managers.get_mut(&id).expect("candidate exists");
        let mut t = item.task;
        let key = (t.function_id, t.function_version);
        if mgr.bodies_sent.insert(key) {
            match self.bodies.get(&key) {
                Some(b) => t.body = Some(b.clone()),
                None => {
                    mgr.bodies_sent.remove(&key);
                    self.out_results.push(TaskResult {
                        task_id: t.task_id,
                        attempt: t.attempt,
                        outcome: TaskOutcome::Err(TaskError::new(ErrorKind::Execution, "function body unavailable")),
                        t_w: Duration::ZERO,
                        t_e: item.received.elapsed(),
                    });
                    return;
                }
            }
        }
        t.cold = cold;
        let n = mgr.sent.entry(tag.to_string()).or_insert(0);
        *n += 1;
        let mark = *n;
        mgr.sent_since_advert += 1;
        if cold {
            if mgr.workers_of(tag) == 0 && mgr.cold_in_transit(tag) == 0 {
                mgr.new_tags.insert(tag.to_string());
            }
            mgr.cold_marks.push((tag.to_string(), mark));
        }
        mgr.idle_since_us = None;
        let mut stored = t.clone();
        stored.body = None;
        stored.cold = false;
        mgr.outstanding.insert(
            t.task_id,
            Outstanding {
                task: stored,
                received: item.received,
            },
        );
        self.out_acks.push(AckEvent {
            task_id: t.task_id,
            event: LifecycleEvent::Assigned,
        });
        mgr.frame.push(t);
        bump(&mut self.counters, if cold { "cold_dispatches" } else { "warm_dispatches" }, 1);
    }

    fn window(&self) -> u32 {
        let per_node = self.cfg.provider.workers_per_node + self.prefetch;
        let active: Vec<&Mgr> = self
            .managers
            .values()
            .filter(|m| m.status == ManagerStatus::Active)
            .collect();
        let mut w: u32 = active.iter().map(|m| m.slots + self.prefetch).sum();
        let max_nodes = self.policy.max_blocks * self.policy.nodes_per_block;
        w += max_nodes.saturating_sub(active.len() as u32) * per_node;
        w
    }

    fn flush(&mut self) {
        for m in self.managers.values_mut() {
            if m.frame.is_empty() {
                continue;
            }
            let tasks = std::mem::take(&mut m.frame);
            for chunk in tasks.chunks(MAX_TASKS_PER_FRAME) {
                let _ = m.out.send(json_frame(MessageType::TaskDispatch, &Dispatch { tasks: chunk.to_vec() }));
            }
        }
        let window = self.window();
        let Some(f) = self.fwd.as_mut() else {
            self.out_results.clear();
            self.out_acks.clear();
            return;
        };
        if !self.out_acks.is_empty() {
            let events = std::mem::take(&mut self.out_acks);
            let _ = f.out.send(json_frame(MessageType::TaskAck, &TaskAck { events }));
        }
        if !self.out_results.is_empty() {
            let results = std::mem::take(&mut self.out_results);
            for chunk in results.chunks(MAX_TASKS_PER_FRAME) {
                let _ = f.out.send(json_frame(MessageType::TaskResult, &Results { results: chunk.to_vec() }));
            }
        }
        if f.window_sent != Some(window) {
            let _ = f.out.send(json_frame(MessageType::CapacityAdvert, &AgentAdvert { window }));
            f.window_sent = Some(window);
        }
    }

    fn status(&self) -> AgentStatus {
        AgentStatus {
            queued: self.queues.values().map(|q| q.len() as u32).sum(),
            managers: self.managers.iter().map(|(id, m)| m.summary(*id)).collect(),
            counters: self.counters.clone(),
        }
    }

    fn send_status(&mut self) {
        let status = self.status();
        if let Some(f) = self.fwd.as_mut() {
            let _ = f.out.send(json_frame(MessageType::Heartbeat, &status));
            f.last_beat = Instant::now();
        }
    }

    fn housekeeping(&mut self, link_tx: &mpsc::UnboundedSender<Result<Link, ConnectError>>) {
        let now = Instant::now();
        if let Some(f) = &self.fwd {
            if f.last_seen.elapsed() > f.hb.timeout() {
                self.forwarder_lost("heartbeat timeout");
            } else if f.last_beat.elapsed() >= f.hb.interval {
                self.send_status();
            }
        }
        if self.fwd.is_none() && !self.connecting && self.reconnect_at.is_some_and(|t| t <= now) {
            self.start_connect(link_tx);
        }

        let timeout = self.cfg.heartbeat.timeout();
        let lost: Vec<ManagerId> = self
            .managers
            .iter()
            .filter(|(_, m)| m.retired_at.is_none() && m.last_seen.elapsed() > timeout)
            .map(|(id, _)| *id)
            .collect();
        for id in lost {
            self.manager_lost(id, "heartbeat timeout");
        }
        let stale: Vec<ManagerId> = self
            .managers
            .iter()
            .filter(|(_, m)| m.retired_at.is_some_and(|t| t.elapsed() > RETIRE_GRACE))
            .map(|(id, _)| *id)
            .collect();
        for id in stale {
            if let Some(m) = self.drop_manager(id) {
                if let Some(b) = m.block_id {
                    self.provider.cancel(b);
                }
            }
        }

        self.provider.poll(now);
        let interval = Duration::from_millis(self.cfg.scaling.interval_ms.max(1));
        if self.last_scale.is_none_or(|t| t.elapsed() >= interval) {
            self.scale();
        }
    }

    fn submit_blocks(&mut self, n: u32) {
        for _ in 0..n {
            match self.provider.submit_block(self.policy.nodes_per_block, &self.launch) {
                Ok(b) => {
                    self.blocks.insert(b, self.policy.nodes_per_block);
                    bump(&mut self.counters, "blocks_submitted", 1);
                }
                Err(e) => {
                    tracing::error!("agent: block submission failed: {e}");
                    break;
                }
            }
        }
    }

    fn scale(&mut self) {
        self.last_scale = Some(Instant::now());
        let live = self.provider.live_blocks();
        self.blocks.retain(|b, _| live.iter().any(|(id, _)| id == b));
        let mut registered: BTreeMap<BlockId, u32> = BTreeMap::new();
        for m in self.managers.values() {
            if let Some(b) = m.block_id {
                *registered.entry(b).or_insert(0) += 1;
            }
        }
        let pending_blocks = live
            .iter()
            .filter(|(b, _)| registered.get(b).copied().unwrap_or(0) < self.policy.nodes_per_block)
            .count() as u32;
        let mut state = ScalingState::<ManagerId> {
            pending_blocks,
            blocks: live.len() as u32,
            ..Default::default()
        };
        for (tag, q) in &self.queues {
            if !q.is_empty() {
                state.pending.insert(tag.clone(), q.len() as u32);
            }
        }
        for (id, m) in &self.managers {
            if m.status != ManagerStatus::Active {
                continue;
            }
            if let Some(a) = &m.advert {
                for (tag, c) in &a.tags {
                    *state.workers.entry(tag.clone()).or_insert(0) += c.workers;
                }
            }
            for (tag, _) in &m.cold_marks {
                *state.workers.entry(tag.clone()).or_insert(0) += 1;
            }
            state.spare_slots += m.spare_slots();
            state.managers.push(ManagerActivity {
                id: *id,
                outstanding: m.outstanding.len() as u32,
                idle_since_us: m.idle_since_us,
            });
        }
        for action in plan_scaling(&self.policy, &state, crate::now_us()) {
            match action {
                ScaleAction::SubmitBlocks(n) => {
                    tracing::info!("agent: requesting {n} block(s)");
                    self.submit_blocks(n);
                }
                ScaleAction::Retire(id) => {
                    if self.cfg.provider.kind == ProviderKind::External {
                        continue;
                    }
                    if let Some(m) = self.managers.get_mut(&id) {
                        tracing::info!("agent: retiring idle manager {id}");
                        m.status = ManagerStatus::Suspended;
                        m.retired_at = Some(Instant::now());
                        let _ = m.out.send(empty_frame(MessageType::SuspendManager));
                        let _ = m.out.send(empty_frame(MessageType::ShutdownManager));
                        bump(&mut self.counters, "managers_retired", 1);
                    }
                }
            }
        }
    }

    fn stop_all(&mut self) {
        for m in self.managers.values() {
            let _ = m.out.send(empty_frame(MessageType::ShutdownManager));
        }
        let blocks: Vec<BlockId> = self.blocks.keys().copied().collect();
        for b in blocks {
            self.provider.cancel(b);
        }
    }
}

async fn connect_forwarder(client: Client, eid: fabric_core::EndpointId, token: String) -> Result<Link, ConnectError> {
    let req = RegisterEndpointRequest {
        endpoint_id: Some(eid),
        ..Default::default()
    };
    let resp = match client.register_endpoint(&req).await {
        Ok(r) => r,
        Err(ClientError::Api { status, body }) if matches!(status, 401 | 403 | 404) => {
            return Err(ConnectError::Fatal(format!("{status}: {}", body.message)));
        }
        Err(e) => return Err(ConnectError::Retry(e.to_string())),
    };
    let stream = TcpStream::connect(&resp.forwarder)
        .await
        .map_err(|e| ConnectError::Retry(format!("forwarder {}: {e}", resp.forwarder)))?;
    let _ = stream.set_nodelay(true);
    let (rd, mut wr) = stream.into_split();
    let reg = json_frame(MessageType::RegisterAgent, &RegisterAgent { endpoint_id: eid, token });
    tokio::io::AsyncWriteExt::write_all(&mut wr, &reg)
        .await
        .map_err(|e| ConnectError::Retry(e.to_string()))?;
    let mut reader = FrameReader::new(rd);
    let first = tokio::time::timeout(Duration::from_secs(10), reader.next()).await;
    let m = match first {
        Ok(Ok(Some(m))) if m.msg_type == MessageType::RegisterAck => m,
        Ok(Ok(_)) => return Err(ConnectError::Retry("forwarder closed during registration".into())),
        Ok(Err(e)) => return Err(ConnectError::Retry(e.to_string())),
        Err(_) => return Err(ConnectError::Retry("registration timed out".into())),
    };
    let ack: AgentRegisterAck = from_envelope(&m.body).map_err(|e| ConnectError::Retry(e.to_string()))?;
    if !ack.ok {
        return Err(ConnectError::Fatal(ack.error.unwrap_or_else(|| "registration refused".into())));
    }
    Ok(Link {
        reader,
        writer: wr,
        ack,
    })
}
