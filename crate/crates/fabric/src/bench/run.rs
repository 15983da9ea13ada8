//! Experiment drivers. Every sweep point gets a fresh deployment: a
//! coordinator process, one agent process per endpoint and, for the
//! external provider, manager processes started here.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fabric_core::{normalize_tag, EndpointId, Envelope, FunctionId, HeartbeatConfig, TaskId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::cluster::{spawn_manager, AgentProc, Cluster, ClusterError, Proc};
use super::plan::{Arrival, Experiment, ExperimentPlan, FaultAction, Knob, Knobs, ScalingMode};
use super::report::{emit_report, mean, percentile, std_dev, write_csv, Check, ExperimentReport, ReportError, TaskRow};
use crate::client::{Client, ClientError};
use crate::config::{AgentConfig, ConfigError, CoordinatorConfig, ProviderKind, QueueDelay};
use crate::service::api::{BatchRequest, ConnectionState, StatusRequest, SubmitRequest, TaskView};
use fabric_core::scaling::TagLimits;

/// Inputs per submission request in burst mode.
const SUBMIT_CHUNK: usize = 500;
const STATUS_CHUNK: usize = 1000;
const POLL: Duration = Duration::from_millis(200);
const IDLE_POLL: Duration = Duration::from_millis(50);
const READY_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("api: {0}")]
    Client(#[from] ClientError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Setup(String),
}

/// Reports of every sweep point and the evaluated assertions.
#[derive(Debug)]
pub struct Outcome {
    pub reports: Vec<ExperimentReport>,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Settings of one sweep point.
#[derive(Debug, Clone)]
struct Point {
    name: String,
    param: f64,
    nodes: u32,
    workers_per_node: u32,
    count: u32,
    knobs: Knobs,
}

impl Point {
    fn base(plan: &ExperimentPlan) -> Point {
        Point {
            name: "run".into(),
            param: 0.0,
            nodes: plan.topology.nodes,
            workers_per_node: plan.topology.workers_per_node,
            count: plan.workload.count,
            knobs: plan.knobs.clone(),
        }
    }
}

enum Down {
    Manager(usize, usize),
    Agent(usize),
}

struct Ep {
    id: EndpointId,
    cfg: AgentConfig,
    agent: Option<AgentProc>,
    managers: Vec<Option<Proc>>,
    node_ids: Vec<String>,
}

/// One live deployment.
struct Fleet {
    eps: Vec<Ep>,
    down: Vec<Down>,
    workers_per_node: u32,
    tags: Vec<String>,
    cluster: Cluster,
    _dir: tempfile::TempDir,
}

impl Fleet {
    async fn deploy(plan: &ExperimentPlan, p: &Point, seed: u64, tags: &[String]) -> Result<Fleet, BenchError> {
        let t = &plan.topology;
        let dir = tempfile::tempdir()?;
        let hb = HeartbeatConfig {
            interval: Duration::from_millis(t.heartbeat_ms),
            miss_threshold: t.miss_threshold,
        };
        let coord_cfg = CoordinatorConfig {
            data_dir: Some(dir.path().join("coordinator")),
            heartbeat: hb,
            ..CoordinatorConfig::default()
        };
        let cluster = Cluster::spawn(coord_cfg, &dir.path().join("coordinator")).await?;
        let elastic = plan.experiment == Experiment::Elasticity;
        if p.nodes % t.endpoints != 0 {
            return Err(BenchError::Setup("nodes must divide evenly between endpoints".into()));
        }
        let nodes = p.nodes / t.endpoints;
        let mut eps = Vec::new();
        for e in 0..t.endpoints {
            let id = cluster.register_endpoint(&format!("{}-{e}", plan.name)).await?;
            let mut cfg = cluster.agent_config(id, &dir.path().join(format!("agent{e}")));
            cfg.seed = Some(seed.wrapping_add(e as u64));
            cfg.heartbeat = hb;
            cfg.prefetch_count = p.knobs.prefetch_count;
            cfg.executor_batching = p.knobs.executor_batching;
            cfg.advert_interval_ms = p.knobs.advert_interval_ms;
            cfg.warm_ttl_ms = p.knobs.warm_ttl_ms;
            cfg.provider.kind = t.provider;
            cfg.provider.workers_per_node = p.workers_per_node;
            cfg.provider.nodes_per_block = 1;
            cfg.provider.queue_delay = QueueDelay {
                fixed_ms: t.queue_delay_ms,
                jitter_ms: t.queue_jitter_ms,
            };
            let max_blocks = t.max_blocks.unwrap_or(nodes);
            if elastic {
                cfg.provider.init_blocks = 0;
                cfg.provider.min_blocks = 0;
            } else {
                cfg.provider.init_blocks = nodes;
                cfg.provider.min_blocks = nodes.min(max_blocks);
                cfg.tags = tags.to_vec();
            }
            cfg.provider.max_blocks = max_blocks;
            cfg.scaling.idle_timeout_ms = p.knobs.idle_timeout_ms;
            cfg.scaling.interval_ms = p.knobs.scaler_interval_ms;
            if let Some(m) = p.knobs.max_workers_per_tag {
                for tag in tags {
                    cfg.scaling.tags.insert(
                        tag.clone(),
                        TagLimits {
                            min_workers: 0,
                            max_workers: m,
                        },
                    );
                }
            }
            let agent = AgentProc::spawn(&cfg).await?;
            let mut managers = Vec::new();
            let mut node_ids = Vec::new();
            if t.provider == ProviderKind::External {
                let tag_refs: Vec<&str> = tags.iter().map(String::as_str).collect();
                for n in 0..nodes {
                    let node = format!("e{e}n{n}");
                    managers.push(Some(spawn_manager(agent.addr, &node, p.workers_per_node, &tag_refs)?));
                    node_ids.push(node);
                }
            }
            eps.push(Ep {
                id,
                cfg,
                agent: Some(agent),
                managers,
                node_ids,
            });
        }
        let fleet = Fleet {
            eps,
            down: Vec::new(),
            workers_per_node: p.workers_per_node,
            tags: tags.to_vec(),
            cluster,
            _dir: dir,
        };
        let per_ep = if elastic { 0 } else { nodes * p.workers_per_node };
        fleet.wait_ready(per_ep).await?;
        Ok(fleet)
    }

    fn client(&self) -> Client {
        self.cluster.client.clone()
    }

    fn endpoint_ids(&self) -> Vec<EndpointId> {
        self.eps.iter().map(|e| e.id).collect()
    }

    /// Waits until every endpoint is connected with `workers` idle workers.
    async fn wait_ready(&self, workers: u32) -> Result<(), BenchError> {
        let deadline = Instant::now() + READY_TIMEOUT;
        for ep in &self.eps {
            loop {
                let v = self.cluster.client.get_endpoint(ep.id).await?;
                let idle: u32 = v.workers.values().map(|w| w.idle).sum();
                if v.state == ConnectionState::Connected && idle >= workers {
                    break;
                }
                if Instant::now() > deadline {
                    return Err(BenchError::Setup(format!(
                        "endpoint {} not ready: {:?}, {idle} of {workers} workers idle",
                        ep.id, v.state
                    )));
                }
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
        Ok(())
    }

    async fn apply(&mut self, action: FaultAction, manager: u32) -> Result<String, BenchError> {
        match action {
            FaultAction::KillManager => {
                let total: usize = self.eps.iter().map(|e| e.managers.len()).sum();
                let mut idx = manager as usize;
                if idx >= total {
                    return Err(BenchError::Setup(format!("no manager {manager}")));
                }
                for (e, ep) in self.eps.iter_mut().enumerate() {
                    if idx < ep.managers.len() {
                        if let Some(mut p) = ep.managers[idx].take() {
                            p.kill();
                            self.down.push(Down::Manager(e, idx));
                        }
                        return Ok(format!("killed manager {}", ep.node_ids[idx]));
                    }
                    idx -= ep.managers.len();
                }
                unreachable!("index checked above")
            }
            FaultAction::KillAgent => {
                let ep = &mut self.eps[0];
                if let Some(mut a) = ep.agent.take() {
                    a.proc.kill();
                    self.down.push(Down::Agent(0));
                }
                Ok("killed agent 0".into())
            }
            FaultAction::Restart => match self.down.pop() {
                Some(Down::Manager(e, i)) => {
                    let ep = &mut self.eps[e];
                    let addr = ep
                        .agent
                        .as_ref()
                        .map(|a| a.addr)
                        .or_else(|| ep.cfg.listen.parse().ok())
                        .ok_or_else(|| BenchError::Setup("agent address unknown".into()))?;
                    let tags: Vec<&str> = self.tags.iter().map(String::as_str).collect();
                    ep.managers[i] = Some(spawn_manager(addr, &ep.node_ids[i], self.workers_per_node, &tags)?);
                    Ok(format!("restarted manager {}", ep.node_ids[i]))
                }
                Some(Down::Agent(e)) => {
                    let ep = &mut self.eps[e];
                    ep.agent = Some(AgentProc::spawn(&ep.cfg).await?);
                    Ok(format!("restarted agent {e}"))
                }
                None => Ok("nothing to restart".into()),
            },
        }
    }

    async fn duplicates(&self) -> u64 {
        let mut n = 0;
        for ep in &self.eps {
            if let Ok(v) = self.cluster.client.get_endpoint(ep.id).await {
                n += v.counters.duplicates;
            }
        }
        n
    }

    fn teardown(mut self) {
        for ep in &mut self.eps {
            if let Some(mut a) = ep.agent.take() {
                a.proc.terminate(Duration::from_secs(5));
            }
            for m in ep.managers.iter_mut().flatten() {
                m.kill();
            }
        }
    }
}

/// Workload inputs: a `repeat_fraction` share, chosen by a seeded shuffle,
/// carries one shared value; the rest are distinct.
pub fn make_inputs(count: u32, repeat_fraction: f64, seed: u64) -> Vec<Envelope> {
    let repeats = (repeat_fraction * count as f64).round() as usize;
    let mut idx: Vec<usize> = (0..count as usize).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut repeat = vec![false; count as usize];
    for &i in idx.iter().take(repeats) {
        repeat[i] = true;
    }
    (0..count as usize)
        .map(|i| {
            if repeat[i] {
                Envelope::raw(b"repeat".to_vec())
            } else {
                Envelope::raw(format!("input-{i}").into_bytes())
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Submitted {
    id: TaskId,
    items: u32,
}

struct Workload<'a> {
    function: FunctionId,
    endpoints: &'a [EndpointId],
    inputs: Vec<Envelope>,
    arrival: Arrival,
    rate_per_s: f64,
    retriable: bool,
    batch_size: Option<usize>,
    batch_count: Option<usize>,
}

async fn submit(client: &Client, w: Workload<'_>) -> Result<Vec<Submitted>, BenchError> {
    let mut out = Vec::new();
    let eps = w.endpoints;
    if w.batch_size.is_some() || w.batch_count.is_some() {
        let share = w.inputs.len().div_ceil(eps.len());
        for (k, chunk) in w.inputs.chunks(share.max(1)).enumerate() {
            let resp = client
                .submit_batch(&BatchRequest {
                    function_id: w.function,
                    endpoint_id: eps[k % eps.len()],
                    inputs: chunk.to_vec(),
                    batch_size: w.batch_size,
                    batch_count: w.batch_count,
                    retriable: w.retriable,
                })
                .await?;
            out.extend(resp.task_ids.iter().zip(&resp.sizes).map(|(id, n)| Submitted {
                id: *id,
                items: *n as u32,
            }));
        }
        return Ok(out);
    }
    match w.arrival {
        Arrival::Burst => {
            for (k, chunk) in w.inputs.chunks(SUBMIT_CHUNK).enumerate() {
                let resp = client
                    .submit(&SubmitRequest {
                        function_id: w.function,
                        endpoint_id: eps[k % eps.len()],
                        input: None,
                        inputs: Some(chunk.to_vec()),
                        retriable: w.retriable,
                    })
                    .await?;
                out.extend(resp.task_ids.into_iter().map(|id| Submitted { id, items: 1 }));
            }
        }
        Arrival::Uniform => {
            let mut tick = tokio::time::interval(Duration::from_secs_f64(1.0 / w.rate_per_s));
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Burst);
            let mut handles = Vec::with_capacity(w.inputs.len());
            for (k, input) in w.inputs.into_iter().enumerate() {
                tick.tick().await;
                let c = client.clone();
                let req = SubmitRequest {
                    function_id: w.function,
                    endpoint_id: eps[k % eps.len()],
                    input: Some(input),
                    inputs: None,
                    retriable: w.retriable,
                };
                handles.push(tokio::spawn(async move { c.submit(&req).await }));
            }
            for h in handles {
                let resp = h.await.map_err(|e| BenchError::Setup(e.to_string()))??;
                out.extend(resp.task_ids.into_iter().map(|id| Submitted { id, items: 1 }));
            }
        }
    }
    Ok(out)
}

/// Polls until every task is terminal or `deadline` passes. The flag is
/// set when some task did not finish.
///
/// While work is outstanding only the endpoint counters are polled, so the
/// harness stays off the coordinator's hot path during a timed run.
async fn wait_all(
    client: &Client,
    endpoints: &[EndpointId],
    ids: &[TaskId],
    deadline: Instant,
) -> Result<(Vec<TaskView>, bool), BenchError> {
    let mut views: BTreeMap<TaskId, TaskView> = BTreeMap::new();
    let mut pending: Vec<TaskId> = ids.to_vec();
    loop {
        let mut busy = false;
        for ep in endpoints {
            let v = client.get_endpoint(*ep).await?;
            busy |= v.queued > 0 || v.in_flight > 0;
        }
        if busy && Instant::now() <= deadline {
            tokio::time::sleep(IDLE_POLL).await;
            continue;
        }
        let mut still = Vec::new();
        for chunk in pending.chunks(STATUS_CHUNK) {
            let resp = client
                .status_many(&StatusRequest {
                    task_ids: chunk.to_vec(),
                    transitions: false,
                })
                .await?;
            for v in resp.tasks {
                if !v.state.is_terminal() {
                    still.push(v.task_id);
                }
                views.insert(v.task_id, v);
            }
        }
        pending = still;
        if pending.is_empty() || Instant::now() > deadline {
            break;
        }
        tokio::time::sleep(POLL).await;
    }
    let partial = !pending.is_empty();
    Ok((ids.iter().filter_map(|id| views.remove(id)).collect(), partial))
}

fn point_dir(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

/// What one workload run produced besides its rows.
struct RunResult {
    report: ExperimentReport,
    t0_us: u64,
    wall: Duration,
    fault_log: Vec<(u64, String)>,
}

async fn run_point(plan: &ExperimentPlan, p: &Point, seed: u64, out: &Path) -> Result<RunResult, BenchError> {
    let tag = normalize_tag(&plan.workload.tag).to_string();
    let mut fleet = Fleet::deploy(plan, p, seed, std::slice::from_ref(&tag)).await?;
    let function = fleet
        .cluster
        .register_function(&plan.workload.function, plan.workload.runtime, &tag, p.knobs.memoize)
        .await?;
    let client = fleet.client();
    let eps = fleet.endpoint_ids();
    let w = Workload {
        function,
        endpoints: &eps,
        inputs: make_inputs(p.count, p.knobs.memo_repeat_fraction, seed),
        arrival: plan.workload.arrival,
        rate_per_s: plan.workload.rate_per_s.unwrap_or(1.0),
        retriable: plan.workload.retriable,
        batch_size: p.knobs.batch_size,
        batch_count: p.knobs.batch_count,
    };
    let deadline_after = Duration::from_secs(plan.expect.timeout_s);
    let t0 = Instant::now();
    let t0_us = crate::now_us();
    let work = async {
        let submitted = submit(&client, w).await?;
        let ids: Vec<TaskId> = submitted.iter().map(|s| s.id).collect();
        let (views, partial) = wait_all(&client, &eps, &ids, t0 + deadline_after).await?;
        Ok::<_, BenchError>((submitted, views, partial, t0.elapsed()))
    };
    let faults = async {
        let mut log = Vec::new();
        for f in &plan.faults {
            tokio::time::sleep_until((t0 + Duration::from_millis(f.at_ms)).into()).await;
            let at = t0.elapsed().as_millis() as u64;
            let what = fleet.apply(f.action, f.manager).await?;
            tracing::info!("bench: t={at}ms {what}");
            log.push((at, what));
        }
        Ok::<_, BenchError>(log)
    };
    let (work, faults) = tokio::join!(work, faults);
    let (submitted, views, partial, wall) = work?;
    let fault_log = faults?;
    let items: BTreeMap<TaskId, u32> = submitted.iter().map(|s| (s.id, s.items)).collect();
    let rows: Vec<TaskRow> = views
        .iter()
        .map(|v| TaskRow::from_view(v, items.get(&v.task_id).copied().unwrap_or(1)))
        .collect();
    let duplicates = fleet.duplicates().await;
    fleet.teardown();
    let report = ExperimentReport::new(&plan.name, &p.name, p.param, rows, duplicates, partial);
    emit_report(&report, &point_dir(out, &p.name))?;
    Ok(RunResult {
        report,
        t0_us,
        wall,
        fault_log,
    })
}

fn conservation(plan: &ExperimentPlan, p: &Point, r: &ExperimentReport) -> Vec<Check> {
    let s = &r.summary;
    let expect_items = p.count as u64;
    let mut checks = vec![Check::new(
        format!("{} {}: conservation", plan.name, p.name),
        s.items == expect_items && !s.partial && s.succeeded + s.failed + s.lost == s.count,
        format!(
            "{} inputs in {} tasks: {} succeeded, {} failed, {} lost{}",
            s.items,
            s.count,
            s.succeeded,
            s.failed,
            s.lost,
            if s.partial { ", unfinished at deadline" } else { "" }
        ),
    )];
    if plan.workload.retriable {
        checks.push(Check::new(
            format!("{} {}: no losses", plan.name, p.name),
            s.lost == 0,
            format!("lost {}, duplicates discarded {}", s.lost, s.duplicates),
        ));
    }
    checks
}

fn fmt_series(points: &[(f64, f64)]) -> String {
    points
        .iter()
        .map(|(p, v)| format!("{p}:{v:.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Each point may exceed its predecessor by at most `noise`, up to `until`.
pub fn non_increasing(points: &[(f64, f64)], noise: f64, until: Option<f64>) -> bool {
    let pts: Vec<&(f64, f64)> = points.iter().filter(|(p, _)| until.is_none_or(|u| *p <= u)).collect();
    pts.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + noise))
}

pub fn strictly_decreasing(points: &[(f64, f64)], until: Option<f64>) -> bool {
    let pts: Vec<&(f64, f64)> = points.iter().filter(|(p, _)| until.is_none_or(|u| *p <= u)).collect();
    pts.windows(2).all(|w| w[1].1 < w[0].1)
}

/// Points at or beyond `from` lie within `within` of each other.
pub fn flat_from(points: &[(f64, f64)], from: f64, within: f64) -> bool {
    let vals: Vec<f64> = points.iter().filter(|(p, _)| *p >= from).map(|(_, v)| *v).collect();
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    vals.is_empty() || hi <= lo * (1.0 + within)
}

/// Runs a plan, writing reports under `out`.
pub async fn run_plan(plan: &ExperimentPlan, out: &Path, seed: u64) -> Result<Outcome, BenchError> {
    plan.validate()?;
    std::fs::create_dir_all(out).map_err(|e| {
        BenchError::Report(ReportError::Io {
            path: out.to_path_buf(),
            source: e,
        })
    })?;
    let mut effective = plan.clone();
    effective.seed = Some(seed);
    std::fs::write(
        out.join("plan.toml"),
        toml::to_string(&effective).map_err(|e| BenchError::Setup(e.to_string()))?,
    )?;
    let outcome = match plan.experiment {
        Experiment::Run => run_single(plan, out, seed).await?,
        Experiment::Scaling => run_scaling(plan, out, seed).await?,
        Experiment::Fault => run_fault(plan, out, seed).await?,
        Experiment::Latency => run_latency(plan, out, seed).await?,
        Experiment::Optimization => run_optimizations(plan, out, seed).await?,
        Experiment::Elasticity => run_elasticity(plan, out, seed).await?,
    };
    let summaries: Vec<_> = outcome.reports.iter().map(|r| r.summary.clone()).collect();
    write_csv(&out.join("summary.csv"), &summaries)?;
    write_csv(&out.join("checks.csv"), &outcome.checks)?;
    Ok(outcome)
}

async fn run_single(plan: &ExperimentPlan, out: &Path, seed: u64) -> Result<Outcome, BenchError> {
    let p = Point::base(plan);
    let r = run_point(plan, &p, seed, out).await?;
    let checks = conservation(plan, &p, &r.report);
    Ok(Outcome {
        reports: vec![r.report],
        checks,
    })
}

struct Trials {
    reports: Vec<ExperimentReport>,
    checks: Vec<Check>,
    completion_s: f64,
    per_item_ms: f64,
}

/// Host interference only ever adds time, so the fastest trial is the
/// least disturbed estimate of a point's cost.
fn fastest(v: &[f64]) -> f64 {
    v.iter().copied().reduce(f64::min).unwrap_or(0.0)
}

/// Runs one sweep point `sweep.trials` times on fresh deployments.
/// Runs `plan.sweep.trials` fresh deployments of every point. Trials are
/// interleaved (trial k of every point before trial k + 1) so slow drift on
/// the host spreads over all points instead of biasing one of them.
async fn run_sweep(plan: &ExperimentPlan, points: &[Point], seed: u64, out: &Path) -> Result<Vec<Trials>, BenchError> {
    let n = plan.sweep.trials.max(1);
    let mut all: Vec<Trials> = points
        .iter()
        .map(|_| Trials {
            reports: Vec::new(),
            checks: Vec::new(),
            completion_s: 0.0,
            per_item_ms: 0.0,
        })
        .collect();
    for k in 0..n {
        for (i, (p, t)) in points.iter().zip(&mut all).enumerate() {
            let mut q = p.clone();
            if n > 1 {
                q.name = format!("{}-t{k}", p.name);
            }
            let point_seed = seed.wrapping_add(100 * i as u64).wrapping_add(k as u64);
            let r = run_point(plan, &q, point_seed, out).await?;
            t.checks.extend(conservation(plan, &q, &r.report));
            t.reports.push(r.report);
        }
    }
    for t in &mut all {
        let completion: Vec<f64> = t.reports.iter().map(|r| r.summary.completion_s).collect();
        let per_item: Vec<f64> = t.reports.iter().map(|r| r.summary.per_item_ms).collect();
        t.completion_s = fastest(&completion);
        t.per_item_ms = fastest(&per_item);
    }
    Ok(all)
}

/// Splits a worker count into nodes of at most `per_node` workers.
fn layout(workers: u32, per_node: u32) -> (u32, u32) {
    let nodes = workers.div_ceil(per_node).max(1);
    (nodes, workers / nodes)
}

/// Strong mode keeps the task count fixed across the sweep; weak mode
/// gives every worker `tasks_per_worker` tasks.
pub async fn run_scaling(plan: &ExperimentPlan, out: &Path, seed: u64) -> Result<Outcome, BenchError> {
    let mut reports = Vec::new();
    let mut checks = Vec::new();
    let mut series = Vec::new();
    let mut points = Vec::new();
    for &w in &plan.sweep.workers {
        let (nodes, per_node) = layout(w, plan.topology.workers_per_node);
        let count = match plan.sweep.mode {
            ScalingMode::Strong => plan.workload.count,
            ScalingMode::Weak => w * plan.sweep.tasks_per_worker,
        };
        points.push(Point {
            name: format!("workers-{w}"),
            param: w as f64,
            nodes,
            workers_per_node: per_node,
            count,
            knobs: plan.knobs.clone(),
        });
    }
    for (p, t) in points.iter().zip(run_sweep(plan, &points, seed, out).await?) {
        checks.extend(t.checks);
        reports.extend(t.reports);
        series.push((p.param, t.completion_s));
    }
    match plan.sweep.mode {
        ScalingMode::Strong => {
            // the plateau starts at the fastest point unless the plan pins it
            let until = plan.expect.trend_until.or_else(|| {
                series
                    .iter()
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(p, _)| *p)
            });
            checks.push(Check::new(
                format!("{}: completion non-increasing until plateau", plan.name),
                non_increasing(&series, plan.expect.noise, until),
                format!(
                    "completion_s by workers {} (noise band {}, plateau from {})",
                    fmt_series(&series),
                    plan.expect.noise,
                    until.unwrap_or(0.0)
                ),
            ));
        }
        ScalingMode::Weak => {
            let vals: Vec<f64> = series.iter().map(|(_, v)| *v).collect();
            let hi = vals.iter().cloned().fold(0.0, f64::max);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            checks.push(Check::new(
                format!("{}: completion constant", plan.name),
                lo > 0.0 && hi / lo <= plan.expect.weak_spread,
                format!(
                    "completion_s by workers {}; max/min {:.3} <= {}",
                    fmt_series(&series),
                    hi / lo,
                    plan.expect.weak_spread
                ),
            ));
        }
    }
    Ok(Outcome { reports, checks })
}

#[derive(Serialize)]
struct TimelineRow {
    submit_offset_ms: f64,
    latency_ms: f64,
    state: fabric_core::TaskState,
    attempt: u32,
}

#[derive(Serialize)]
struct FaultRow {
    at_ms: u64,
    action: String,
}

/// p95 of tasks submitted in `[from_ms, to_ms)`; `None` when empty.
fn window_p95(timeline: &[(f64, f64)], from_ms: f64, to_ms: f64) -> Option<f64> {
    let lat: Vec<f64> = timeline
        .iter()
        .filter(|(t, _)| *t >= from_ms && *t < to_ms)
        .map(|(_, l)| *l)
        .collect();
    (!lat.is_empty()).then(|| percentile(&lat, 95.0))
}

/// Latency-timeline assertions around a kill/restart pair.
pub fn timeline_checks(
    name: &str,
    timeline: &[(f64, f64)],
    kill_ms: f64,
    restart_ms: f64,
    outage_factor: f64,
    recovery_factor: f64,
    recovery_within_ms: f64,
) -> Vec<Check> {
    let mut checks = Vec::new();
    let end = timeline.iter().map(|(t, _)| *t).fold(0.0, f64::max);
    let baseline = window_p95(timeline, 500.0f64.min(kill_ms / 2.0), kill_ms).unwrap_or(0.0);
    let outage = window_p95(timeline, kill_ms, restart_ms).unwrap_or(0.0);
    checks.push(Check::new(
        format!("{name}: outage latency spike"),
        baseline > 0.0 && outage >= outage_factor * baseline,
        format!("p95 baseline {baseline:.1} ms, outage {outage:.1} ms, required >= {outage_factor}x"),
    ));
    // 1 s windows from the restart; recovered once this and every later
    // window stays under the bound
    let bound = recovery_factor * baseline;
    let mut windows = Vec::new();
    let mut s = restart_ms;
    while s < end {
        windows.push((s, window_p95(timeline, s, s + 1000.0)));
        s += 1000.0;
    }
    let recovered_at = (0..windows.len())
        .find(|&i| windows[i..].iter().all(|(_, p)| p.is_none_or(|p| p <= bound)))
        .map(|i| windows[i].0 - restart_ms);
    let detail = windows
        .iter()
        .map(|(s, p)| format!("{:.0}:{:.1}", s, p.unwrap_or(0.0)))
        .collect::<Vec<_>>()
        .join(" ");
    checks.push(Check::new(
        format!("{name}: recovery after restart"),
        baseline > 0.0 && recovered_at.is_some_and(|r| r <= recovery_within_ms) && windows.len() > 1,
        format!(
            "p95 <= {bound:.1} ms from {} ms after restart (limit {recovery_within_ms} ms); windows {detail}",
            recovered_at.map_or("never".to_string(), |r| format!("{r:.0}"))
        ),
    ));
    checks
}

pub async fn run_fault(plan: &ExperimentPlan, out: &Path, seed: u64) -> Result<Outcome, BenchError> {
    let p = Point {
        name: "fault".into(),
        ..Point::base(plan)
    };
    let r = run_point(plan, &p, seed, out).await?;
    let mut checks = conservation(plan, &p, &r.report);
    let mut timeline: Vec<TimelineRow> = r
        .report
        .rows
        .iter()
        .map(|row| TimelineRow {
            submit_offset_ms: (row.submit_us as f64 - r.t0_us as f64) / 1000.0,
            latency_ms: row.latency_us as f64 / 1000.0,
            state: row.state,
            attempt: row.attempt,
        })
        .collect();
    timeline.sort_by(|a, b| a.submit_offset_ms.total_cmp(&b.submit_offset_ms));
    let dir = point_dir(out, &p.name);
    write_csv(&dir.join("timeline.csv"), &timeline)?;
    let log: Vec<FaultRow> = r
        .fault_log
        .iter()
        .map(|(at, a)| FaultRow {
            at_ms: *at,
            action: a.clone(),
        })
        .collect();
    write_csv(&dir.join("faults.csv"), &log)?;
    if let Some(max) = plan.expect.max_runtime_s {
        checks.push(Check::new(
            format!("{}: runtime", plan.name),
            r.wall.as_secs_f64() < max as f64,
            format!("{:.1} s, limit {max} s", r.wall.as_secs_f64()),
        ));
    }
    if plan.expect.timeline {
        let kill = plan.faults.iter().find(|f| f.action == FaultAction::KillManager);
        let restart = kill.and_then(|k| {
            plan.faults
                .iter()
                .find(|f| f.at_ms > k.at_ms && f.action == FaultAction::Restart)
        });
        match (kill, restart) {
            (Some(k), Some(rs)) => {
                let pts: Vec<(f64, f64)> = timeline
                    .iter()
                    .filter(|t| t.state == fabric_core::TaskState::Succeeded)
                    .map(|t| (t.submit_offset_ms, t.latency_ms))
                    .collect();
                checks.extend(timeline_checks(
                    &plan.name,
                    &pts,
                    k.at_ms as f64,
                    rs.at_ms as f64,
                    plan.expect.outage_factor,
                    plan.expect.recovery_factor,
                    plan.expect.recovery_within_ms as f64,
                ));
            }
            _ => checks.push(Check::new(
                format!("{}: timeline", plan.name),
                false,
                "timeline checks need a kill-manager followed by a restart",
            )),
        }
    }
    Ok(Outcome {
        reports: vec![r.report],
        checks,
    })
}

#[derive(Serialize)]
struct LatencyRow {
    component: &'static str,
    mean_ms: f64,
    std_ms: f64,
}

/// Submits one echo task and waits for it; returns the client round trip
/// and the task's final view.
async fn round_trip(client: &Client, f: FunctionId, ep: EndpointId, i: u32) -> Result<(f64, TaskView), BenchError> {
    let start = Instant::now();
    let resp = client
        .submit(&SubmitRequest {
            function_id: f,
            endpoint_id: ep,
            input: Some(Envelope::raw(format!("echo-{i}").into_bytes())),
            inputs: None,
            retriable: true,
        })
        .await?;
    let id = resp.task_ids[0];
    client.result(id, Duration::from_secs(30)).await?;
    let rt = start.elapsed().as_secs_f64() * 1000.0;
    Ok((rt, client.status(id).await?))
}

/// Sequential warm echo round trips after one throwaway call, then one
/// cold call once the warm pool has been reaped.
pub async fn run_latency(plan: &ExperimentPlan, out: &Path, seed: u64) -> Result<Outcome, BenchError> {
    let p = Point::base(plan);
    let tag = normalize_tag(&plan.workload.tag).to_string();
    let fleet = Fleet::deploy(plan, &p, seed, std::slice::from_ref(&tag)).await?;
    let client = fleet.client();
    let ep = fleet.eps[0].id;
    let f = fleet
        .cluster
        .register_function(&plan.workload.function, plan.workload.runtime, &tag, false)
        .await?;
    round_trip(&client, f, ep, 0).await?;
    let n = plan.sweep.repetitions.max(1);
    let mut warm = Vec::new();
    for i in 0..n {
        warm.push(round_trip(&client, f, ep, i + 1).await?);
    }
    // flush the warm pool: wait for the ttl to reap every worker
    let deadline = Instant::now() + Duration::from_millis(p.knobs.warm_ttl_ms) + READY_TIMEOUT;
    loop {
        let v = client.get_endpoint(ep).await?;
        if v.workers.values().all(|w| w.workers == 0) {
            break;
        }
        if Instant::now() > deadline {
            return Err(BenchError::Setup("warm pool was not reaped".into()));
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    let cold = round_trip(&client, f, ep, n + 1).await?;
    fleet.teardown();

    let warm_rows: Vec<TaskRow> = warm.iter().map(|(_, v)| TaskRow::from_view(v, 1)).collect();
    let warm_report = ExperimentReport::new(&plan.name, "warm", 0.0, warm_rows, 0, false);
    emit_report(&warm_report, &point_dir(out, "warm"))?;
    let cold_report = ExperimentReport::new(&plan.name, "cold", 1.0, vec![TaskRow::from_view(&cold.1, 1)], 0, false);
    emit_report(&cold_report, &point_dir(out, "cold"))?;

    let comp = |f: fn(&TaskView) -> Duration| -> Vec<f64> {
        warm.iter().map(|(_, v)| f(v).as_secs_f64() * 1000.0).collect()
    };
    let t_s = comp(|v| v.timing.t_s);
    let t_f = comp(|v| v.timing.t_f);
    let t_e = comp(|v| v.timing.t_e);
    let t_w = comp(|v| v.timing.t_w);
    let total: Vec<f64> = warm.iter().map(|(rt, _)| *rt).collect();
    let rows = [
        ("t_s", &t_s),
        ("t_f", &t_f),
        ("t_e", &t_e),
        ("t_w", &t_w),
        ("total", &total),
    ]
    .iter()
    .map(|(c, v)| LatencyRow {
        component: c,
        mean_ms: mean(v),
        std_ms: std_dev(v),
    })
    .collect::<Vec<_>>();
    write_csv(&out.join("latency.csv"), &rows)?;

    let positive = warm.iter().all(|(_, v)| {
        let t = v.timing;
        !t.t_s.is_zero() && !t.t_f.is_zero() && !t.t_e.is_zero() && !t.t_w.is_zero()
    });
    let warm_total = mean(&total);
    let mut checks = vec![
        Check::new(
            format!("{}: components positive", plan.name),
            positive,
            format!(
                "means t_s {:.3} t_f {:.3} t_e {:.3} t_w {:.4} ms over {n} warm round trips",
                mean(&t_s),
                mean(&t_f),
                mean(&t_e),
                mean(&t_w)
            ),
        ),
        Check::new(
            format!("{}: t_w small", plan.name),
            mean(&t_w) < plan.expect.tw_fraction * warm_total,
            format!(
                "t_w {:.4} ms vs total {warm_total:.3} ms (limit {}%)",
                mean(&t_w),
                plan.expect.tw_fraction * 100.0
            ),
        ),
        Check::new(
            format!("{}: cold slower than warm", plan.name),
            cold.0 > warm_total,
            format!("cold {:.3} ms, warm mean {warm_total:.3} ms", cold.0),
        ),
    ];
    checks.extend(conservation(
        plan,
        &Point {
            count: n,
            name: "warm".into(),
            ..p.clone()
        },
        &warm_report,
    ));
    Ok(Outcome {
        reports: vec![warm_report, cold_report],
        checks,
    })
}

pub async fn run_optimizations(plan: &ExperimentPlan, out: &Path, seed: u64) -> Result<Outcome, BenchError> {
    let knob = plan
        .sweep
        .knob
        .ok_or_else(|| BenchError::Setup("sweep.knob missing".into()))?;
    let base = Point::base(plan);
    let points: Vec<Point> = match knob {
        Knob::Memo => plan
            .sweep
            .memo_fractions
            .iter()
            .map(|&f| {
                let mut p = base.clone();
                p.name = format!("repeat-{:.0}", f * 100.0);
                p.param = f;
                p.knobs.memoize = true;
                p.knobs.memo_repeat_fraction = f;
                p
            })
            .collect(),
        Knob::Prefetch => plan
            .sweep
            .prefetch
            .iter()
            .map(|&n| {
                let mut p = base.clone();
                p.name = format!("prefetch-{n}");
                p.param = n as f64;
                p.knobs.prefetch_count = Some(n);
                p
            })
            .collect(),
        Knob::BatchSize => plan
            .sweep
            .batch_sizes
            .iter()
            .map(|&b| {
                let mut p = base.clone();
                p.name = format!("batch-{b}");
                p.param = b as f64;
                p.knobs.batch_size = Some(b);
                if plan.sweep.single_batch {
                    p.count = b as u32;
                }
                p
            })
            .collect(),
        Knob::ExecutorBatching => plan
            .sweep
            .executor_batching
            .iter()
            .map(|&on| {
                let mut p = base.clone();
                p.name = if on { "executor-batched".into() } else { "executor-unbatched".into() };
                p.param = if on { 1.0 } else { 0.0 };
                p.knobs.executor_batching = on;
                p
            })
            .collect(),
    };
    let mut reports = Vec::new();
    let mut checks = Vec::new();
    let mut completion = Vec::new();
    let mut per_item = Vec::new();
    for (p, t) in points.iter().zip(run_sweep(plan, &points, seed, out).await?) {
        checks.extend(t.checks);
        reports.extend(t.reports);
        completion.push((p.param, t.completion_s));
        per_item.push((p.param, t.per_item_ms));
    }
    let e = &plan.expect;
    match knob {
        Knob::Memo => {
            checks.push(Check::new(
                format!("{}: completion strictly decreasing", plan.name),
                strictly_decreasing(&completion, None),
                format!("completion_s by repeat fraction {}", fmt_series(&completion)),
            ));
            if let (Some(first), Some(last), Some(max)) = (completion.first(), completion.last(), e.max_ratio) {
                let ratio = last.1 / first.1;
                checks.push(Check::new(
                    format!("{}: all-repeat ratio", plan.name),
                    ratio <= max,
                    format!("time({})/time({}) = {ratio:.3}, limit {max}", last.0, first.0),
                ));
            }
        }
        Knob::Prefetch => checks.push(Check::new(
            format!("{}: completion non-increasing", plan.name),
            non_increasing(&completion, e.noise, e.trend_until),
            format!(
                "completion_s by prefetch {} (noise band {}, up to {:?})",
                fmt_series(&completion),
                e.noise,
                e.trend_until
            ),
        )),
        Knob::BatchSize => {
            checks.push(Check::new(
                format!("{}: per-task latency strictly decreasing", plan.name),
                strictly_decreasing(&per_item, e.trend_until),
                format!("per_item_ms by batch size {} (up to {:?})", fmt_series(&per_item), e.trend_until),
            ));
            if let Some(from) = e.flat_from {
                checks.push(Check::new(
                    format!("{}: per-task latency flat", plan.name),
                    flat_from(&per_item, from, e.flat_within),
                    format!("sizes >= {from} within {}", e.flat_within),
                ));
            }
        }
        Knob::ExecutorBatching => {
            let on = completion.iter().find(|(p, _)| *p == 1.0);
            let off = completion.iter().find(|(p, _)| *p == 0.0);
            if let (Some(on), Some(off), Some(max)) = (on, off, e.max_ratio) {
                let ratio = on.1 / off.1;
                checks.push(Check::new(
                    format!("{}: batched/unbatched ratio", plan.name),
                    ratio <= max,
                    format!("{:.3} s / {:.3} s = {ratio:.3}, limit {max}", on.1, off.1),
                ));
            }
        }
    }
    Ok(Outcome { reports, checks })
}

#[derive(Serialize)]
struct SampleRow {
    t_ms: u64,
    tag: String,
    workers: u32,
}

/// Periodic waves of task classes against an elastic pool, with worker
/// counts sampled from the endpoint every 100 ms.
pub async fn run_elasticity(plan: &ExperimentPlan, out: &Path, seed: u64) -> Result<Outcome, BenchError> {
    let p = Point::base(plan);
    let w = &plan.waves;
    let tags: Vec<String> = w.classes.iter().map(|c| normalize_tag(&c.tag).to_string()).collect();
    let fleet = Fleet::deploy(plan, &p, seed, &tags).await?;
    let client = fleet.client();
    let ep = fleet.eps[0].id;
    let mut functions = Vec::new();
    for (c, tag) in w.classes.iter().zip(&tags) {
        functions.push(
            fleet
                .cluster
                .register_function(&c.function, plan.workload.runtime, tag, false)
                .await?,
        );
    }
    let t0 = Instant::now();
    let (stop_tx, mut stop_rx) = tokio::sync::watch::channel(false);
    let sampler = {
        let client = client.clone();
        tokio::spawn(async move {
            let mut samples: Vec<(u64, BTreeMap<String, u32>)> = Vec::new();
            let mut tick = tokio::time::interval(Duration::from_millis(100));
            loop {
                tokio::select! {
                    _ = tick.tick() => {}
                    _ = stop_rx.changed() => break,
                }
                if let Ok(v) = client.get_endpoint(ep).await {
                    let counts = v.workers.iter().map(|(t, w)| (t.clone(), w.workers)).collect();
                    samples.push((t0.elapsed().as_millis() as u64, counts));
                }
            }
            samples
        })
    };
    let mut submitted = Vec::new();
    let mut wave_starts = Vec::new();
    for k in 0..w.count {
        tokio::time::sleep_until((t0 + Duration::from_millis(k as u64 * w.interval_ms)).into()).await;
        wave_starts.push(t0.elapsed().as_millis() as u64);
        for (c, f) in w.classes.iter().zip(&functions) {
            let inputs = (0..c.per_wave)
                .map(|i| Envelope::raw(format!("wave-{k}-{i}").into_bytes()))
                .collect();
            let resp = client
                .submit(&SubmitRequest {
                    function_id: *f,
                    endpoint_id: ep,
                    input: None,
                    inputs: Some(inputs),
                    retriable: plan.workload.retriable,
                })
                .await?;
            submitted.extend(resp.task_ids);
        }
    }
    let end_ms = w.count as u64 * w.interval_ms;
    tokio::time::sleep_until((t0 + Duration::from_millis(end_ms)).into()).await;
    let _ = stop_tx.send(true);
    let samples = sampler.await.map_err(|e| BenchError::Setup(e.to_string()))?;
    let (views, partial) = wait_all(&client, &[ep], &submitted, Instant::now() + Duration::from_secs(plan.expect.timeout_s)).await?;
    let duplicates = fleet.duplicates().await;
    fleet.teardown();

    let rows: Vec<TaskRow> = views.iter().map(|v| TaskRow::from_view(v, 1)).collect();
    let report = ExperimentReport::new(&plan.name, "waves", 0.0, rows, duplicates, partial);
    emit_report(&report, &point_dir(out, "waves"))?;
    let sample_rows: Vec<SampleRow> = samples
        .iter()
        .flat_map(|(t, m)| {
            tags.iter().map(move |tag| SampleRow {
                t_ms: *t,
                tag: tag.clone(),
                workers: m.get(tag).copied().unwrap_or(0),
            })
        })
        .collect();
    write_csv(&out.join("elasticity.csv"), &sample_rows)?;

    let mut checks = conservation(
        plan,
        &Point {
            count: w.count * w.classes.iter().map(|c| c.per_wave).sum::<u32>(),
            name: "waves".into(),
            ..p.clone()
        },
        &report,
    );
    let reach_limit = plan.knobs.scaler_interval_ms;
    for (k, &start) in wave_starts.iter().enumerate() {
        let stop = wave_starts.get(k + 1).copied().unwrap_or(end_ms);
        let window: Vec<&(u64, BTreeMap<String, u32>)> =
            samples.iter().filter(|(t, _)| *t >= start && *t < stop).collect();
        let mut ok = true;
        let mut detail = Vec::new();
        for (c, tag) in w.classes.iter().zip(&tags) {
            let count = |s: &BTreeMap<String, u32>| s.get(tag).copied().unwrap_or(0);
            let max = window.iter().map(|(_, s)| count(s)).max().unwrap_or(0);
            let reached = window
                .iter()
                .find(|(_, s)| count(s) >= c.expect_workers)
                .map(|(t, _)| t - start);
            let last = window.last().map_or(0, |(_, s)| count(s));
            ok &= max == c.expect_workers && reached.is_some_and(|r| r <= reach_limit) && last == 0;
            detail.push(format!(
                "{tag}: max {max} (want {}), reached in {} ms, final {last}",
                c.expect_workers,
                reached.map_or("-".to_string(), |r| r.to_string())
            ));
        }
        checks.push(Check::new(
            format!("{}: wave {k}", plan.name),
            ok,
            format!("{}; reach limit {reach_limit} ms", detail.join("; ")),
        ));
    }
    Ok(Outcome {
        reports: vec![report],
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_repeat_the_requested_share() {
        for (f, want) in [(0.0, 0), (0.25, 100), (1.0, 400)] {
            let inputs = make_inputs(400, f, 3);
            let repeats = inputs.iter().filter(|e| e.payload == b"repeat").count();
            assert_eq!(repeats, want);
        }
        assert_eq!(make_inputs(50, 0.5, 9), make_inputs(50, 0.5, 9));
    }

    #[test]
    fn trend_helpers() {
        let s = [(1.0, 10.0), (2.0, 5.0), (4.0, 5.4), (8.0, 5.0), (16.0, 9.0)];
        assert!(non_increasing(&s, 0.10, Some(8.0)));
        assert!(!non_increasing(&s, 0.10, None));
        assert!(!non_increasing(&s, 0.05, Some(8.0)));
        assert!(strictly_decreasing(&s, Some(2.0)));
        assert!(!strictly_decreasing(&s, Some(4.0)));
        assert!(flat_from(&s[..4], 2.0, 0.10));
        assert!(!flat_from(&s[..4], 2.0, 0.05));
        assert!(!flat_from(&s, 2.0, 0.10));
    }

    #[test]
    fn fastest_trial() {
        assert_eq!(fastest(&[3.0, 1.0, 2.0]), 1.0);
        assert_eq!(fastest(&[0.5]), 0.5);
        assert_eq!(fastest(&[]), 0.0);
    }

    #[test]
    fn layout_fills_nodes_of_eight() {
        assert_eq!(layout(1, 8), (1, 1));
        assert_eq!(layout(8, 8), (1, 8));
        assert_eq!(layout(16, 8), (2, 8));
        assert_eq!(layout(32, 8), (4, 8));
    }

    #[test]
    fn timeline_spike_and_recovery() {
        // 100 ms baseline, 400 ms while one manager is down, back at 3 s
        let mut t = Vec::new();
        for i in 0..120 {
            let at = i as f64 * 100.0;
            let lat = if (2000.0..4000.0).contains(&at) { 400.0 } else if (4000.0..5000.0).contains(&at) { 250.0 } else { 100.0 };
            t.push((at, lat));
        }
        let c = timeline_checks("x", &t, 2000.0, 4000.0, 2.0, 1.5, 5000.0);
        assert!(c.iter().all(|c| c.pass), "{c:?}");
        let c = timeline_checks("x", &t, 2000.0, 4000.0, 5.0, 1.5, 500.0);
        assert!(c.iter().all(|c| !c.pass), "{c:?}");
    }
}
