//! Pilot-job providers: how the agent obtains blocks of nodes, each running
//! one manager per node.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ProviderConfig, ProviderKind, QueueDelay};

pub type BlockId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BlockStatus {
    Pending,
    Running,
    Done,
    Failed,
}

impl BlockStatus {
    pub fn is_final(self) -> bool {
        matches!(self, BlockStatus::Done | BlockStatus::Failed)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("this provider does not provision blocks")]
    Unsupported,
    #[error("block limit of {0} reached")]
    LimitReached(u32),
    #[error("spawning manager failed: {0}")]
    Spawn(#[from] std::io::Error),
}

/// How to start the manager on one node. The provider appends
/// `--node-id <id> --block-id <block>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
    /// Prefix for node ids.
    pub node_prefix: String,
}

pub trait Provider: Send {
    fn submit_block(&mut self, nodes: u32, cmd: &LaunchCommand) -> Result<BlockId, ProviderError>;
    /// Current status. Moves only forward: PENDING, RUNNING, then DONE or FAILED.
    fn status(&mut self, id: BlockId) -> Option<BlockStatus>;
    /// Idempotent.
    fn cancel(&mut self, id: BlockId);
    /// Advances time-driven state, e.g. launches blocks whose queue wait is over.
    fn poll(&mut self, now: Instant);
    /// Blocks not in a final state.
    fn live_blocks(&mut self) -> Vec<(BlockId, BlockStatus)>;
}

struct LocalBlock {
    children: Vec<Child>,
    status: BlockStatus,
}

/// Runs managers as child processes of the agent, started immediately.
#[derive(Default)]
pub struct LocalProvider {
    blocks: BTreeMap<BlockId, LocalBlock>,
    next: BlockId,
}

fn spawn_manager(cmd: &LaunchCommand, block: BlockId, node: u32) -> std::io::Result<Child> {
    use std::os::unix::process::CommandExt;
    let mut c = Command::new(&cmd.program);
    c.args(&cmd.args)
        .arg("--node-id")
        .arg(format!("{}b{block}n{node}", cmd.node_prefix))
        .arg("--block-id")
        .arg(block.to_string())
        .stdin(Stdio::null());
    // SAFETY: prctl is async-signal-safe.
    unsafe {
        c.pre_exec(|| {
            if libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL as libc::c_ulong, 0, 0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
    c.spawn()
}

impl LocalProvider {
    fn launch(&mut self, id: BlockId, nodes: u32, cmd: &LaunchCommand) -> Result<(), std::io::Error> {
        let mut children = Vec::new();
        for n in 0..nodes {
            match spawn_manager(cmd, id, n) {
                Ok(c) => children.push(c),
                Err(e) => {
                    for mut c in children {
                        let _ = c.kill();
                        let _ = c.wait();
                    }
                    self.blocks.insert(
                        id,
                        LocalBlock {
                            children: Vec::new(),
                            status: BlockStatus::Failed,
                        },
                    );
                    return Err(e);
                }
            }
        }
        self.blocks.insert(
            id,
            LocalBlock {
                children,
                status: BlockStatus::Running,
            },
        );
        Ok(())
    }

    fn reserve(&mut self) -> BlockId {
        self.next += 1;
        self.next
    }
}

impl Provider for LocalProvider {
    fn submit_block(&mut self, nodes: u32, cmd: &LaunchCommand) -> Result<BlockId, ProviderError> {
        let id = self.reserve();
        self.launch(id, nodes, cmd)?;
        Ok(id)
    }

    fn status(&mut self, id: BlockId) -> Option<BlockStatus> {
        let b = self.blocks.get_mut(&id)?;
        if b.status == BlockStatus::Running {
            b.children.retain_mut(|c| !matches!(c.try_wait(), Ok(Some(_))));
            if b.children.is_empty() {
                b.status = BlockStatus::Done;
            }
        }
        Some(b.status)
    }

    fn cancel(&mut self, id: BlockId) {
        if let Some(b) = self.blocks.get_mut(&id) {
            for c in &mut b.children {
                let _ = c.kill();
                let _ = c.wait();
            }
            b.children.clear();
            if !b.status.is_final() {
                b.status = BlockStatus::Done;
            }
        }
    }

    fn poll(&mut self, _now: Instant) {}

    fn live_blocks(&mut self) -> Vec<(BlockId, BlockStatus)> {
        let ids: Vec<BlockId> = self.blocks.keys().copied().collect();
        ids.into_iter()
            .filter_map(|id| self.status(id).map(|s| (id, s)))
            .filter(|(_, s)| !s.is_final())
            .collect()
    }
}

impl Drop for LocalProvider {
    fn drop(&mut self) {
        let ids: Vec<BlockId> = self.blocks.keys().copied().collect();
        for id in ids {
            self.cancel(id);
        }
    }
}

struct Queued {
    nodes: u32,
    cmd: LaunchCommand,
    launch_at: Instant,
}

/// Local managers after a simulated batch-queue wait of
/// `fixed_ms + uniform[0, jitter_ms]`.
pub struct SimulatedBatchProvider {
    local: LocalProvider,
    queued: BTreeMap<BlockId, Queued>,
    cancelled: BTreeMap<BlockId, ()>,
    delay: QueueDelay,
    rng: ChaCha8Rng,
    clock: fn() -> Instant,
}

impl SimulatedBatchProvider {
    pub fn new(delay: QueueDelay, seed: u64) -> Self {
        Self::with_clock(delay, seed, Instant::now)
    }

    /// Uses `clock` for submission times, so tests can control the wait.
    pub fn with_clock(delay: QueueDelay, seed: u64, clock: fn() -> Instant) -> Self {
        SimulatedBatchProvider {
            local: LocalProvider::default(),
            queued: BTreeMap::new(),
            cancelled: BTreeMap::new(),
            delay,
            rng: ChaCha8Rng::seed_from_u64(seed),
            clock,
        }
    }

    /// Queue wait drawn for the next block.
    fn draw(&mut self) -> Duration {
        let jitter = if self.delay.jitter_ms > 0 {
            self.rng.random_range(0..=self.delay.jitter_ms)
        } else {
            0
        };
        Duration::from_millis(self.delay.fixed_ms + jitter)
    }
}

impl Provider for SimulatedBatchProvider {
    fn submit_block(&mut self, nodes: u32, cmd: &LaunchCommand) -> Result<BlockId, ProviderError> {
        let id = self.local.reserve();
        let wait = self.draw();
        self.queued.insert(
            id,
            Queued {
                nodes,
                cmd: cmd.clone(),
                launch_at: (self.clock)() + wait,
            },
        );
        Ok(id)
    }

    fn status(&mut self, id: BlockId) -> Option<BlockStatus> {
        if self.queued.contains_key(&id) {
            return Some(BlockStatus::Pending);
        }
        if self.cancelled.contains_key(&id) {
            return Some(BlockStatus::Done);
        }
        self.local.status(id)
    }

    fn cancel(&mut self, id: BlockId) {
        if self.queued.remove(&id).is_some() {
            self.cancelled.insert(id, ());
        }
        self.local.cancel(id);
    }

    fn poll(&mut self, now: Instant) {
        let due: Vec<BlockId> = self
            .queued
            .iter()
            .filter(|(_, q)| q.launch_at <= now)
            .map(|(id, _)| *id)
            .collect();
        for id in due {
            let q = self.queued.remove(&id).expect("listed above");
            if let Err(e) = self.local.launch(id, q.nodes, &q.cmd) {
                tracing::error!("simulated batch: block {id} failed to launch: {e}");
            }
        }
    }

    fn live_blocks(&mut self) -> Vec<(BlockId, BlockStatus)> {
        let mut out: Vec<_> = self.queued.keys().map(|id| (*id, BlockStatus::Pending)).collect();
        out.extend(self.local.live_blocks());
        out
    }
}

/// Managers are started by someone else and connect on their own.
pub struct ExternalProvider;

impl Provider for ExternalProvider {
    fn submit_block(&mut self, _nodes: u32, _cmd: &LaunchCommand) -> Result<BlockId, ProviderError> {
        Err(ProviderError::Unsupported)
    }

    fn status(&mut self, _id: BlockId) -> Option<BlockStatus> {
        None
    }

    fn cancel(&mut self, _id: BlockId) {}

    fn poll(&mut self, _now: Instant) {}

    fn live_blocks(&mut self) -> Vec<(BlockId, BlockStatus)> {
        Vec::new()
    }
}

pub fn from_config(cfg: &ProviderConfig, seed: u64) -> Box<dyn Provider> {
    match cfg.kind {
        ProviderKind::Local => Box::new(LocalProvider::default()),
        ProviderKind::SimulatedBatch => Box::new(SimulatedBatchProvider::new(cfg.queue_delay, seed)),
        ProviderKind::External => Box::new(ExternalProvider),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sleeper() -> LaunchCommand {
        LaunchCommand {
            program: PathBuf::from("/bin/sh"),
            args: vec!["-c".into(), "sleep 30".into(), "sh".into()],
            node_prefix: "t".into(),
        }
    }

    #[test]
    fn local_block_lifecycle() {
        let mut p = LocalProvider::default();
        let id = p.submit_block(2, &sleeper()).unwrap();
        assert_eq!(p.status(id), Some(BlockStatus::Running));
        assert_eq!(p.live_blocks(), vec![(id, BlockStatus::Running)]);
        p.cancel(id);
        p.cancel(id);
        assert_eq!(p.status(id), Some(BlockStatus::Done));
        assert!(p.live_blocks().is_empty());
    }

    #[test]
    fn local_block_finishes_when_managers_exit() {
        let mut p = LocalProvider::default();
        let cmd = LaunchCommand {
            program: PathBuf::from("/bin/sh"),
            args: vec!["-c".into(), "exit 0".into(), "sh".into()],
            node_prefix: "t".into(),
        };
        let id = p.submit_block(1, &cmd).unwrap();
        let deadline = Instant::now() + Duration::from_secs(5);
        while p.status(id) != Some(BlockStatus::Done) {
            assert!(Instant::now() < deadline);
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    #[test]
    fn spawn_failure_marks_block_failed() {
        let mut p = LocalProvider::default();
        let cmd = LaunchCommand {
            program: PathBuf::from("/nonexistent/manager"),
            args: vec![],
            node_prefix: "t".into(),
        };
        assert!(p.submit_block(1, &cmd).is_err());
        assert_eq!(p.status(1), Some(BlockStatus::Failed));
    }

    #[test]
    fn simulated_batch_waits_then_launches() {
        let delay = QueueDelay {
            fixed_ms: 10_000,
            jitter_ms: 0,
        };
        let mut p = SimulatedBatchProvider::new(delay, 1);
        let t0 = Instant::now();
        let id = p.submit_block(1, &sleeper()).unwrap();
        p.poll(t0 + Duration::from_millis(9_000));
        assert_eq!(p.status(id), Some(BlockStatus::Pending));
        p.poll(t0 + Duration::from_millis(10_100));
        assert_eq!(p.status(id), Some(BlockStatus::Running));
        p.cancel(id);
        assert_eq!(p.status(id), Some(BlockStatus::Done));
    }

    #[test]
    fn cancelled_pending_block_never_launches() {
        let mut p = SimulatedBatchProvider::new(QueueDelay { fixed_ms: 50, jitter_ms: 0 }, 1);
        let id = p.submit_block(1, &sleeper()).unwrap();
        p.cancel(id);
        p.cancel(id);
        p.poll(Instant::now() + Duration::from_secs(60));
        assert_eq!(p.status(id), Some(BlockStatus::Done));
        assert!(p.live_blocks().is_empty());
    }

    #[test]
    fn jitter_is_seeded_and_bounded() {
        let delay = QueueDelay {
            fixed_ms: 100,
            jitter_ms: 50,
        };
        let mut a = SimulatedBatchProvider::new(delay, 7);
        let mut b = SimulatedBatchProvider::new(delay, 7);
        for _ in 0..100 {
            let (x, y) = (a.draw(), b.draw());
            assert_eq!(x, y);
            assert!(x >= Duration::from_millis(100) && x <= Duration::from_millis(150));
        }
    }
}
