//! Peer liveness from last-seen timestamps.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeartbeatConfig {
    #[serde(rename = "interval_ms", with = "crate::lifecycle::dur_ms")]
    pub interval: Duration,
    pub miss_threshold: u32,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        HeartbeatConfig {
            interval: Duration::from_secs(1),
            miss_threshold: 3,
        }
    }
}

impl HeartbeatConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.interval.is_zero() {
            return Err("heartbeat interval must be positive");
        }
        if self.miss_threshold == 0 {
            return Err("miss threshold must be at least 1");
        }
        Ok(())
    }

    /// Silence longer than this marks a peer lost.
    pub fn timeout(&self) -> Duration {
        self.interval * self.miss_threshold
    }

    pub fn is_lost(&self, last_seen_us: u64, now_us: u64) -> bool {
        now_us.saturating_sub(last_seen_us) as u128 > self.timeout().as_micros()
    }
}

/// Peers whose silence exceeds `interval * miss_threshold`.
pub fn lost_peers<'a, K, I>(last_seen: I, now_us: u64, cfg: &HeartbeatConfig) -> Vec<K>
where
    K: Clone + 'a,
    I: IntoIterator<Item = (&'a K, &'a u64)>,
{
    last_seen
        .into_iter()
        .filter(|(_, seen)| cfg.is_lost(**seen, now_us))
        .map(|(k, _)| k.clone())
        .collect()
}

/// Liveness map for one process. Once a peer is reported lost it stays lost
/// until a frame from it is observed again.
#[derive(Debug, Clone)]
pub struct Liveness<K: Ord> {
    cfg: HeartbeatConfig,
    peers: BTreeMap<K, (u64, bool)>,
}

impl<K: Ord + Clone> Liveness<K> {
    pub fn new(cfg: HeartbeatConfig) -> Self {
        Liveness {
            cfg,
            peers: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &HeartbeatConfig {
        &self.cfg
    }

    /// Records inbound traffic from `peer`.
    pub fn touch(&mut self, peer: K, now_us: u64) {
        let e = self.peers.entry(peer).or_insert((now_us, false));
        e.0 = e.0.max(now_us);
        e.1 = false;
    }

    pub fn remove(&mut self, peer: &K) {
        self.peers.remove(peer);
    }

    pub fn is_lost(&self, peer: &K) -> bool {
        self.peers.get(peer).is_some_and(|(_, lost)| *lost)
    }

    pub fn last_seen(&self, peer: &K) -> Option<u64> {
        self.peers.get(peer).map(|(t, _)| *t)
    }

    /// Marks newly silent peers lost and returns only those.
    pub fn scan(&mut self, now_us: u64) -> Vec<K> {
        let mut out = Vec::new();
        for (k, (seen, lost)) in self.peers.iter_mut() {
            if !*lost && self.cfg.is_lost(*seen, now_us) {
                *lost = true;
                out.push(k.clone());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }
}
