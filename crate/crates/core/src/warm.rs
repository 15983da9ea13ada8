//! Warm pool reaping.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkerState {
    Starting,
    Idle,
    Busy,
    Draining,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmPoolPolicy {
    #[serde(rename = "ttl_ms", with = "crate::lifecycle::dur_ms")]
    pub ttl: Duration,
    /// Upper bound on IDLE workers kept per tag.
    #[serde(default)]
    pub max_warm_per_tag: Option<u32>,
    /// Per-tag minimum worker counts that reaping never goes below.
    #[serde(default)]
    pub pins: BTreeMap<String, u32>,
}

impl Default for WarmPoolPolicy {
    fn default() -> Self {
        WarmPoolPolicy {
            ttl: Duration::from_secs(300),
            max_warm_per_tag: None,
            pins: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerView<'a, K> {
    pub id: K,
    pub tag: &'a str,
    pub state: WorkerState,
    /// When the worker last entered IDLE.
    pub warm_since_us: u64,
}

/// IDLE workers to terminate now, oldest first within a tag.
///
/// A worker is reaped when it has been idle longer than the ttl, or when its
/// tag holds more idle workers than `max_warm_per_tag`. Pins keep the live
/// count of a tag at or above its minimum.
pub fn reap_warm<K: Clone>(workers: &[WorkerView<'_, K>], policy: &WarmPoolPolicy, now_us: u64) -> Vec<K> {
    let ttl = policy.ttl.as_micros() as u64;
    let mut by_tag: BTreeMap<&str, (u32, Vec<&WorkerView<'_, K>>)> = BTreeMap::new();
    for w in workers {
        if w.state == WorkerState::Dead {
            continue;
        }
        let e = by_tag.entry(w.tag).or_default();
        e.0 += 1;
        if w.state == WorkerState::Idle {
            e.1.push(w);
        }
    }
    let mut out = Vec::new();
    for (tag, (mut live, mut idle)) in by_tag {
        idle.sort_by_key(|w| w.warm_since_us);
        let pin = policy.pins.get(tag).copied().unwrap_or(0);
        let mut idle_left = idle.len() as u32;
        for w in idle {
            if live <= pin {
                break;
            }
            let expired = now_us.saturating_sub(w.warm_since_us) > ttl;
            let excess = policy.max_warm_per_tag.is_some_and(|m| idle_left > m);
            if expired || excess {
                out.push(w.id.clone());
                live -= 1;
                idle_left -= 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const S: u64 = 1_000_000;

    fn w(id: u32, tag: &str, state: WorkerState, since: u64) -> WorkerView<'_, u32> {
        WorkerView {
            id,
            tag,
            state,
            warm_since_us: since,
        }
    }

    #[test]
    fn idle_past_ttl_is_reaped() {
        let p = WarmPoolPolicy::default();
        let ws = [w(1, "a", WorkerState::Idle, 0), w(2, "a", WorkerState::Idle, 100 * S)];
        assert_eq!(reap_warm(&ws, &p, 301 * S), vec![1]);
        assert!(reap_warm(&ws, &p, 300 * S).is_empty());
    }

    #[test]
    fn busy_and_starting_are_untouched() {
        let p = WarmPoolPolicy::default();
        let ws = [
            w(1, "a", WorkerState::Busy, 0),
            w(2, "a", WorkerState::Starting, 0),
            w(3, "a", WorkerState::Draining, 0),
        ];
        assert!(reap_warm(&ws, &p, 400 * S).is_empty());
    }

    #[test]
    fn pins_hold_minimum() {
        let mut p = WarmPoolPolicy::default();
        p.pins.insert("a".into(), 2);
        let ws = [
            w(1, "a", WorkerState::Idle, 0),
            w(2, "a", WorkerState::Idle, 0),
            w(3, "a", WorkerState::Idle, 0),
            w(4, "b", WorkerState::Idle, 0),
        ];
        assert_eq!(reap_warm(&ws, &p, 1000 * S), vec![1, 4]);
    }

    #[test]
    fn busy_workers_count_toward_pin() {
        let mut p = WarmPoolPolicy::default();
        p.pins.insert("a".into(), 1);
        let ws = [w(1, "a", WorkerState::Busy, 0), w(2, "a", WorkerState::Idle, 0)];
        assert_eq!(reap_warm(&ws, &p, 1000 * S), vec![2]);
    }

    #[test]
    fn max_warm_trims_oldest_idle() {
        let p = WarmPoolPolicy {
            max_warm_per_tag: Some(1),
            ..WarmPoolPolicy::default()
        };
        let ws = [
            w(1, "a", WorkerState::Idle, 5 * S),
            w(2, "a", WorkerState::Idle, 1 * S),
            w(3, "a", WorkerState::Idle, 9 * S),
        ];
        assert_eq!(reap_warm(&ws, &p, 10 * S), vec![2, 1]);
    }
}
