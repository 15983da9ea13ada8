//! Block-level elasticity decisions.
//!
//! Scale-up compares per-tag demand (capped at each tag's `max_workers`)
//! with the free slots the endpoint already has or has requested. Scale-down
//! retires managers that have had nothing to do for longer than the idle
//! timeout, keeping at least `min_blocks` worth of managers.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagLimits {
    #[serde(default)]
    pub min_workers: u32,
    #[serde(default = "TagLimits::unbounded")]
    pub max_workers: u32,
}

impl TagLimits {
    fn unbounded() -> u32 {
        u32::MAX
    }
}

impl Default for TagLimits {
    fn default() -> Self {
        TagLimits {
            min_workers: 0,
            max_workers: u32::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingPolicy {
    #[serde(default)]
    pub tags: BTreeMap<String, TagLimits>,
    #[serde(rename = "idle_timeout_ms", with = "crate::lifecycle::dur_ms")]
    pub idle_timeout: Duration,
    pub min_blocks: u32,
    pub max_blocks: u32,
    pub nodes_per_block: u32,
    pub workers_per_node: u32,
}

impl Default for ScalingPolicy {
    fn default() -> Self {
        ScalingPolicy {
            tags: BTreeMap::new(),
            idle_timeout: Duration::from_secs(30),
            min_blocks: 0,
            max_blocks: 1,
            nodes_per_block: 1,
            workers_per_node: 8,
        }
    }
}

impl ScalingPolicy {
    pub fn limits(&self, tag: &str) -> TagLimits {
        self.tags.get(tag).copied().unwrap_or_default()
    }

    pub fn slots_per_block(&self) -> u32 {
        self.nodes_per_block.saturating_mul(self.workers_per_node)
    }
}

/// Idle bookkeeping for one live manager.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManagerActivity<K> {
    pub id: K,
    /// Tasks routed to the manager that have not returned.
    pub outstanding: u32,
    /// When the manager last became idle; `None` while it has work.
    pub idle_since_us: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScalingState<K> {
    /// Tasks waiting at the agent, per tag.
    pub pending: BTreeMap<String, u32>,
    /// Live workers per tag across all managers.
    pub workers: BTreeMap<String, u32>,
    /// Slots with no worker across live managers.
    pub spare_slots: u32,
    /// Blocks submitted but whose managers have not registered.
    pub pending_blocks: u32,
    /// Blocks running or pending, counted against `max_blocks`.
    pub blocks: u32,
    pub managers: Vec<ManagerActivity<K>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScaleAction<K> {
    SubmitBlocks(u32),
    Retire(K),
}

/// Extra workers each tag needs to serve its pending tasks, within limits.
pub fn worker_deficit(policy: &ScalingPolicy, pending: &BTreeMap<String, u32>, workers: &BTreeMap<String, u32>) -> u32 {
    let mut need = 0u32;
    for (tag, &p) in pending {
        let lim = policy.limits(tag);
        let have = workers.get(tag).copied().unwrap_or(0);
        let cap = lim.max_workers.saturating_sub(have);
        need = need.saturating_add(p.min(cap));
    }
    for (tag, lim) in &policy.tags {
        if pending.contains_key(tag) {
            continue;
        }
        let have = workers.get(tag).copied().unwrap_or(0);
        need = need.saturating_add(lim.min_workers.saturating_sub(have));
    }
    need
}

pub fn plan_scaling<K: Clone>(policy: &ScalingPolicy, state: &ScalingState<K>, now_us: u64) -> Vec<ScaleAction<K>> {
    let mut actions = Vec::new();
    let per_block = policy.slots_per_block().max(1);

    let deficit = worker_deficit(policy, &state.pending, &state.workers);
    let coming = state.pending_blocks.saturating_mul(per_block);
    let uncovered = deficit.saturating_sub(state.spare_slots.saturating_add(coming));
    let mut want = uncovered.div_ceil(per_block);
    if state.blocks < policy.min_blocks {
        want = want.max(policy.min_blocks - state.blocks);
    }
    let want = want.min(policy.max_blocks.saturating_sub(state.blocks));
    if want > 0 {
        actions.push(ScaleAction::SubmitBlocks(want));
        return actions;
    }

    if deficit > 0 {
        return actions;
    }
    let timeout = policy.idle_timeout.as_micros() as u64;
    let keep = policy.min_blocks.saturating_mul(policy.nodes_per_block.max(1)) as usize;
    let mut live = state.managers.len();
    for m in &state.managers {
        if live <= keep {
            break;
        }
        let idle_for = m.idle_since_us.map(|t| now_us.saturating_sub(t));
        if m.outstanding == 0 && idle_for.is_some_and(|d| d > timeout) {
            actions.push(ScaleAction::Retire(m.id.clone()));
            live -= 1;
        }
    }
    actions
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const S: u64 = 1_000_000;

    fn one_worker_blocks(max_blocks: u32, max_workers: u32) -> ScalingPolicy {
        let mut p = ScalingPolicy {
            max_blocks,
            workers_per_node: 1,
            ..ScalingPolicy::default()
        };
        p.tags.insert(
            "sleep".into(),
            TagLimits {
                min_workers: 0,
                max_workers,
            },
        );
        p
    }

    #[test]
    fn twenty_pending_with_max_ten_scales_to_ten() {
        let policy = one_worker_blocks(50, 10);
        let mut state = ScalingState::<u32>::default();
        state.pending.insert("sleep".into(), 20);
        assert_eq!(plan_scaling(&policy, &state, 0), vec![ScaleAction::SubmitBlocks(10)]);

        // once requested, no further blocks until they register
        state.pending_blocks = 10;
        state.blocks = 10;
        assert!(plan_scaling(&policy, &state, 0).is_empty());

        // registered with all ten busy; the rest wait rather than scale
        state.pending_blocks = 0;
        state.workers.insert("sleep".into(), 10);
        state.pending.insert("sleep".into(), 10);
        assert!(plan_scaling(&policy, &state, 0).is_empty());
    }

    #[test]
    fn spare_slots_absorb_demand() {
        let policy = ScalingPolicy {
            max_blocks: 4,
            workers_per_node: 8,
            ..ScalingPolicy::default()
        };
        let mut state = ScalingState::<u32> {
            spare_slots: 6,
            blocks: 1,
            ..Default::default()
        };
        state.pending.insert("a".into(), 6);
        assert!(plan_scaling(&policy, &state, 0).is_empty());
        state.pending.insert("a".into(), 7);
        assert_eq!(plan_scaling(&policy, &state, 0), vec![ScaleAction::SubmitBlocks(1)]);
        state.pending.insert("a".into(), 100);
        assert_eq!(plan_scaling(&policy, &state, 0), vec![ScaleAction::SubmitBlocks(3)]);
    }

    #[test]
    fn idle_managers_retire_down_to_min() {
        let mut policy = ScalingPolicy {
            max_blocks: 4,
            ..ScalingPolicy::default()
        };
        let managers = (0..3)
            .map(|id| ManagerActivity {
                id,
                outstanding: 0,
                idle_since_us: Some(0),
            })
            .collect();
        let state = ScalingState {
            blocks: 3,
            managers,
            ..Default::default()
        };
        assert!(plan_scaling(&policy, &state, 30 * S).is_empty());
        assert_eq!(
            plan_scaling(&policy, &state, 31 * S),
            vec![ScaleAction::Retire(0), ScaleAction::Retire(1), ScaleAction::Retire(2)]
        );
        policy.min_blocks = 1;
        assert_eq!(
            plan_scaling(&policy, &state, 31 * S),
            vec![ScaleAction::Retire(0), ScaleAction::Retire(1)]
        );
    }

    #[test]
    fn busy_managers_are_kept() {
        let policy = ScalingPolicy::default();
        let state = ScalingState {
            blocks: 2,
            managers: vec![
                ManagerActivity {
                    id: 1u8,
                    outstanding: 2,
                    idle_since_us: None,
                },
                ManagerActivity {
                    id: 2u8,
                    outstanding: 0,
                    idle_since_us: Some(10 * S),
                },
            ],
            ..Default::default()
        };
        assert!(plan_scaling(&policy, &state, 35 * S).is_empty());
        assert_eq!(plan_scaling(&policy, &state, 41 * S), vec![ScaleAction::Retire(2)]);
    }

    #[test]
    fn min_blocks_are_maintained() {
        let policy = ScalingPolicy {
            min_blocks: 2,
            max_blocks: 3,
            ..ScalingPolicy::default()
        };
        let state = ScalingState::<u8>::default();
        assert_eq!(plan_scaling(&policy, &state, 0), vec![ScaleAction::SubmitBlocks(2)]);
    }

    #[test]
    fn never_exceeds_max_blocks() {
        for max_blocks in 0..5 {
            for blocks in 0..=max_blocks {
                let policy = one_worker_blocks(max_blocks, u32::MAX);
                let mut state = ScalingState::<u8> {
                    blocks,
                    ..Default::default()
                };
                state.pending.insert("sleep".into(), 1000);
                let total: u32 = plan_scaling(&policy, &state, 0)
                    .iter()
                    .map(|a| match a {
                        ScaleAction::SubmitBlocks(n) => *n,
                        ScaleAction::Retire(_) => 0,
                    })
                    .sum();
                assert!(blocks + total <= max_blocks);
            }
        }
    }

    #[test]
    fn pinned_minimum_counts_as_demand() {
        let mut policy = one_worker_blocks(5, 10);
        policy.tags.get_mut("sleep").unwrap().min_workers = 2;
        let state = ScalingState::<u8>::default();
        assert_eq!(worker_deficit(&policy, &state.pending, &state.workers), 2);
        assert_eq!(plan_scaling(&policy, &state, 0), vec![ScaleAction::SubmitBlocks(2)]);
    }
}
