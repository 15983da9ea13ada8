//! Manager capacity advertisements and the dispatch budget they imply.

use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

/// One container tag's view inside an advertisement.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCapacity {
    /// Workers of this tag that are IDLE right now.
    pub idle_now: u32,
    /// Workers expected free within one heartbeat interval
    /// (idle, busy and starting workers).
    pub anticipated: u32,
    /// Tasks held by the manager that no worker has picked up yet.
    #[serde(default)]
    pub queued: u32,
    /// Running total of tasks of this tag the manager has received.
    #[serde(default)]
    pub received: u64,
    /// Live workers of this tag, any state except dead.
    #[serde(default)]
    pub workers: u32,
}

impl TagCapacity {
    pub fn is_valid(&self) -> bool {
        self.anticipated >= self.idle_now
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityAdvertisement {
    pub seq: u64,
    pub tags: BTreeMap<String, TagCapacity>,
    /// Worker slots on the node.
    pub slots: u32,
    /// Slots with no worker in them.
    pub spare_slots: u32,
    /// Cap on tasks the manager accepts per advertisement cycle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_limit: Option<u32>,
}

impl CapacityAdvertisement {
    pub fn idle_total(&self) -> u32 {
        self.tags.values().map(|t| t.idle_now).sum()
    }

    pub fn workers_total(&self) -> u32 {
        self.tags.values().map(|t| t.workers).sum()
    }

    pub fn is_valid(&self) -> bool {
        self.tags.values().all(TagCapacity::is_valid) && self.workers_total() + self.spare_slots <= self.slots
    }
}

/// Tasks of one tag the agent may still send to a manager.
///
/// The ceiling is `anticipated`, further capped at `idle_now + prefetch`.
/// Tasks already queued at the manager and tasks `in_transit` (sent but not
/// yet counted in an advertisement) use up the ceiling.
pub fn dispatch_budget(cap: &TagCapacity, prefetch_count: u32, in_transit: u32) -> u32 {
    let ceiling = cap.anticipated.min(cap.idle_now.saturating_add(prefetch_count));
    ceiling.saturating_sub(cap.queued).saturating_sub(in_transit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cap(idle: u32, anticipated: u32) -> TagCapacity {
        TagCapacity {
            idle_now: idle,
            anticipated,
            workers: anticipated,
            ..TagCapacity::default()
        }
    }

    #[test]
    fn anticipated_caps_dispatch() {
        let c = cap(4, 8);
        let queued_at_agent = 10u32;
        assert_eq!(dispatch_budget(&c, 8, 0).min(queued_at_agent), 8);
    }

    #[test]
    fn zero_prefetch_never_exceeds_idle() {
        for idle in 0..10 {
            for extra in 0..10 {
                let c = cap(idle, idle + extra);
                assert!(dispatch_budget(&c, 0, 0) <= idle);
            }
        }
    }

    #[test]
    fn queued_and_in_transit_consume_budget() {
        let mut c = cap(2, 8);
        c.queued = 3;
        assert_eq!(dispatch_budget(&c, 8, 1), 4);
        assert_eq!(dispatch_budget(&c, 8, 10), 0);
    }

    #[test]
    fn advertisement_json_shape() {
        let mut adv = CapacityAdvertisement {
            seq: 3,
            slots: 8,
            spare_slots: 4,
            ..Default::default()
        };
        adv.tags.insert("bench".into(), cap(2, 4));
        let s = serde_json::to_string(&adv).unwrap();
        assert_eq!(
            s,
            r#"{"seq":3,"tags":{"bench":{"idle_now":2,"anticipated":4,"queued":0,"received":0,"workers":4}},"slots":8,"spare_slots":4}"#
        );
        let back: CapacityAdvertisement = serde_json::from_str(&s).unwrap();
        assert_eq!(back, adv);
        assert!(adv.is_valid());
        assert_eq!(adv.idle_total(), 2);
    }

    proptest! {
        #[test]
        fn budget_bounds(idle in 0u32..100, extra in 0u32..100, prefetch in 0u32..100,
                         queued in 0u32..100, transit in 0u32..100) {
            let c = TagCapacity { idle_now: idle, anticipated: idle + extra, queued, received: 0, workers: idle + extra };
            let b = dispatch_budget(&c, prefetch, transit);
            prop_assert!(b <= c.anticipated);
            prop_assert!(b <= (idle + prefetch).saturating_sub(queued + transit));
        }
    }
}
