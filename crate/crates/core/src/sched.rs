//! Greedy randomized placement of one task onto a manager.
//!
//! Warm managers (a live worker of the task's tag plus spare budget) are
//! always preferred. Only when none exists is a manager with free slots
//! asked to cold-deploy. Within a tier the choice is uniform.

use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate<K> {
    pub id: K,
    /// ACTIVE managers only; suspended or lost ones are never chosen.
    pub active: bool,
    /// Tasks of the tag this manager can still take on warm workers.
    pub warm_spare: u32,
    /// Free slots usable for a new worker of the tag this cycle.
    pub cold_spare: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement<K> {
    Warm(K),
    Cold(K),
    NoCapacity,
}

impl<K> Placement<K> {
    pub fn manager(&self) -> Option<&K> {
        match self {
            Placement::Warm(k) | Placement::Cold(k) => Some(k),
            Placement::NoCapacity => None,
        }
    }
}

fn pick<'a, K, R: Rng + ?Sized>(
    candidates: &'a [Candidate<K>],
    rng: &mut R,
    eligible: impl Fn(&Candidate<K>) -> bool,
) -> Option<&'a K> {
    let n = candidates.iter().filter(|c| eligible(c)).count();
    if n == 0 {
        return None;
    }
    let k = rng.random_range(0..n);
    candidates.iter().filter(|c| eligible(c)).nth(k).map(|c| &c.id)
}

pub fn schedule<K: Clone, R: Rng + ?Sized>(candidates: &[Candidate<K>], rng: &mut R) -> Placement<K> {
    if let Some(id) = pick(candidates, rng, |c| c.active && c.warm_spare > 0) {
        return Placement::Warm(id.clone());
    }
    if let Some(id) = pick(candidates, rng, |c| c.active && c.cold_spare > 0) {
        return Placement::Cold(id.clone());
    }
    Placement::NoCapacity
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn warm(id: u32, spare: u32) -> Candidate<u32> {
        Candidate {
            id,
            active: true,
            warm_spare: spare,
            cold_spare: 0,
        }
    }

    fn cold(id: u32, spare: u32) -> Candidate<u32> {
        Candidate {
            id,
            active: true,
            warm_spare: 0,
            cold_spare: spare,
        }
    }

    #[test]
    fn singleton_warm_is_chosen() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(schedule(&[warm(9, 1)], &mut rng), Placement::Warm(9));
    }

    #[test]
    fn warm_beats_cold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = [cold(1, 8), warm(2, 1), cold(3, 8)];
        for _ in 0..1000 {
            assert_eq!(schedule(&c, &mut rng), Placement::Warm(2));
        }
    }

    #[test]
    fn inactive_and_exhausted_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut suspended = warm(1, 5);
        suspended.active = false;
        let c = [suspended, warm(2, 0), cold(3, 1)];
        assert_eq!(schedule(&c, &mut rng), Placement::Cold(3));
        assert_eq!(schedule(&[warm(2, 0)], &mut rng), Placement::NoCapacity);
        assert_eq!(schedule::<u32, _>(&[], &mut rng), Placement::NoCapacity);
    }

    #[test]
    fn two_warm_managers_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let c = [warm(0, 1), warm(1, 1)];
        let mut counts = [0u32; 2];
        for _ in 0..10_000 {
            match schedule(&c, &mut rng) {
                Placement::Warm(i) => counts[i as usize] += 1,
                p => panic!("unexpected {p:?}"),
            }
        }
        for n in counts {
            assert!((4700..=5300).contains(&n), "{counts:?}");
        }
    }

    /// Upper-tail chi-square critical values at p = 0.01 for 1..=9 degrees of freedom.
    const CHI2_99: [f64; 9] = [6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090, 21.666];

    #[test]
    fn warm_tier_is_uniform_by_chi_square() {
        for k in 2..=10u32 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
            let mut c: Vec<Candidate<u32>> = (0..k).map(|i| warm(i, 3)).collect();
            // cold-only managers must never absorb warm-tier draws
            c.push(cold(99, 10));
            let n = 20_000u32;
            let mut counts = vec![0u32; k as usize];
            for _ in 0..n {
                match schedule(&c, &mut rng) {
                    Placement::Warm(i) => counts[i as usize] += 1,
                    p => panic!("unexpected {p:?}"),
                }
            }
            let expected = n as f64 / k as f64;
            let chi2: f64 = counts
                .iter()
                .map(|&o| {
                    let d = o as f64 - expected;
                    d * d / expected
                })
                .sum();
            assert!(chi2 < CHI2_99[(k - 2) as usize], "k={k} chi2={chi2} {counts:?}");
        }
    }

    fn arb_candidate() -> impl Strategy<Value = Candidate<u8>> {
        (any::<u8>(), any::<bool>(), 0u32..3, 0u32..3).prop_map(|(id, active, w, c)| Candidate {
            id,
            active,
            warm_spare: w,
            cold_spare: c,
        })
    }

    proptest! {
        #[test]
        fn tier_correctness(cands in proptest::collection::vec(arb_candidate(), 0..12), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let any_warm = cands.iter().any(|c| c.active && c.warm_spare > 0);
            let any_cold = cands.iter().any(|c| c.active && c.cold_spare > 0);
            match schedule(&cands, &mut rng) {
                Placement::Warm(id) => {
                    prop_assert!(cands.iter().any(|c| c.id == id && c.active && c.warm_spare > 0));
                }
                Placement::Cold(id) => {
                    prop_assert!(!any_warm);
                    prop_assert!(cands.iter().any(|c| c.id == id && c.active && c.cold_spare > 0));
                }
                Placement::NoCapacity => prop_assert!(!any_warm && !any_cold),
            }
        }
    }
}
