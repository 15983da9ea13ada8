//! Content-addressed memoization keys.

use core::fmt;

use sha2::{Digest, Sha256};

use crate::codec::Envelope;

/// SHA-256 over the function body and the submitted input bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemoKey(pub [u8; 32]);

impl fmt::Debug for MemoKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MemoKey(")?;
        for b in &self.0[..8] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl fmt::Display for MemoKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Derives the memo key for `(body, input)`.
///
/// Hashed fields: `len(body) u64be || body || codec_id || len(payload) u64be || payload`.
/// The input is taken as submitted, so byte-identical inputs share a key while
/// equal values under different encodings do not. The routing tag is excluded.
pub fn memo_key(body: &[u8], input: &Envelope) -> MemoKey {
    let mut h = Sha256::new();
    h.update((body.len() as u64).to_be_bytes());
    h.update(body);
    h.update([input.codec_id]);
    h.update((input.payload.len() as u64).to_be_bytes());
    h.update(&input.payload);
    let digest = h.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    MemoKey(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Codec;
    use alloc::vec::Vec;

    #[test]
    fn deterministic() {
        let input = Envelope::raw(b"ab".to_vec());
        assert_eq!(memo_key(b"f", &input), memo_key(b"f", &input));
    }

    #[test]
    fn length_prefix_separates_boundaries() {
        let a = memo_key(b"f", &Envelope::raw(b"ab".to_vec()));
        let b = memo_key(b"fa", &Envelope::raw(b"b".to_vec()));
        assert_ne!(a, b);
    }

    #[test]
    fn codec_id_participates() {
        let raw = memo_key(b"f", &Envelope::new(Codec::Raw, b"1".to_vec()));
        let text = memo_key(b"f", &Envelope::new(Codec::Text, b"1".to_vec()));
        assert_ne!(raw, text);
    }

    #[test]
    fn routing_tag_ignored() {
        let a = Envelope::raw(b"x".to_vec());
        let b = a.clone().with_routing_tag([9; 16]);
        assert_eq!(memo_key(b"f", &a), memo_key(b"f", &b));
    }

    #[test]
    fn no_collisions_over_random_pairs() {
        use alloc::collections::BTreeMap;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut seen: BTreeMap<MemoKey, (Vec<u8>, Envelope)> = BTreeMap::new();
        for _ in 0..10_000 {
            let blen = rng.random_range(0..6);
            let body: Vec<u8> = (0..blen).map(|_| rng.random_range(b'a'..=b'c')).collect();
            let plen = rng.random_range(0..6);
            let payload: Vec<u8> = (0..plen).map(|_| rng.random_range(b'a'..=b'c')).collect();
            let input = Envelope::new(Codec::from_id(rng.random_range(0..3)).unwrap(), payload);
            let key = memo_key(&body, &input);
            if let Some(prev) = seen.get(&key) {
                // identical inputs may repeat; distinct ones must not share a key
                assert_eq!(prev, &(body.clone(), input.clone()));
            }
            seen.insert(key, (body, input));
        }
    }
}
