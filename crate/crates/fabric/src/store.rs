//! Embedded write-ahead key-value store.
//!
//! Every mutation batch is appended to a single log file as checksummed
//! records and handed to the OS before `apply` returns, so committed state
//! survives a killed process. `sync = true` adds an fsync per batch for
//! power-loss durability. The full key space is mirrored in memory; the log
//! is rewritten when it grows well past the live data.
//!
//! Record layout (big-endian):
//! `crc32 u32 | op u8 | key_len u32 | val_len u32 | key | value`,
//! where the checksum covers everything after itself.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

const OP_PUT: u8 = 1;
const OP_DELETE: u8 = 2;
const RECORD_HEADER: usize = 13;
const COMPACT_MIN_BYTES: u64 = 16 << 20;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mutation {
    Put(String, Vec<u8>),
    Delete(String),
}

/// Storage behind the coordinator's registries and queues.
pub trait KvStore: Send {
    fn get(&self, key: &str) -> Option<&[u8]>;
    /// Applies all mutations atomically with respect to recovery.
    fn apply(&mut self, batch: Vec<Mutation>) -> Result<(), StoreError>;
    fn scan_prefix(&self, prefix: &str) -> Vec<(String, Vec<u8>)>;
}

/// Volatile store for tests and throwaway coordinators.
#[derive(Debug, Default)]
pub struct MemStore {
    map: BTreeMap<String, Vec<u8>>,
}

impl KvStore for MemStore {
    fn get(&self, key: &str) -> Option<&[u8]> {
        self.map.get(key).map(Vec::as_slice)
    }

    fn apply(&mut self, batch: Vec<Mutation>) -> Result<(), StoreError> {
        for m in batch {
            match m {
                Mutation::Put(k, v) => {
                    self.map.insert(k, v);
                }
                Mutation::Delete(k) => {
                    self.map.remove(&k);
                }
            }
        }
        Ok(())
    }

    fn scan_prefix(&self, prefix: &str) -> Vec<(String, Vec<u8>)> {
        scan(&self.map, prefix)
    }
}

fn scan(map: &BTreeMap<String, Vec<u8>>, prefix: &str) -> Vec<(String, Vec<u8>)> {
    map.range(prefix.to_string()..)
        .take_while(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

#[derive(Debug)]
pub struct WalStore {
    path: PathBuf,
    file: File,
    map: BTreeMap<String, Vec<u8>>,
    file_len: u64,
    live_bytes: u64,
    sync: bool,
}

fn encode_record(out: &mut Vec<u8>, op: u8, key: &str, value: &[u8]) {
    let start = out.len();
    out.extend_from_slice(&[0; 4]);
    out.push(op);
    out.extend_from_slice(&(key.len() as u32).to_be_bytes());
    out.extend_from_slice(&(value.len() as u32).to_be_bytes());
    out.extend_from_slice(key.as_bytes());
    out.extend_from_slice(value);
    let crc = crc32fast::hash(&out[start + 4..]);
    out[start..start + 4].copy_from_slice(&crc.to_be_bytes());
}

/// Replays `bytes`, returning the map and the length of the valid prefix.
fn replay(bytes: &[u8]) -> (BTreeMap<String, Vec<u8>>, usize) {
    let mut map = BTreeMap::new();
    let mut pos = 0;
    while bytes.len() - pos >= RECORD_HEADER {
        let h = &bytes[pos..];
        let crc = u32::from_be_bytes([h[0], h[1], h[2], h[3]]);
        let op = h[4];
        let klen = u32::from_be_bytes([h[5], h[6], h[7], h[8]]) as usize;
        let vlen = u32::from_be_bytes([h[9], h[10], h[11], h[12]]) as usize;
        let total = RECORD_HEADER + klen + vlen;
        if h.len() < total || crc32fast::hash(&h[4..total]) != crc {
            break;
        }
        let Ok(key) = std::str::from_utf8(&h[RECORD_HEADER..RECORD_HEADER + klen]) else {
            break;
        };
        match op {
            OP_PUT => {
                map.insert(key.to_string(), h[RECORD_HEADER + klen..total].to_vec());
            }
            OP_DELETE => {
                map.remove(key);
            }
            _ => break,
        }
        pos += total;
    }
    (map, pos)
}

impl WalStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(path, false)
    }

    pub fn open_with(path: impl AsRef<Path>, sync: bool) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(io)?;
            }
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io)?;
        let (map, valid) = replay(&bytes);
        if valid < bytes.len() {
            tracing::warn!(
                "discarding {} bytes of torn log tail in {}",
                bytes.len() - valid,
                path.display()
            );
            file.set_len(valid as u64).map_err(io)?;
        }
        let live_bytes = live_size(&map);
        Ok(WalStore {
            path,
            file,
            map,
            file_len: valid as u64,
            live_bytes,
            sync,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log_len(&self) -> u64 {
        self.file_len
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Rewrites the log with only live records.
    pub fn compact(&mut self) -> Result<(), StoreError> {
        let tmp = self.path.with_extension("compact");
        let io = |source| StoreError::Io {
            path: tmp.clone(),
            source,
        };
        let mut out = Vec::with_capacity(self.live_bytes as usize);
        for (k, v) in &self.map {
            encode_record(&mut out, OP_PUT, k, v);
        }
        {
            let mut f = File::create(&tmp).map_err(io)?;
            f.write_all(&out).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, &self.path).map_err(io)?;
        self.file = OpenOptions::new()
            .read(true)
            .append(true)
            .open(&self.path)
            .map_err(|source| StoreError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.file_len = out.len() as u64;
        Ok(())
    }
}

fn live_size(map: &BTreeMap<String, Vec<u8>>) -> u64 {
    map.iter().map(|(k, v)| (RECORD_HEADER + k.len() + v.len()) as u64).sum()
}

impl KvStore for WalStore {
    fn get(&self, key: &str) -> Option<&[u8]> {
        self.map.get(key).map(Vec::as_slice)
    }

    fn apply(&mut self, batch: Vec<Mutation>) -> Result<(), StoreError> {
        if batch.is_empty() {
            return Ok(());
        }
        let mut out = Vec::new();
        for m in &batch {
            match m {
                Mutation::Put(k, v) => encode_record(&mut out, OP_PUT, k, v),
                Mutation::Delete(k) => encode_record(&mut out, OP_DELETE, k, &[]),
            }
        }
        let io = |source| StoreError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(&out).map_err(io)?;
        if self.sync {
            self.file.sync_data().map_err(io)?;
        }
        self.file_len += out.len() as u64;
        for m in batch {
            match m {
                Mutation::Put(k, v) => {
                    let add = (RECORD_HEADER + k.len() + v.len()) as u64;
                    if let Some(old) = self.map.insert(k.clone(), v) {
                        self.live_bytes -= (RECORD_HEADER + k.len() + old.len()) as u64;
                    }
                    self.live_bytes += add;
                }
                Mutation::Delete(k) => {
                    if let Some(old) = self.map.remove(&k) {
                        self.live_bytes -= (RECORD_HEADER + k.len() + old.len()) as u64;
                    }
                }
            }
        }
        if self.file_len > COMPACT_MIN_BYTES && self.file_len > 4 * self.live_bytes {
            self.compact()?;
        }
        Ok(())
    }

    fn scan_prefix(&self, prefix: &str) -> Vec<(String, Vec<u8>)> {
        scan(&self.map, prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put(k: &str, v: &[u8]) -> Mutation {
        Mutation::Put(k.into(), v.to_vec())
    }

    #[test]
    fn reopen_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wal.log");
        {
            let mut s = WalStore::open(&p).unwrap();
            s.apply(vec![put("task/1", b"a"), put("task/2", b"b")]).unwrap();
            s.apply(vec![Mutation::Delete("task/1".into()), put("fn/1", b"c")]).unwrap();
            s.apply(vec![put("task/2", b"bb")]).unwrap();
        }
        let s = WalStore::open(&p).unwrap();
        assert_eq!(s.get("task/1"), None);
        assert_eq!(s.get("task/2"), Some(&b"bb"[..]));
        assert_eq!(s.scan_prefix("task/"), vec![("task/2".to_string(), b"bb".to_vec())]);
        assert_eq!(s.scan_prefix("fn/").len(), 1);
    }

    #[test]
    fn torn_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wal.log");
        {
            let mut s = WalStore::open(&p).unwrap();
            s.apply(vec![put("a", b"1")]).unwrap();
            s.apply(vec![put("b", b"2")]).unwrap();
        }
        let len = fs::metadata(&p).unwrap().len();
        let f = OpenOptions::new().write(true).open(&p).unwrap();
        f.set_len(len - 1).unwrap();
        drop(f);
        let mut s = WalStore::open(&p).unwrap();
        assert_eq!(s.get("a"), Some(&b"1"[..]));
        assert_eq!(s.get("b"), None);
        s.apply(vec![put("c", b"3")]).unwrap();
        drop(s);
        let s = WalStore::open(&p).unwrap();
        assert_eq!(s.get("c"), Some(&b"3"[..]));
    }

    #[test]
    fn corrupted_record_stops_replay() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wal.log");
        {
            let mut s = WalStore::open(&p).unwrap();
            s.apply(vec![put("a", b"1")]).unwrap();
            s.apply(vec![put("b", b"2")]).unwrap();
        }
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&p, &bytes).unwrap();
        let s = WalStore::open(&p).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn compaction_preserves_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wal.log");
        let mut s = WalStore::open(&p).unwrap();
        for i in 0..200 {
            s.apply(vec![put("k", format!("{i}").as_bytes()), put(&format!("x/{}", i % 7), b"v")])
                .unwrap();
        }
        let before = s.log_len();
        s.compact().unwrap();
        assert!(s.log_len() < before);
        s.apply(vec![put("after", b"1")]).unwrap();
        drop(s);
        let s = WalStore::open(&p).unwrap();
        assert_eq!(s.get("k"), Some(&b"199"[..]));
        assert_eq!(s.scan_prefix("x/").len(), 7);
        assert_eq!(s.get("after"), Some(&b"1"[..]));
    }

    #[test]
    fn mem_store_matches_wal_semantics() {
        let mut m = MemStore::default();
        m.apply(vec![put("a/1", b"x"), put("a/2", b"y"), put("b", b"z")]).unwrap();
        m.apply(vec![Mutation::Delete("a/1".into())]).unwrap();
        assert_eq!(m.scan_prefix("a/"), vec![("a/2".to_string(), b"y".to_vec())]);
    }
}
