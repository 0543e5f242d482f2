//! Trainer-resident dynamic cache.
//!
//! Entries carry the iteration through which they will be read (their TTL). An entry
//! with `ttl == t` is usable during batch `t` and is evicted once batch `t` completes.
//!
//! Two roles touch a cache during an iteration: training reads and updates the current
//! batch's keys, maintenance inserts prefetched rows, moves TTLs and evicts. Plans
//! guarantee the two key sets are disjoint; here both roles run on the owning thread
//! between iteration-completion signals, so no locking is needed.

use std::collections::BTreeSet;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::hashing::{key_hash, splitmix64, KeySetDigest};
use crate::trace::EmbeddingKey;

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub value: Vec<f32>,
    pub ttl: u64,
    /// Updated since it was fetched.
    pub dirty: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evicted {
    pub key: EmbeddingKey,
    pub value: Vec<f32>,
    pub ttl: u64,
    pub dirty: bool,
}

fn entry_hash(key: EmbeddingKey, e: &CacheEntry) -> u64 {
    let mut h = splitmix64(key_hash(key) ^ e.ttl.rotate_left(1) ^ u64::from(e.dirty));
    for pair in e.value.chunks(2) {
        let lo = u64::from(pair[0].to_bits());
        let hi = pair.get(1).map_or(0, |v| u64::from(v.to_bits()));
        h = splitmix64(h ^ (hi << 32 | lo));
    }
    h
}

#[derive(Clone, Debug)]
pub struct DynamicCache {
    entries: FxHashMap<EmbeddingKey, CacheEntry>,
    by_ttl: BTreeSet<(u64, EmbeddingKey)>,
    capacity: usize,
    emb_dim: usize,
    completed: Option<u64>,
    keys: KeySetDigest,
    /// Wrapping sum of per-entry hashes over key, ttl, dirty flag and value bits.
    content: u64,
    inserted: u64,
    evicted: u64,
}

impl DynamicCache {
    pub fn new(capacity: usize, emb_dim: usize) -> Self {
        Self {
            entries: FxHashMap::default(),
            by_ttl: BTreeSet::new(),
            capacity,
            emb_dim,
            completed: None,
            keys: KeySetDigest::default(),
            content: 0,
            inserted: 0,
            evicted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn completed_iteration(&self) -> Option<u64> {
        self.completed
    }

    pub fn get(&self, key: &EmbeddingKey) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &EmbeddingKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn key_digest(&self) -> KeySetDigest {
        self.keys
    }

    /// Order-independent digest of the full cache content; equal across replicas.
    pub fn content_digest(&self) -> u64 {
        self.content
    }

    /// Lifetime insertions and evictions.
    pub fn churn(&self) -> (u64, u64) {
        (self.inserted, self.evicted)
    }

    fn put(&mut self, key: EmbeddingKey, entry: CacheEntry) {
        self.content = self.content.wrapping_add(entry_hash(key, &entry));
        self.by_ttl.insert((entry.ttl, key));
        self.entries.insert(key, entry);
    }

    fn take(&mut self, key: &EmbeddingKey) -> Option<CacheEntry> {
        let entry = self.entries.remove(key)?;
        self.content = self.content.wrapping_sub(entry_hash(*key, &entry));
        self.by_ttl.remove(&(entry.ttl, *key));
        Some(entry)
    }

    /// Mutates an entry in place, keeping the TTL index and content digest in step.
    fn modify<R>(&mut self, key: EmbeddingKey, f: impl FnOnce(&mut CacheEntry) -> R) -> Result<R> {
        let entry = self.entries.get_mut(&key).ok_or(Error::NotCached { key })?;
        let (old_hash, old_ttl) = (entry_hash(key, entry), entry.ttl);
        let out = f(entry);
        self.content = self.content.wrapping_sub(old_hash).wrapping_add(entry_hash(key, entry));
        if entry.ttl != old_ttl {
            self.by_ttl.remove(&(old_ttl, key));
            self.by_ttl.insert((entry.ttl, key));
        }
        Ok(out)
    }

    /// Inserts prefetched rows with the TTLs of the plan that requested them.
    pub fn apply_prefetch(
        &mut self,
        fetched: impl IntoIterator<Item = (EmbeddingKey, Vec<f32>)>,
        plan_ttls: &FxHashMap<EmbeddingKey, u64>,
    ) -> Result<()> {
        for (key, value) in fetched {
            if self.entries.contains_key(&key) {
                return Err(Error::DuplicateInsert { key });
            }
            if self.entries.len() >= self.capacity {
                return Err(Error::CacheOverflow { key, capacity: self.capacity });
            }
            if value.len() != self.emb_dim {
                return Err(Error::ValueLength { key, got: value.len(), expected: self.emb_dim });
            }
            let ttl = *plan_ttls.get(&key).ok_or_else(|| Error::Consistency(format!("no ttl planned for prefetched {key}")))?;
            self.check_ttl(key, ttl)?;
            self.put(key, CacheEntry { value, ttl, dirty: false });
            self.keys.insert(key);
            self.inserted += 1;
        }
        Ok(())
    }

    fn check_ttl(&self, key: EmbeddingKey, ttl: u64) -> Result<()> {
        match self.completed {
            Some(completed) if ttl <= completed => Err(Error::StaleTtl { key, ttl, completed }),
            _ => Ok(()),
        }
    }

    pub fn apply_ttl_updates(&mut self, updates: &[(EmbeddingKey, u64)]) -> Result<()> {
        for &(key, ttl) in updates {
            self.check_ttl(key, ttl)?;
            self.modify(key, |e| e.ttl = ttl)?;
        }
        Ok(())
    }

    /// Values for `keys` in order. Any miss is a consistency failure.
    pub fn lookup_batch(&self, keys: &[EmbeddingKey], iteration: u64) -> Result<Vec<&[f32]>> {
        keys.iter()
            .map(|k| {
                self.entries
                    .get(k)
                    .map(|e| e.value.as_slice())
                    .ok_or(Error::CacheMiss { key: *k, iteration })
            })
            .collect()
    }

    pub fn write_local_update(&mut self, key: EmbeddingKey, new_value: Vec<f32>) -> Result<()> {
        if new_value.len() != self.emb_dim {
            return Err(Error::ValueLength { key, got: new_value.len(), expected: self.emb_dim });
        }
        self.modify(key, |e| {
            e.value = new_value;
            e.dirty = true;
        })
    }

    /// Mutates a cached value in place; the entry becomes dirty when `update` reports a change.
    pub fn update_with(&mut self, key: EmbeddingKey, update: impl FnOnce(&mut [f32]) -> bool) -> Result<bool> {
        self.modify(key, |e| {
            let changed = update(&mut e.value);
            e.dirty |= changed;
            changed
        })
    }

    /// Removes every entry whose TTL is at most `completed`, sorted by key.
    pub fn evict_expired(&mut self, completed: u64) -> Vec<Evicted> {
        if let Some(prev) = self.completed {
            debug_assert!(completed >= prev, "completion went backwards: {completed} < {prev}");
        }
        self.completed = Some(self.completed.map_or(completed, |p| p.max(completed)));
        let expired: Vec<EmbeddingKey> = self.by_ttl.range(..=(completed, EmbeddingKey::new(u32::MAX, u64::MAX))).map(|(_, k)| *k).collect();
        let mut out: Vec<Evicted> = expired
            .into_iter()
            .map(|key| {
                let e = self.take(&key).expect("ttl index out of sync");
                self.keys.remove(key);
                Evicted { key, value: e.value, ttl: e.ttl, dirty: e.dirty }
            })
            .collect();
        self.evicted += out.len() as u64;
        out.sort_unstable_by_key(|e| e.key);
        out
    }

    /// Empties the cache (end-of-run flush), sorted by key.
    pub fn drain(&mut self) -> Vec<Evicted> {
        let mut out: Vec<Evicted> = self
            .entries
            .drain()
            .map(|(key, e)| Evicted { key, value: e.value, ttl: e.ttl, dirty: e.dirty })
            .collect();
        self.by_ttl.clear();
        self.keys = KeySetDigest::default();
        self.content = 0;
        self.evicted += out.len() as u64;
        out.sort_unstable_by_key(|e| e.key);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(row: u64) -> EmbeddingKey {
        EmbeddingKey::new(0, row)
    }

    fn ttls(pairs: &[(u64, u64)]) -> FxHashMap<EmbeddingKey, u64> {
        pairs.iter().map(|&(r, t)| (k(r), t)).collect()
    }

    #[test]
    fn prefetch_insert_and_lookup() {
        let mut c = DynamicCache::new(4, 2);
        c.apply_prefetch([(k(3), vec![1.0, 2.0])], &ttls(&[(3, 2)])).unwrap();
        let e = c.get(&k(3)).unwrap();
        assert_eq!((e.ttl, e.dirty), (2, false));
        assert_eq!(c.lookup_batch(&[k(3)], 1).unwrap(), vec![&[1.0, 2.0][..]]);
    }

    #[test]
    fn prefetch_errors() {
        let mut c = DynamicCache::new(1, 1);
        c.apply_prefetch([(k(1), vec![0.0])], &ttls(&[(1, 5)])).unwrap();
        assert!(matches!(
            c.apply_prefetch([(k(2), vec![0.0])], &ttls(&[(2, 5)])),
            Err(Error::CacheOverflow { .. })
        ));
        let mut c = DynamicCache::new(4, 1);
        c.apply_prefetch([(k(1), vec![0.0])], &ttls(&[(1, 5)])).unwrap();
        assert!(matches!(
            c.apply_prefetch([(k(1), vec![0.0])], &ttls(&[(1, 5)])),
            Err(Error::DuplicateInsert { .. })
        ));
        assert!(c.apply_prefetch([(k(2), vec![0.0, 1.0])], &ttls(&[(2, 5)])).is_err());
    }

    #[test]
    fn ttl_updates() {
        let mut c = DynamicCache::new(4, 1);
        c.apply_prefetch([(k(3), vec![0.5])], &ttls(&[(3, 2)])).unwrap();
        let before = c.content_digest();
        c.apply_ttl_updates(&[(k(3), 2)]).unwrap();
        assert_eq!(c.content_digest(), before, "equal ttl is a no-op");
        c.apply_ttl_updates(&[(k(3), 3)]).unwrap();
        assert_eq!(c.get(&k(3)).unwrap().ttl, 3);
        assert!(matches!(c.apply_ttl_updates(&[(k(4), 3)]), Err(Error::NotCached { .. })));
    }

    #[test]
    fn ttl_cannot_fall_behind_completion() {
        let mut c = DynamicCache::new(4, 1);
        c.apply_prefetch([(k(3), vec![0.5])], &ttls(&[(3, 5)])).unwrap();
        c.evict_expired(2);
        assert!(matches!(c.apply_ttl_updates(&[(k(3), 2)]), Err(Error::StaleTtl { .. })));
    }

    #[test]
    fn lookup_miss_names_key_and_iteration() {
        let c = DynamicCache::new(4, 1);
        assert!(c.lookup_batch(&[], 0).unwrap().is_empty());
        match c.lookup_batch(&[k(7)], 12) {
            Err(Error::CacheMiss { key, iteration }) => assert_eq!((key, iteration), (k(7), 12)),
            other => panic!("expected miss, got {other:?}"),
        }
    }

    #[test]
    fn local_updates_mark_dirty() {
        let mut c = DynamicCache::new(4, 1);
        c.apply_prefetch([(k(1), vec![0.0])], &ttls(&[(1, 5)])).unwrap();
        c.write_local_update(k(1), vec![1.0]).unwrap();
        c.write_local_update(k(1), vec![2.0]).unwrap();
        let e = c.get(&k(1)).unwrap();
        assert_eq!((e.value[0], e.dirty), (2.0, true));
        assert!(c.write_local_update(k(9), vec![1.0]).is_err());
    }

    #[test]
    fn eviction_is_inclusive_of_completed_iteration() {
        let mut c = DynamicCache::new(8, 1);
        c.apply_prefetch([(k(9), vec![9.0]), (k(3), vec![3.0])], &ttls(&[(9, 1), (3, 3)])).unwrap();
        let out = c.evict_expired(1);
        assert_eq!(out, vec![Evicted { key: k(9), value: vec![9.0], ttl: 1, dirty: false }]);
        assert!(c.evict_expired(2).is_empty());
        assert_eq!(c.evict_expired(3).len(), 1);
        assert!(c.is_empty());
        assert!(c.evict_expired(4).is_empty());
        assert_eq!(c.churn(), (2, 2));
        assert_eq!(c.key_digest(), KeySetDigest::default());
    }

    #[test]
    fn eviction_sorted_by_key() {
        let mut c = DynamicCache::new(8, 1);
        let t = ttls(&[(5, 0), (1, 0), (3, 0)]);
        c.apply_prefetch([(k(5), vec![0.0]), (k(1), vec![0.0]), (k(3), vec![0.0])], &t).unwrap();
        let keys: Vec<u64> = c.evict_expired(0).iter().map(|e| e.key.row).collect();
        assert_eq!(keys, [1, 3, 5]);
    }

    #[test]
    fn replicas_share_content_digest() {
        let mut a = DynamicCache::new(8, 2);
        let mut b = DynamicCache::new(8, 2);
        let t = ttls(&[(1, 4), (2, 4)]);
        a.apply_prefetch([(k(1), vec![1.0, 1.0]), (k(2), vec![2.0, 2.0])], &t).unwrap();
        b.apply_prefetch([(k(2), vec![2.0, 2.0]), (k(1), vec![1.0, 1.0])], &t).unwrap();
        assert_eq!(a.content_digest(), b.content_digest());
        a.write_local_update(k(1), vec![1.0, 1.5]).unwrap();
        assert_ne!(a.content_digest(), b.content_digest());
    }
}
