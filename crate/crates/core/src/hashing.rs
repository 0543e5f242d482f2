//! Platform-stable hashing helpers shared by categorical hashing, sharding and
//! store initialisation.

use crate::trace::EmbeddingKey;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Streaming FNV-1a 64.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a64(u64);

impl Default for Fnv1a64 {
    fn default() -> Self {
        Self(FNV_OFFSET)
    }
}

impl Fnv1a64 {
    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a64::default();
    h.write(bytes);
    h.finish()
}

/// FNV-1a over the canonical key encoding: table id as u32 LE, then row id as u64 LE.
pub fn key_hash(key: EmbeddingKey) -> u64 {
    let mut h = Fnv1a64::default();
    h.write(&key.table.to_le_bytes());
    h.write(&key.row.to_le_bytes());
    h.finish()
}

/// Key encoding followed by the component index as u32 LE.
pub fn component_hash(key: EmbeddingKey, component: u32) -> u64 {
    let mut h = Fnv1a64::default();
    h.write(&key.table.to_le_bytes());
    h.write(&key.row.to_le_bytes());
    h.write(&component.to_le_bytes());
    h.finish()
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-independent summary of a key set, maintained incrementally.
///
/// Used to compare the planner's mirror against trainer caches without
/// materialising either set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct KeySetDigest {
    pub len: usize,
    pub sum: u64,
}

impl KeySetDigest {
    pub fn insert(&mut self, key: EmbeddingKey) {
        self.len += 1;
        self.sum = self.sum.wrapping_add(splitmix64(key_hash(key)));
    }

    pub fn remove(&mut self, key: EmbeddingKey) {
        self.len -= 1;
        self.sum = self.sum.wrapping_sub(splitmix64(key_hash(key)));
    }

    pub fn of<'a>(keys: impl IntoIterator<Item = &'a EmbeddingKey>) -> Self {
        let mut d = Self::default();
        for k in keys {
            d.insert(*k);
        }
        d
    }
}
