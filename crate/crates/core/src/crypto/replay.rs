use std::num::NonZeroUsize;

use lru::LruCache;
use sha2::{Digest, Sha256};

pub const DEFAULT_SKEW_WINDOW_US: u64 = 30_000_000;
pub const DEFAULT_LRU_CAPACITY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayVerdict {
    Accept,
    /// Timestamp too far from the local clock.
    Skew,
    /// Nonce already seen inside the window.
    Duplicate,
}

impl ReplayVerdict {
    pub fn accepted(self) -> bool {
        self == Self::Accept
    }
}

/// Skew window plus an LRU set of seen nonce digests.
#[derive(Debug)]
pub struct ReplayCache {
    pub skew_window_us: u64,
    seen: LruCache<u64, ()>,
}

impl Default for ReplayCache {
    fn default() -> Self {
        Self::new(DEFAULT_SKEW_WINDOW_US, DEFAULT_LRU_CAPACITY)
    }
}

impl ReplayCache {
    pub fn new(skew_window_us: u64, lru_capacity: usize) -> Self {
        let cap = NonZeroUsize::new(lru_capacity.max(1)).unwrap();
        Self {
            skew_window_us,
            seen: LruCache::new(cap),
        }
    }

    pub fn capacity(&self) -> usize {
        self.seen.cap().get()
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    pub fn check(&mut self, timestamp: u64, sequence: u32, now: u64) -> ReplayVerdict {
        check_replay(self, timestamp, sequence, now)
    }
}

/// First 8 bytes (big-endian) of SHA-256 over `(sequence as u64) XOR timestamp`.
pub fn nonce_digest(timestamp: u64, sequence: u32) -> u64 {
    let mixed = (sequence as u64) ^ timestamp;
    let h = Sha256::digest(mixed.to_be_bytes());
    u64::from_be_bytes(h[..8].try_into().unwrap())
}

pub fn check_replay(cache: &mut ReplayCache, timestamp: u64, sequence: u32, now: u64) -> ReplayVerdict {
    if now.abs_diff(timestamp) > cache.skew_window_us {
        return ReplayVerdict::Skew;
    }
    let digest = nonce_digest(timestamp, sequence);
    if cache.seen.get(&digest).is_some() {
        return ReplayVerdict::Duplicate;
    }
    cache.seen.put(digest, ());
    ReplayVerdict::Accept
}
