use std::collections::BTreeMap;

use crate::model::NodeRecord;

pub const DEFAULT_CACHE_TTL_US: u64 = 60_000_000;

/// Capability id → resolved providers, each entry with an absolute expiry.
#[derive(Debug, Clone)]
pub struct DiscoveryCache {
    pub ttl_us: u64,
    entries: BTreeMap<String, (Vec<NodeRecord>, u64)>,
}

impl Default for DiscoveryCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_TTL_US)
    }
}

impl DiscoveryCache {
    pub fn new(ttl_us: u64) -> Self {
        Self {
            ttl_us,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, capability_id: &str, now: u64) -> Option<&[NodeRecord]> {
        match self.entries.get(capability_id) {
            Some((records, expiry)) if now < *expiry => Some(records),
            _ => None,
        }
    }

    pub fn put(&mut self, capability_id: &str, records: Vec<NodeRecord>, now: u64) {
        self.entries
            .insert(capability_id.to_owned(), (records, now.saturating_add(self.ttl_us)));
    }

    pub fn invalidate(&mut self, capability_id: &str) {
        self.entries.remove(capability_id);
    }

    pub fn purge_expired(&mut self, now: u64) {
        self.entries.retain(|_, (_, expiry)| now < *expiry);
    }
}
