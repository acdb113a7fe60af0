//! Kademlia routing: XOR metric, k-buckets and the iterative lookup state
//! machine. Network I/O lives in the node layer; everything here is pure.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{NodeId, NodeRecord};
use crate::wire::ProviderRecord;

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_ALPHA: usize = 3;
pub const ID_BITS: usize = 256;

/// XOR of two ids, ordered as a big-endian unsigned integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Distance(pub [u8; 32]);

impl Distance {
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|b| *b == 0)
    }

    pub fn leading_zeros(&self) -> u32 {
        let mut n = 0;
        for b in self.0 {
            if b == 0 {
                n += 8;
            } else {
                return n + b.leading_zeros();
            }
        }
        n
    }

    /// Position of the highest set bit; `None` for zero.
    pub fn ilog2(&self) -> Option<usize> {
        if self.is_zero() {
            None
        } else {
            Some(ID_BITS - 1 - self.leading_zeros() as usize)
        }
    }
}

pub fn xor_distance(x: &NodeId, y: &NodeId) -> Distance {
    let mut out = [0u8; 32];
    for (o, (a, b)) in out.iter_mut().zip(x.0.iter().zip(y.0.iter())) {
        *o = a ^ b;
    }
    Distance(out)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KadError {
    #[error("a node cannot be placed in its own routing table")]
    SelfReference,
}

pub fn bucket_index(local: &NodeId, remote: &NodeId) -> Result<usize, KadError> {
    xor_distance(local, remote).ilog2().ok_or(KadError::SelfReference)
}

#[derive(Debug, Clone, PartialEq)]
pub enum InsertOutcome {
    Added,
    /// Already present; moved to the most-recently-seen end.
    Refreshed,
    /// The local node itself; ignored.
    SelfIgnored,
    /// Bucket full. The caller should ping `oldest` and then call
    /// [`RoutingTable::resolve_full`].
    BucketFull { oldest: NodeRecord },
}

/// 256 k-buckets; each bucket is ordered least-recently-seen first.
#[derive(Debug, Clone)]
pub struct RoutingTable {
    local_id: NodeId,
    pub k: usize,
    pub alpha: usize,
    buckets: Vec<Vec<NodeRecord>>,
}

impl RoutingTable {
    pub fn new(local_id: NodeId, k: usize, alpha: usize) -> Self {
        Self {
            local_id,
            k: k.max(1),
            alpha: alpha.max(1),
            buckets: vec![Vec::new(); ID_BITS],
        }
    }

    pub fn local_id(&self) -> NodeId {
        self.local_id
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bucket(&self, index: usize) -> &[NodeRecord] {
        &self.buckets[index]
    }

    pub fn get(&self, id: &NodeId) -> Option<&NodeRecord> {
        let idx = bucket_index(&self.local_id, id).ok()?;
        self.buckets[idx].iter().find(|r| r.node_id == *id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NodeRecord> {
        self.buckets.iter().flatten()
    }

    pub fn insert(&mut self, record: NodeRecord) -> InsertOutcome {
        let Ok(idx) = bucket_index(&self.local_id, &record.node_id) else {
            return InsertOutcome::SelfIgnored;
        };
        let bucket = &mut self.buckets[idx];
        if let Some(pos) = bucket.iter().position(|r| r.node_id == record.node_id) {
            bucket.remove(pos);
            bucket.push(record);
            return InsertOutcome::Refreshed;
        }
        if bucket.len() < self.k {
            bucket.push(record);
            return InsertOutcome::Added;
        }
        InsertOutcome::BucketFull {
            oldest: bucket[0].clone(),
        }
    }

    /// Settles a full-bucket insert after pinging the oldest entry. A live
    /// occupant is kept (moved to the fresh end) and the candidate dropped;
    /// a dead one is evicted in favour of the candidate.
    pub fn resolve_full(&mut self, oldest: &NodeId, oldest_alive: bool, candidate: NodeRecord) {
        let Ok(idx) = bucket_index(&self.local_id, oldest) else {
            return;
        };
        let k = self.k;
        let bucket = &mut self.buckets[idx];
        let Some(pos) = bucket.iter().position(|r| r.node_id == *oldest) else {
            // Occupant already gone; treat as free space.
            if bucket.len() < k && !bucket.iter().any(|r| r.node_id == candidate.node_id) {
                bucket.push(candidate);
            }
            return;
        };
        let entry = bucket.remove(pos);
        if oldest_alive {
            bucket.push(entry);
        } else if !bucket.iter().any(|r| r.node_id == candidate.node_id) {
            bucket.push(candidate);
        }
    }

    pub fn remove(&mut self, id: &NodeId) -> Option<NodeRecord> {
        let idx = bucket_index(&self.local_id, id).ok()?;
        let pos = self.buckets[idx].iter().position(|r| r.node_id == *id)?;
        Some(self.buckets[idx].remove(pos))
    }

    /// Up to `n` known nodes closest to `target`, ascending by distance.
    pub fn closest(&self, target: &NodeId, n: usize) -> Vec<NodeRecord> {
        let mut all: Vec<(Distance, &NodeRecord)> = self
            .iter()
            .map(|r| (xor_distance(&r.node_id, target), r))
            .collect();
        all.sort_by(|a, b| a.0.cmp(&b.0));
        all.into_iter().take(n).map(|(_, r)| r.clone()).collect()
    }

    /// Bucket membership and size invariants.
    pub fn check_invariants(&self) -> bool {
        self.buckets.iter().enumerate().all(|(i, b)| {
            b.len() <= self.k
                && b.iter()
                    .all(|r| bucket_index(&self.local_id, &r.node_id) == Ok(i))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupMode {
    /// Stop as soon as a provider record for the key is returned.
    FindValue,
    /// Converge on the k closest nodes.
    FindNodes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PeerState {
    Fresh,
    InFlight,
    Responded,
    Failed,
}

/// Shortlist-driven iterative lookup.
///
/// Each call to [`Lookup::next_round`] selects the α closest unqueried
/// peers among the k closest candidates. When the previous round brought
/// no closer node, the round widens to every unqueried peer among the k
/// closest. The lookup ends when those k are all queried.
#[derive(Debug, Clone)]
pub struct Lookup {
    target: NodeId,
    local_id: NodeId,
    k: usize,
    alpha: usize,
    mode: LookupMode,
    shortlist: BTreeMap<Distance, (NodeRecord, PeerState)>,
    providers: Vec<ProviderRecord>,
    rounds: usize,
    queries: usize,
    best_at_last_round: Option<Distance>,
}

impl Lookup {
    pub fn new(
        target: NodeId,
        local_id: NodeId,
        seeds: Vec<NodeRecord>,
        k: usize,
        alpha: usize,
        mode: LookupMode,
    ) -> Self {
        let mut l = Self {
            target,
            local_id,
            k,
            alpha,
            mode,
            shortlist: BTreeMap::new(),
            providers: Vec::new(),
            rounds: 0,
            queries: 0,
            best_at_last_round: None,
        };
        for s in seeds {
            l.add_candidate(s);
        }
        l
    }

    fn add_candidate(&mut self, record: NodeRecord) {
        if record.node_id == self.local_id {
            return;
        }
        let d = xor_distance(&record.node_id, &self.target);
        self.shortlist.entry(d).or_insert((record, PeerState::Fresh));
    }

    fn best(&self) -> Option<Distance> {
        self.shortlist
            .iter()
            .find(|(_, (_, s))| *s != PeerState::Failed)
            .map(|(d, _)| *d)
    }

    fn k_closest_live(&self) -> impl Iterator<Item = (&Distance, &(NodeRecord, PeerState))> {
        self.shortlist
            .iter()
            .filter(|(_, (_, s))| *s != PeerState::Failed)
            .take(self.k)
    }

    pub fn next_round(&mut self) -> Vec<NodeRecord> {
        if self.is_finished() {
            return Vec::new();
        }
        let best = self.best();
        let progressed = match (self.best_at_last_round, best) {
            (None, _) => true,
            (Some(prev), Some(now)) => now < prev,
            (Some(_), None) => false,
        };
        let limit = if progressed { self.alpha } else { self.k };
        let picked: Vec<Distance> = self
            .k_closest_live()
            .filter(|(_, (_, s))| *s == PeerState::Fresh)
            .take(limit)
            .map(|(d, _)| *d)
            .collect();
        if picked.is_empty() {
            return Vec::new();
        }
        self.best_at_last_round = best;
        self.rounds += 1;
        self.queries += picked.len();
        picked
            .into_iter()
            .map(|d| {
                let entry = self.shortlist.get_mut(&d).unwrap();
                entry.1 = PeerState::InFlight;
                entry.0.clone()
            })
            .collect()
    }

    fn mark(&mut self, from: &NodeId, state: PeerState) {
        let d = xor_distance(from, &self.target);
        if let Some(entry) = self.shortlist.get_mut(&d) {
            entry.1 = state;
        }
    }

    pub fn on_response(&mut self, from: &NodeId, closer: Vec<NodeRecord>, providers: Vec<ProviderRecord>) {
        self.mark(from, PeerState::Responded);
        for c in closer {
            self.add_candidate(c);
        }
        for p in providers {
            if !self
                .providers
                .iter()
                .any(|q| q.record.node_id == p.record.node_id && q.capability_id == p.capability_id)
            {
                self.providers.push(p);
            }
        }
    }

    pub fn on_failure(&mut self, from: &NodeId) {
        self.mark(from, PeerState::Failed);
    }

    pub fn is_finished(&self) -> bool {
        if self.mode == LookupMode::FindValue && !self.providers.is_empty() {
            return true;
        }
        for (_, (_, s)) in self.k_closest_live() {
            if matches!(s, PeerState::Fresh | PeerState::InFlight) {
                return false;
            }
        }
        true
    }

    pub fn in_flight(&self) -> usize {
        self.shortlist
            .values()
            .filter(|(_, s)| *s == PeerState::InFlight)
            .count()
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn providers(&self) -> &[ProviderRecord] {
        &self.providers
    }

    pub fn into_providers(self) -> Vec<ProviderRecord> {
        self.providers
    }

    /// The k closest peers that answered, ascending by distance.
    pub fn closest_responded(&self) -> Vec<NodeRecord> {
        self.shortlist
            .values()
            .filter(|(_, s)| *s == PeerState::Responded)
            .take(self.k)
            .map(|(r, _)| r.clone())
            .collect()
    }
}
