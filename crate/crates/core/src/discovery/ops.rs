//! Client-side discovery operations run through a [`Driver`].

use std::collections::BTreeMap;

use super::{DiscoveryError, Lookup, LookupMode};
use crate::model::{NodeId, NodeRecord};
use crate::node::{Driver, Incoming};
use crate::wire::{Announce, Flags, PayloadMessage, ProviderRecord, Query};

/// Outcome of one request/response exchange.
fn rpc(
    d: &mut dyn Driver,
    to: &str,
    message: &PayloadMessage,
    flags: Flags,
    timeout_us: u64,
) -> Option<(Incoming, u64)> {
    let start = d.now();
    let tx = d.node().new_transaction_id();
    d.node().expect(tx);
    if d.node().send_message(start, to, message, tx, flags).is_err() {
        d.node().forget(&tx);
        return None;
    }
    d.run_until(start + timeout_us, &mut |n| n.has_response(&tx));
    let mut got = d.node().take_responses(&tx);
    d.node().forget(&tx);
    if got.is_empty() {
        None
    } else {
        let first = got.remove(0);
        let rtt = first.at.saturating_sub(start);
        Some((first, rtt))
    }
}

fn announce_of(inc: &Incoming) -> Option<&Announce> {
    match &inc.message {
        Some(PayloadMessage::Announce(a)) => Some(a),
        _ => None,
    }
}

fn record_from(inc: &Incoming, a: &Announce) -> NodeRecord {
    let mut r = NodeRecord::new(inc.sender, a.addresses.clone());
    if r.addresses.is_empty() {
        r.addresses.push(inc.from.clone());
    }
    r.capabilities = a.capabilities.clone();
    r.last_seen = inc.at;
    r
}

/// Liveness check; returns the peer's record and the round-trip time in µs.
pub fn ping(d: &mut dyn Driver, address: &str) -> Result<(NodeRecord, u64), DiscoveryError> {
    let timeout = d.node_ref().config.rpc_timeout_us;
    let (inc, rtt) = rpc(
        d,
        address,
        &PayloadMessage::Query(Query::Ping),
        Flags(Flags::REQUIRES_ACK),
        timeout,
    )
    .ok_or(DiscoveryError::Timeout)?;
    let a = announce_of(&inc).ok_or(DiscoveryError::Timeout)?;
    Ok((record_from(&inc, a), rtt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub record: NodeRecord,
    pub rtt_ms: f64,
    pub availability: f64,
}

/// RTT measurement against a provider, which also reports its current
/// availability for `capability_id`.
pub fn probe(d: &mut dyn Driver, address: &str, capability_id: &str) -> Result<Probe, DiscoveryError> {
    let timeout = d.node_ref().config.rpc_timeout_us;
    let (inc, rtt) = rpc(
        d,
        address,
        &PayloadMessage::Query(Query::Capability(capability_id.to_owned())),
        Flags(Flags::REQUIRES_ACK),
        timeout,
    )
    .ok_or(DiscoveryError::Timeout)?;
    let a = announce_of(&inc).ok_or(DiscoveryError::Timeout)?;
    Ok(Probe {
        record: record_from(&inc, a),
        rtt_ms: rtt as f64 / 1000.0,
        availability: a.availability.unwrap_or(0.0),
    })
}

/// Contacts a bootstrap peer and fills the routing table with a lookup of
/// our own id. Returns the routing table size.
pub fn join(d: &mut dyn Driver, bootstrap: &str) -> Result<usize, DiscoveryError> {
    ping(d, bootstrap)?;
    let own = d.node_ref().node_id();
    iterative_lookup(d, own, LookupMode::FindNodes)?;
    Ok(d.node_ref().routing.len())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LookupOutcome {
    pub providers: Vec<ProviderRecord>,
    pub closest: Vec<NodeRecord>,
    pub rounds: usize,
    pub queries: usize,
}

fn usable_providers(target: &NodeId, providers: &[ProviderRecord]) -> Vec<ProviderRecord> {
    providers
        .iter()
        .filter(|p| p.verify() && NodeId::for_capability(&p.capability_id) == *target)
        .cloned()
        .collect()
}

/// Runs one lookup round: queries `picks` in parallel and waits for all of
/// them or the RPC timeout.
fn lookup_round(d: &mut dyn Driver, lookup: &mut Lookup, target: &NodeId, picks: Vec<NodeRecord>) {
    let now = d.now();
    let timeout = d.node_ref().config.rpc_timeout_us;
    let query = PayloadMessage::Query(Query::FindNode(target.0));
    let mut txs = Vec::new();
    for p in picks {
        let Some(addr) = p.primary_address().map(str::to_owned) else {
            lookup.on_failure(&p.node_id);
            continue;
        };
        let tx = d.node().new_transaction_id();
        d.node().expect(tx);
        if d.node().send_message(now, &addr, &query, tx, Flags::empty()).is_err() {
            d.node().forget(&tx);
            lookup.on_failure(&p.node_id);
            continue;
        }
        txs.push((p.node_id, tx));
    }
    let pending: Vec<[u8; 16]> = txs.iter().map(|(_, t)| *t).collect();
    d.run_until(now + timeout, &mut |n| pending.iter().all(|t| n.has_response(t)));
    for (id, tx) in txs {
        let got = d.node().take_responses(&tx);
        d.node().forget(&tx);
        let answer = got
            .iter()
            .find(|inc| NodeId::from_public(&inc.sender) == id)
            .and_then(announce_of);
        match answer {
            Some(a) => {
                let closer = a.closer.iter().filter(|r| r.is_consistent()).cloned().collect();
                lookup.on_response(&id, closer, usable_providers(target, &a.providers));
            }
            None => lookup.on_failure(&id),
        }
    }
}

/// Iterative Kademlia lookup seeded from the local routing table.
pub fn iterative_lookup(
    d: &mut dyn Driver,
    target: NodeId,
    mode: LookupMode,
) -> Result<LookupOutcome, DiscoveryError> {
    let node = d.node_ref();
    if node.routing.is_empty() {
        return Err(DiscoveryError::NoPeers);
    }
    let local = node.dht_store.get(&target).cloned().unwrap_or_default();
    let local = usable_providers(&target, &local);
    if mode == LookupMode::FindValue && !local.is_empty() {
        return Ok(LookupOutcome {
            providers: local,
            ..LookupOutcome::default()
        });
    }
    let seeds = node.routing.closest(&target, node.config.k);
    let mut lookup = Lookup::new(target, node.node_id(), seeds, node.config.k, node.config.alpha, mode);
    loop {
        let picks = lookup.next_round();
        if picks.is_empty() {
            break;
        }
        lookup_round(d, &mut lookup, &target, picks);
    }
    Ok(LookupOutcome {
        closest: lookup.closest_responded(),
        rounds: lookup.rounds(),
        queries: lookup.queries(),
        providers: lookup.into_providers(),
    })
}

/// Publishes this node as a provider of `capability_id` at the k nodes
/// closest to the capability key. Returns how many acknowledged.
pub fn dht_publish(d: &mut dyn Driver, capability_id: &str) -> Result<usize, DiscoveryError> {
    if d.node_ref().routing.is_empty() {
        return Err(DiscoveryError::NoPeers);
    }
    let key = NodeId::for_capability(capability_id);
    let outcome = iterative_lookup(d, key, LookupMode::FindNodes)?;
    let now = d.now();
    let node = d.node();
    let record = ProviderRecord::sign(node.identity(), capability_id, node.record(now));
    let slot = node.dht_store.entry(key).or_default();
    slot.retain(|p| p.record.node_id != record.record.node_id);
    slot.push(record.clone());

    let store = PayloadMessage::Announce(Announce {
        node_id: node.node_id(),
        addresses: vec![node.address().to_owned()],
        providers: vec![record],
        store_key: Some(key.0),
        ..Announce::default()
    });
    let mut txs = Vec::new();
    for peer in &outcome.closest {
        let Some(addr) = peer.primary_address() else { continue };
        let tx = node.new_transaction_id();
        node.expect(tx);
        if node.send_message(now, addr, &store, tx, Flags(Flags::REQUIRES_ACK)).is_ok() {
            txs.push(tx);
        } else {
            node.forget(&tx);
        }
    }
    let timeout = node.config.rpc_timeout_us;
    let pending = txs.clone();
    d.run_until(now + timeout, &mut |n| pending.iter().all(|t| n.has_response(t)));
    let mut acked = 0;
    for tx in txs {
        if !d.node().take_responses(&tx).is_empty() {
            acked += 1;
        }
        d.node().forget(&tx);
    }
    Ok(acked)
}

/// Announces every served capability on the local link.
pub fn mdns_announce(d: &mut dyn Driver) {
    let now = d.now();
    d.node().announce(now);
    // Deliver without waiting for anything.
    d.run_until(now, &mut |_| true);
}

/// Sends a local-link browse query and starts collecting answers under the
/// returned transaction id.
fn start_browse(d: &mut dyn Driver, capability_id: &str) -> [u8; 16] {
    let now = d.now();
    let node = d.node();
    let tx = node.new_transaction_id();
    node.expect(tx);
    let q = PayloadMessage::Query(Query::Capability(capability_id.to_owned()));
    let env = crate::node::Envelope {
        message: &q,
        transaction_id: tx,
        flags: Flags::empty(),
        capability_hash: crate::wire::capability_hash(capability_id).unwrap_or(0),
    };
    if let Err(e) = node.multicast(now, &env) {
        tracing::debug!(error = %e, "browse query not sent");
    }
    tx
}

fn browse_hits(d: &mut dyn Driver, tx: &[u8; 16], capability_id: &str) -> Vec<NodeRecord> {
    let got = d.node().take_responses(tx);
    got.iter()
        .filter_map(|inc| announce_of(inc).map(|a| record_from(inc, a)))
        .filter(|r| r.serves(capability_id))
        .collect()
}

/// Collects local-link providers of `capability_id` for `window_us`.
/// Includes fresh unsolicited announcements already heard.
pub fn mdns_browse(d: &mut dyn Driver, capability_id: &str, window_us: u64) -> Vec<NodeRecord> {
    let start = d.now();
    let tx = start_browse(d, capability_id);
    d.sleep_until(start + window_us);
    let mut out = browse_hits(d, &tx, capability_id);
    d.node().forget(&tx);
    let now = d.now();
    out.extend(d.node_ref().heard_providers(capability_id, now));
    dedup(out)
}

fn dedup(records: Vec<NodeRecord>) -> Vec<NodeRecord> {
    let mut by_id: BTreeMap<NodeId, NodeRecord> = BTreeMap::new();
    for r in records {
        by_id.entry(r.node_id).or_insert(r);
    }
    by_id.into_values().collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiscoveryReport {
    pub providers: Vec<NodeRecord>,
    pub from_cache: bool,
    pub local_hits: usize,
    pub dht_hits: usize,
    pub find_node_rpcs: u64,
    pub messages_sent: u64,
    pub rounds: usize,
    pub elapsed_us: u64,
}

/// Dual-phase discovery. Cache first; otherwise local-link browse and DHT
/// lookup run side by side and their answers are merged. With early
/// cancel on and `wan` off, a local answer within the local window ends
/// discovery before any DHT traffic.
pub fn discover(d: &mut dyn Driver, capability_id: &str, wan: bool) -> DiscoveryReport {
    let start = d.now();
    let (find0, sent0) = {
        let s = &d.node_ref().stats;
        (s.find_node_sent, s.messages_sent)
    };
    if let Some(hit) = d.node_ref().discovery_cache.get(capability_id, start) {
        return DiscoveryReport {
            providers: hit.to_vec(),
            from_cache: true,
            ..DiscoveryReport::default()
        };
    }
    let cfg = d.node_ref().config.clone();
    let deadline = start + cfg.discover_timeout_us;
    let early = cfg.early_cancel && !wan;

    let tx = start_browse(d, capability_id);
    let mut local = d.node_ref().heard_providers(capability_id, start);
    if early {
        let window = start + cfg.local_window_us;
        let t = tx;
        d.run_until(window, &mut |n| n.has_response(&t));
        local.extend(browse_hits(d, &tx, capability_id));
    }

    let mut dht = Vec::new();
    let mut rounds = 0;
    if !(early && !local.is_empty()) && !d.node_ref().routing.is_empty() {
        let key = NodeId::for_capability(capability_id);
        let own = d.node_ref().dht_store.get(&key).cloned().unwrap_or_default();
        dht.extend(usable_providers(&key, &own).into_iter().map(|p| p.record));
        if dht.is_empty() {
            let node = d.node_ref();
            let seeds = node.routing.closest(&key, cfg.k);
            let mut lookup = Lookup::new(key, node.node_id(), seeds, cfg.k, cfg.alpha, LookupMode::FindValue);
            loop {
                if early {
                    local.extend(browse_hits(d, &tx, capability_id));
                    if !local.is_empty() {
                        break;
                    }
                }
                if d.now() >= deadline {
                    break;
                }
                let picks = lookup.next_round();
                if picks.is_empty() {
                    break;
                }
                lookup_round(d, &mut lookup, &key, picks);
            }
            rounds = lookup.rounds();
            dht.extend(lookup.into_providers().into_iter().map(|p| p.record));
        }
    }
    if !cfg.early_cancel {
        // Both phases stay open until the timeout.
        d.sleep_until(deadline);
    } else if !early {
        // Wide-area mode: the lookup has converged; give the link its window.
        d.sleep_until((start + cfg.local_window_us).min(deadline));
    }
    local.extend(browse_hits(d, &tx, capability_id));
    d.node().forget(&tx);

    let local_hits = dedup(local.clone()).len();
    let dht: Vec<NodeRecord> = dht.into_iter().filter(|r| r.serves(capability_id)).collect();
    let dht_hits = dedup(dht.clone()).len();
    let mut all = local;
    all.extend(dht);
    let providers = dedup(all);
    let now = d.now();
    if !providers.is_empty() {
        d.node().discovery_cache.put(capability_id, providers.clone(), now);
    }
    let s = &d.node_ref().stats;
    DiscoveryReport {
        providers,
        from_cache: false,
        local_hits,
        dht_hits,
        find_node_rpcs: s.find_node_sent - find0,
        messages_sent: s.messages_sent - sent0,
        rounds,
        elapsed_us: now - start,
    }
}
