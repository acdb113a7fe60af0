//! A protocol node as a pure event-driven state machine.
//!
//! The node never touches a socket or a clock. A driver feeds it datagrams
//! with [`Node::receive`] and fires timers with [`Node::on_timers`], then
//! drains [`Node::take_outbox`]. Server-side behaviour (answering queries,
//! storing DHT records, negotiating and serving contracts) happens inside
//! those calls. Client operations live in the discovery and orchestrator
//! modules and run against a [`Driver`].

mod serve;

pub use serve::{error_value, response_error};

use std::collections::{BTreeMap, BTreeSet};

use ciborium::value::Value;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adapter::{AdapterRegistry, SandboxConfig};
use crate::crypto::{self, Handshake, NodeIdentity, ReplayCache, SessionKeys};
use crate::discovery::{
    DiscoveryCache, InsertOutcome, RoutingTable, ServiceInstance, DEFAULT_ALPHA, DEFAULT_CACHE_TTL_US,
    DEFAULT_K,
};
use crate::model::{Capability, NodeId, NodeRecord, TypedValue};
use crate::negotiation::{ReputationStore, DEFAULT_LAMBDA};
use crate::orchestrator::Contract;
use crate::transport::sim::multicast_group;
use crate::wire::{
    self, build_packet_limited, capability_hash, decode_payload, encode_payload_with_sender, header_aad,
    peek_sender, Flags, HeaderFields, PacketHeader, PacketType, PayloadMessage, ProviderRecord, Query,
    WireError, DEFAULT_MAX_PAYLOAD,
};

pub type Handler = Box<dyn FnMut(&BTreeMap<String, Value>) -> Result<TypedValue, String> + Send>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("capability {0} is already registered on this node")]
    DuplicateCapabilityId(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub k: usize,
    pub alpha: usize,
    pub skew_window_us: u64,
    pub lru_capacity: usize,
    pub lambda: f64,
    pub cache_ttl_us: u64,
    pub rpc_timeout_us: u64,
    /// How long discovery waits for a local-link answer before starting
    /// the DHT path when early-cancel is on.
    pub local_window_us: u64,
    pub discover_timeout_us: u64,
    pub early_cancel: bool,
    pub data_timeout_us: u64,
    pub ack_timeout_us: u64,
    pub ack_retransmits: u32,
    pub contract_ttl_us: u64,
    pub packet_ttl_ms: u32,
    pub max_payload: usize,
    /// Period of unsolicited local-link announcements once started; 0
    /// disables repetition.
    pub announce_interval_us: u64,
    /// Lifetime of passively heard local announcements.
    pub announce_ttl_us: u64,
    pub sandbox: SandboxConfig,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            alpha: DEFAULT_ALPHA,
            skew_window_us: crypto::DEFAULT_SKEW_WINDOW_US,
            lru_capacity: crypto::DEFAULT_LRU_CAPACITY,
            lambda: DEFAULT_LAMBDA,
            cache_ttl_us: DEFAULT_CACHE_TTL_US,
            rpc_timeout_us: 500_000,
            local_window_us: 10_000,
            discover_timeout_us: 2_000_000,
            early_cancel: true,
            data_timeout_us: 1_000_000,
            ack_timeout_us: 250_000,
            ack_retransmits: 2,
            contract_ttl_us: 600_000_000,
            packet_ttl_ms: 5_000,
            max_payload: DEFAULT_MAX_PAYLOAD,
            announce_interval_us: 15_000_000,
            announce_ttl_us: 45_000_000,
            sandbox: SandboxConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outgoing {
    Unicast { to: String, bytes: Vec<u8> },
    Multicast { group: String, bytes: Vec<u8> },
}

/// A validated packet addressed to a pending client operation.
#[derive(Debug, Clone)]
pub struct Incoming {
    pub from: String,
    pub sender: [u8; 32],
    pub header: PacketHeader,
    pub payload: Vec<u8>,
    /// Decoded payload; `None` while still encrypted.
    pub message: Option<PayloadMessage>,
    pub at: u64,
}

/// Injected misbehaviour for tests and scenarios.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Faults {
    /// Drop all traffic in both directions.
    pub muted: bool,
    /// Never answer CONTRACT_ACCEPT.
    pub omit_countersign: bool,
    /// Alter the contract body in CONTRACT_SIGNED.
    pub tamper_contract: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub sent: BTreeMap<&'static str, u64>,
    pub messages_sent: u64,
    pub find_node_sent: u64,
    pub received: u64,
    pub dropped: BTreeMap<String, u64>,
    pub data_served: u64,
    pub handler_errors: u64,
    pub evictions: u64,
}

impl NodeStats {
    fn drop(&mut self, reason: impl Into<String>) {
        *self.dropped.entry(reason.into()).or_default() += 1;
    }

    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }
}

pub(crate) struct Service {
    pub capability: Capability,
    pub availability: f64,
    pub handler: Handler,
}

pub(crate) struct PendingProposal {
    pub handshake: Handshake,
    pub requester: [u8; 32],
    pub params: BTreeMap<String, Value>,
    pub created: u64,
}

pub(crate) struct ProviderContract {
    pub contract: Contract,
    pub keys: SessionKeys,
    pub requester_addr: String,
    pub requester_key: [u8; 32],
    pub signed_payload: PayloadMessage,
    pub params: BTreeMap<String, Value>,
    pub acked: bool,
    pub stream: Option<[u8; 16]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Timer {
    PingTimeout([u8; 16]),
    Stream([u8; 16]),
    SignedRetransmit([u8; 16], u32),
    Announce,
}

pub(crate) struct PendingPing {
    pub oldest: NodeRecord,
    pub candidate: NodeRecord,
    pub bucket: usize,
}

/// Arguments for building one outgoing packet.
pub struct Envelope<'a> {
    pub message: &'a PayloadMessage,
    pub transaction_id: [u8; 16],
    pub flags: Flags,
    pub capability_hash: u32,
}

pub struct Node {
    pub config: NodeConfig,
    identity: NodeIdentity,
    address: String,
    segment: String,
    rng: ChaCha8Rng,
    sequence: u32,
    pub routing: RoutingTable,
    pub dht_store: BTreeMap<NodeId, Vec<ProviderRecord>>,
    pub discovery_cache: DiscoveryCache,
    pub mdns_seen: BTreeMap<NodeId, (NodeRecord, u64)>,
    peers: BTreeMap<String, [u8; 32]>,
    replay: BTreeMap<[u8; 32], ReplayCache>,
    pub(crate) services: BTreeMap<String, Service>,
    pub reputation: ReputationStore,
    pub adapters: AdapterRegistry,
    pub(crate) pending_proposals: BTreeMap<[u8; 16], PendingProposal>,
    pub(crate) provider_contracts: BTreeMap<[u8; 16], ProviderContract>,
    waiting: BTreeSet<[u8; 16]>,
    inbox: BTreeMap<[u8; 16], Vec<Incoming>>,
    pub(crate) pending_pings: BTreeMap<[u8; 16], PendingPing>,
    timers: BTreeSet<(u64, u64, Timer)>,
    timer_seq: u64,
    outbox: Vec<Outgoing>,
    announcing: bool,
    pub stats: NodeStats,
    pub faults: Faults,
}

impl Node {
    pub fn new(
        identity: NodeIdentity,
        address: impl Into<String>,
        segment: impl Into<String>,
        config: NodeConfig,
        rng_seed: u64,
    ) -> Self {
        let routing = RoutingTable::new(identity.node_id(), config.k, config.alpha);
        Self {
            routing,
            dht_store: BTreeMap::new(),
            discovery_cache: DiscoveryCache::new(config.cache_ttl_us),
            mdns_seen: BTreeMap::new(),
            peers: BTreeMap::new(),
            replay: BTreeMap::new(),
            services: BTreeMap::new(),
            reputation: ReputationStore::new(config.lambda),
            adapters: AdapterRegistry::new(config.sandbox),
            pending_proposals: BTreeMap::new(),
            provider_contracts: BTreeMap::new(),
            waiting: BTreeSet::new(),
            inbox: BTreeMap::new(),
            pending_pings: BTreeMap::new(),
            timers: BTreeSet::new(),
            timer_seq: 0,
            outbox: Vec::new(),
            announcing: false,
            stats: NodeStats::default(),
            faults: Faults::default(),
            identity,
            address: address.into(),
            segment: segment.into(),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            sequence: 0,
            config,
        }
    }

    pub fn identity(&self) -> &NodeIdentity {
        &self.identity
    }

    pub fn node_id(&self) -> NodeId {
        self.identity.node_id()
    }

    pub fn public(&self) -> [u8; 32] {
        self.identity.public()
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn segment(&self) -> &str {
        &self.segment
    }

    pub fn multicast_group(&self) -> String {
        multicast_group(&self.segment)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// This node as a routing contact, with its served capabilities.
    pub fn record(&self, now: u64) -> NodeRecord {
        let mut r = NodeRecord::new(self.public(), vec![self.address.clone()]);
        r.capabilities = self.services.values().map(|s| s.capability.clone()).collect();
        r.last_seen = now;
        r
    }

    pub fn capabilities(&self) -> Vec<Capability> {
        self.services.values().map(|s| s.capability.clone()).collect()
    }

    pub fn serves(&self, capability_id: &str) -> bool {
        self.services.contains_key(capability_id)
    }

    pub fn register_capability(
        &mut self,
        capability: Capability,
        availability: f64,
        handler: Handler,
    ) -> Result<(), NodeError> {
        capability.validate()?;
        if self.services.contains_key(&capability.id) {
            return Err(NodeError::DuplicateCapabilityId(capability.id));
        }
        self.services.insert(
            capability.id.clone(),
            Service {
                capability,
                availability: availability.clamp(0.0, 1.0),
                handler,
            },
        );
        Ok(())
    }

    pub fn set_availability(&mut self, capability_id: &str, availability: f64) {
        if let Some(s) = self.services.get_mut(capability_id) {
            s.availability = availability.clamp(0.0, 1.0);
        }
    }

    pub fn service_instances(&self, now: u64) -> Vec<ServiceInstance> {
        let record = self.record(now);
        self.services
            .values()
            .map(|s| ServiceInstance::for_capability(&record, &s.capability))
            .collect()
    }

    pub fn provider_contract_count(&self) -> usize {
        self.provider_contracts.len()
    }

    pub fn provider_contract(&self, id: &[u8; 16]) -> Option<&Contract> {
        self.provider_contracts.get(id).map(|p| &p.contract)
    }

    pub fn known_peer(&self, address: &str) -> Option<[u8; 32]> {
        self.peers.get(address).copied()
    }

    pub fn learn_peer(&mut self, address: &str, public: [u8; 32]) {
        self.peers.insert(address.to_owned(), public);
    }

    pub fn new_transaction_id(&mut self) -> [u8; 16] {
        let mut b = [0u8; 16];
        self.rng.fill_bytes(&mut b);
        // RFC 4122 version 4 layout.
        *uuid::Builder::from_random_bytes(b).into_uuid().as_bytes()
    }

    // ---- client plumbing -------------------------------------------------

    /// Routes future packets with this transaction id to the inbox.
    pub fn expect(&mut self, tx: [u8; 16]) {
        self.waiting.insert(tx);
    }

    pub fn has_response(&self, tx: &[u8; 16]) -> bool {
        self.inbox.get(tx).is_some_and(|v| !v.is_empty())
    }

    pub fn response_count(&self, tx: &[u8; 16]) -> usize {
        self.inbox.get(tx).map_or(0, Vec::len)
    }

    pub fn take_responses(&mut self, tx: &[u8; 16]) -> Vec<Incoming> {
        self.inbox.remove(tx).unwrap_or_default()
    }

    pub fn forget(&mut self, tx: &[u8; 16]) {
        self.waiting.remove(tx);
        self.inbox.remove(tx);
    }

    pub fn take_outbox(&mut self) -> Vec<Outgoing> {
        std::mem::take(&mut self.outbox)
    }

    pub fn has_outgoing(&self) -> bool {
        !self.outbox.is_empty()
    }

    // ---- sending ----------------------------------------------------------

    fn fields(&mut self, now: u64, env: &Envelope<'_>) -> HeaderFields {
        self.sequence = self.sequence.wrapping_add(1);
        HeaderFields {
            packet_type: env.message.packet_type(),
            transaction_id: env.transaction_id,
            capability_hash: env.capability_hash,
            sequence_number: self.sequence,
            flags: env.flags,
            timestamp: now,
            ttl: self.config.packet_ttl_ms,
        }
    }

    fn count_sent(&mut self, message: &PayloadMessage) {
        self.stats.messages_sent += 1;
        *self.stats.sent.entry(message.packet_type().name()).or_default() += 1;
        if matches!(message, PayloadMessage::Query(Query::FindNode(_))) {
            self.stats.find_node_sent += 1;
        }
    }

    /// Builds a signed plaintext packet.
    pub fn build(&mut self, now: u64, env: &Envelope<'_>) -> Result<Vec<u8>, WireError> {
        let fields = self.fields(now, env);
        let payload = match env.message {
            PayloadMessage::Ack => Vec::new(),
            m => encode_payload_with_sender(m, &self.identity.public()),
        };
        let p = build_packet_limited(&fields, payload, self.identity.signing_key(), self.config.max_payload)?;
        Ok(p.to_bytes())
    }

    /// Builds a packet whose payload is sealed under `keys`, with the
    /// header bound in as associated data.
    pub fn build_sealed(
        &mut self,
        now: u64,
        env: &Envelope<'_>,
        keys: &mut SessionKeys,
    ) -> Result<Vec<u8>, WireError> {
        let env = Envelope {
            message: env.message,
            transaction_id: env.transaction_id,
            flags: env.flags.with(Flags::IS_ENCRYPTED),
            capability_hash: env.capability_hash,
        };
        let fields = self.fields(now, &env);
        let plain = wire::encode_payload(env.message);
        let len = SessionKeys::sealed_len(plain.len());
        let aad = header_aad(&fields.unsigned_header(len as u32));
        let sealed = keys.seal(&plain, &aad);
        let p = build_packet_limited(&fields, sealed, self.identity.signing_key(), self.config.max_payload)?;
        Ok(p.to_bytes())
    }

    pub fn send(&mut self, now: u64, to: &str, env: &Envelope<'_>) -> Result<(), WireError> {
        if self.faults.muted {
            return Ok(());
        }
        let bytes = self.build(now, env)?;
        self.count_sent(env.message);
        self.outbox.push(Outgoing::Unicast {
            to: to.to_owned(),
            bytes,
        });
        Ok(())
    }

    pub fn send_sealed(
        &mut self,
        now: u64,
        to: &str,
        env: &Envelope<'_>,
        keys: &mut SessionKeys,
    ) -> Result<(), WireError> {
        if self.faults.muted {
            return Ok(());
        }
        let bytes = self.build_sealed(now, env, keys)?;
        self.count_sent(env.message);
        self.outbox.push(Outgoing::Unicast {
            to: to.to_owned(),
            bytes,
        });
        Ok(())
    }

    pub fn multicast(&mut self, now: u64, env: &Envelope<'_>) -> Result<(), WireError> {
        if self.faults.muted {
            return Ok(());
        }
        let bytes = self.build(now, env)?;
        self.count_sent(env.message);
        let group = self.multicast_group();
        self.outbox.push(Outgoing::Multicast { group, bytes });
        Ok(())
    }

    /// Convenience for a plaintext request with no capability context.
    pub fn send_message(
        &mut self,
        now: u64,
        to: &str,
        message: &PayloadMessage,
        tx: [u8; 16],
        flags: Flags,
    ) -> Result<(), WireError> {
        let cap_hash = match message {
            PayloadMessage::Query(Query::Capability(id)) => capability_hash(id)?,
            _ => 0,
        };
        self.send(
            now,
            to,
            &Envelope {
                message,
                transaction_id: tx,
                flags,
                capability_hash: cap_hash,
            },
        )
    }

    // ---- timers -------------------------------------------------------------

    pub(crate) fn schedule(&mut self, at: u64, timer: Timer) {
        self.timer_seq += 1;
        self.timers.insert((at, self.timer_seq, timer));
    }

    pub fn next_timer(&self) -> Option<u64> {
        self.timers.first().map(|(at, _, _)| *at)
    }

    pub fn on_timers(&mut self, now: u64) {
        while let Some(&(at, seq, timer)) = self.timers.first() {
            if at > now {
                break;
            }
            self.timers.remove(&(at, seq, timer));
            match timer {
                Timer::PingTimeout(tx) => self.ping_timeout(tx),
                Timer::Stream(contract_id) => self.stream_tick(now, contract_id),
                Timer::SignedRetransmit(tx, attempt) => self.retransmit_signed(now, tx, attempt),
                Timer::Announce => {
                    self.announcing = false;
                    self.announce(now);
                }
            }
        }
    }

    /// Multicasts this node's service instances on its segment and keeps
    /// repeating every `announce_interval_us` with ±10% jitter.
    pub fn announce(&mut self, now: u64) {
        if self.services.is_empty() {
            return;
        }
        let record = self.record(now);
        let message = PayloadMessage::Announce(wire::Announce {
            node_id: record.node_id,
            capabilities: record.capabilities.clone(),
            addresses: record.addresses.clone(),
            services: self.service_instances(now),
            ..wire::Announce::default()
        });
        let tx = self.new_transaction_id();
        let env = Envelope {
            message: &message,
            transaction_id: tx,
            flags: Flags::empty(),
            capability_hash: 0,
        };
        if let Err(e) = self.multicast(now, &env) {
            self.stats.drop(format!("announce failed: {e}"));
        }
        let interval = self.config.announce_interval_us;
        if interval > 0 && !self.announcing {
            let spread = interval / 10;
            let jitter = if spread > 0 { self.rng.next_u64() % (2 * spread + 1) } else { 0 };
            self.announcing = true;
            self.schedule(now + interval - spread + jitter, Timer::Announce);
        }
    }

    // ---- routing table maintenance -------------------------------------------

    fn observe_contact(&mut self, now: u64, public: [u8; 32], from: &str) {
        let mut record = NodeRecord::new(public, vec![from.to_owned()]);
        record.last_seen = now;
        if let Some(existing) = self.routing.get(&record.node_id) {
            record.capabilities = existing.capabilities.clone();
        }
        if let InsertOutcome::BucketFull { oldest } = self.routing.insert(record.clone()) {
            let bucket = crate::discovery::bucket_index(&self.node_id(), &oldest.node_id).unwrap_or(0);
            if self.pending_pings.values().any(|p| p.bucket == bucket) {
                return;
            }
            let Some(addr) = oldest.primary_address().map(str::to_owned) else {
                return;
            };
            let tx = self.new_transaction_id();
            let sent = self.send_message(
                now,
                &addr,
                &PayloadMessage::Query(Query::Ping),
                tx,
                Flags(Flags::REQUIRES_ACK),
            );
            if sent.is_ok() {
                self.pending_pings.insert(
                    tx,
                    PendingPing {
                        oldest,
                        candidate: record,
                        bucket,
                    },
                );
                self.schedule(now + self.config.rpc_timeout_us, Timer::PingTimeout(tx));
            }
        }
    }

    fn ping_timeout(&mut self, tx: [u8; 16]) {
        if let Some(p) = self.pending_pings.remove(&tx) {
            self.routing.resolve_full(&p.oldest.node_id, false, p.candidate);
            self.stats.evictions += 1;
        }
    }

    fn ping_answered(&mut self, tx: &[u8; 16]) -> bool {
        match self.pending_pings.remove(tx) {
            Some(p) => {
                self.routing.resolve_full(&p.oldest.node_id, true, p.candidate);
                true
            }
            None => false,
        }
    }

    // ---- receive pipeline ---------------------------------------------------------

    /// Validates and dispatches one datagram.
    pub fn receive(&mut self, now: u64, from: &str, raw: &[u8]) {
        if self.faults.muted {
            self.stats.drop("muted");
            return;
        }
        let (header, payload) = match wire::extract(raw) {
            Ok(x) => x,
            Err(e) => return self.stats.drop(e.to_string()),
        };
        if let Err(e) = wire::verify_checksum(raw) {
            return self.stats.drop(e.to_string());
        }
        let claimed = if header.flags.contains(Flags::IS_ENCRYPTED) {
            None
        } else {
            peek_sender(payload)
        };
        let Some(sender) = claimed.or_else(|| self.peers.get(from).copied()) else {
            return self.stats.drop("unknown sender");
        };
        if let Err(e) = wire::verify_signature(raw, &sender) {
            return self.stats.drop(e.to_string());
        }
        let (skew, cap) = (self.config.skew_window_us, self.config.lru_capacity);
        let cache = self
            .replay
            .entry(sender)
            .or_insert_with(|| ReplayCache::new(skew, cap));
        if let Err(e) = wire::check_freshness(&header, now, cache) {
            return self.stats.drop(e.to_string());
        }
        if header.flags.contains(Flags::IS_COMPRESSED) {
            return self.stats.drop(WireError::CompressionUnsupported.to_string());
        }
        let payload = payload.to_vec();
        let message = if header.flags.contains(Flags::IS_ENCRYPTED) {
            None
        } else {
            match decode_payload(header.packet_type, &payload) {
                Ok(m) => Some(m),
                Err(e) => return self.stats.drop(e.to_string()),
            }
        };
        self.stats.received += 1;
        self.peers.insert(from.to_owned(), sender);
        self.observe_contact(now, sender, from);

        let incoming = Incoming {
            from: from.to_owned(),
            sender,
            header,
            payload,
            message,
            at: now,
        };
        self.dispatch(now, incoming);
    }

    fn deliver(&mut self, incoming: Incoming) {
        self.inbox
            .entry(incoming.header.transaction_id)
            .or_default()
            .push(incoming);
    }

    fn dispatch(&mut self, now: u64, inc: Incoming) {
        let tx = inc.header.transaction_id;
        let ptype = inc.header.packet_type;
        // Requests are always served; responses go to whoever waits on them.
        match (&inc.message, ptype) {
            (Some(PayloadMessage::Query(q)), _) => {
                let q = q.clone();
                self.handle_query(now, &inc, q);
            }
            (Some(PayloadMessage::Announce(a)), _) => {
                let pinged = self.ping_answered(&tx);
                if self.waiting.contains(&tx) {
                    self.deliver(inc);
                } else if a.store_key.is_some() {
                    let a = a.clone();
                    self.handle_store(now, &inc, a);
                } else if !pinged && !a.services.is_empty() {
                    let a = a.clone();
                    self.note_announcement(now, &inc, &a);
                }
            }
            (Some(PayloadMessage::IntentRequest(r)), _) => {
                let r = r.clone();
                self.handle_intent_request(now, &inc, r);
            }
            (Some(PayloadMessage::ContractAccept(c)), _) => {
                let c = c.clone();
                self.handle_contract_accept(now, &inc, c);
            }
            (None, PacketType::DataRequest) => self.handle_data_request(now, &inc),
            (Some(PayloadMessage::Ack), _) if self.provider_contracts.contains_key(&tx) && !self.waiting.contains(&tx) => {
                if let Some(pc) = self.provider_contracts.get_mut(&tx) {
                    pc.acked = true;
                }
            }
            _ if self.waiting.contains(&tx) => self.deliver(inc),
            (Some(PayloadMessage::ContractSigned(_)), _) if inc.header.flags.contains(Flags::REQUIRES_ACK) => {
                // A late retransmission; acknowledge so the provider stops.
                let env = Envelope {
                    message: &PayloadMessage::Ack,
                    transaction_id: tx,
                    flags: Flags::empty(),
                    capability_hash: inc.header.capability_hash,
                };
                let _ = self.send(now, &inc.from, &env);
            }
            _ => self.stats.drop("unsolicited"),
        }
    }

    fn note_announcement(&mut self, now: u64, inc: &Incoming, a: &wire::Announce) {
        let mut record = NodeRecord::new(inc.sender, a.addresses.clone());
        if record.node_id != a.node_id {
            return self.stats.drop("announce id mismatch");
        }
        if record.addresses.is_empty() {
            record.addresses.push(inc.from.clone());
        }
        record.capabilities = a.capabilities.clone();
        record.last_seen = now;
        self.mdns_seen
            .insert(record.node_id, (record, now + self.config.announce_ttl_us));
    }

    /// Locally heard announcements for `capability_id` that are still fresh.
    pub fn heard_providers(&self, capability_id: &str, now: u64) -> Vec<NodeRecord> {
        self.mdns_seen
            .values()
            .filter(|(r, exp)| now < *exp && r.serves(capability_id))
            .map(|(r, _)| r.clone())
            .collect()
    }
}

/// What a client operation needs from whoever runs the node.
pub trait Driver {
    fn now(&self) -> u64;
    fn node(&mut self) -> &mut Node;
    fn node_ref(&self) -> &Node;
    /// Flushes the node's outbox and processes network and timer events
    /// until `done` holds for the local node or `deadline` passes. Returns
    /// the final value of `done`.
    fn run_until(&mut self, deadline: u64, done: &mut dyn FnMut(&Node) -> bool) -> bool;

    /// Records a line in whatever event log the driver keeps.
    fn note(&mut self, _line: &str) {}

    /// Runs until the deadline regardless of state.
    fn sleep_until(&mut self, deadline: u64) {
        self.run_until(deadline, &mut |_| false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(seed: u8) -> Node {
        Node::new(
            NodeIdentity::from_seed([seed; 32]),
            format!("sim://n{seed}"),
            "lan",
            NodeConfig::default(),
            seed as u64,
        )
    }

    #[test]
    fn duplicate_capability_rejected() {
        let mut n = node(1);
        let cap = Capability::new("machine:fluid:fill", crate::model::DataSchema::U32);
        n.register_capability(cap.clone(), 0.9, Box::new(|_| Ok(TypedValue::U32(1)))).unwrap();
        assert_eq!(
            n.register_capability(cap, 0.9, Box::new(|_| Ok(TypedValue::U32(1)))),
            Err(NodeError::DuplicateCapabilityId("machine:fluid:fill".into()))
        );
    }

    #[test]
    fn ping_gets_announce_back() {
        let now = crate::transport::sim::SIM_EPOCH_US;
        let mut a = node(1);
        let mut b = node(2);
        let tx = a.new_transaction_id();
        a.expect(tx);
        a.send_message(now, b.address(), &PayloadMessage::Query(Query::Ping), tx, Flags(Flags::REQUIRES_ACK))
            .unwrap();
        for o in a.take_outbox() {
            let Outgoing::Unicast { bytes, .. } = o else { panic!() };
            b.receive(now + 10, "sim://n1", &bytes);
        }
        for o in b.take_outbox() {
            let Outgoing::Unicast { to, bytes } = o else { panic!() };
            assert_eq!(to, "sim://n1");
            a.receive(now + 20, "sim://n2", &bytes);
        }
        let r = a.take_responses(&tx);
        assert_eq!(r.len(), 1);
        assert!(matches!(r[0].message, Some(PayloadMessage::Announce(_))));
        assert_eq!(a.routing.len(), 1);
        assert_eq!(b.routing.len(), 1);

        // The same bytes again are a replay.
        let dup = a.build(now, &Envelope {
            message: &PayloadMessage::Query(Query::Ping),
            transaction_id: tx,
            flags: Flags(0),
            capability_hash: 0,
        }).unwrap();
        b.receive(now + 30, "sim://n1", &dup);
        b.receive(now + 31, "sim://n1", &dup);
        assert_eq!(b.stats.dropped.get("replayed or stale packet").copied(), Some(1));
    }
}
