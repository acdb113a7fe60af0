use std::collections::{BTreeMap, BTreeSet, VecDeque};

use ciborium::value::Value;

use super::{Contract, ContractBody, OrchestratorError};
use crate::cbor;
use crate::crypto::{self, Handshake, Role, SessionKeys};
use crate::discovery::{self, DiscoveryError};
use crate::model::{Capability, NodeId, NodeRecord, TypedValue};
use crate::negotiation::{self, CandidateInput, Intent, Outcome, ScoredCandidate};
use crate::node::{response_error, Driver, Envelope, Handler, Incoming, NodeError};
use crate::wire::{
    self, capability_hash, ContractMessage, DataRequest, Flags, PacketType, PayloadMessage,
};

pub const LATENCY_WINDOW: usize = 8;
pub const VIOLATION_LIMIT: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SessionState {
    Discovering,
    Scoring,
    Negotiating,
    Active,
    Healing,
    Closed,
    Failed,
}

impl SessionState {
    /// Whether `self → to` is allowed. Beyond the main cycle, a session
    /// that runs out of candidates before reaching Active may fail.
    pub fn can_move_to(self, to: SessionState) -> bool {
        use SessionState::*;
        match (self, to) {
            (Closed, _) | (Failed, _) => false,
            (_, Closed) => true,
            (Discovering, Scoring) | (Scoring, Negotiating) | (Negotiating, Active) => true,
            (Active, Healing) | (Healing, Scoring) | (Healing, Failed) => true,
            (Discovering | Scoring | Negotiating, Failed) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IntentSession {
    pub state: SessionState,
    pub intent: Intent,
    pub contract: Option<Contract>,
    pub session_keys: Option<SessionKeys>,
    pub provider: Option<NodeRecord>,
    /// Last observed response latencies in ms, oldest first.
    pub latency_window: VecDeque<f64>,
    pub violation_count: u32,
    /// Ranking from the most recent scoring pass.
    pub candidates: Vec<ScoredCandidate>,
    /// Providers skipped during the current healing round.
    pub excluded: BTreeSet<NodeId>,
    /// (time, from, to) for every state change.
    pub transitions: Vec<(u64, SessionState, SessionState)>,
    pub illegal_transitions: u32,
    /// Values handed to the caller so far.
    pub delivered: u64,
    pub heals: u32,
    pub stream: Option<[u8; 16]>,
    /// Transaction id of the most recent data request.
    pub last_request: Option<[u8; 16]>,
    /// Provider of the most recent delivered value.
    pub last_served_by: Option<NodeId>,
}

impl IntentSession {
    pub fn new(intent: Intent) -> Self {
        Self {
            state: SessionState::Discovering,
            intent,
            contract: None,
            session_keys: None,
            provider: None,
            latency_window: VecDeque::with_capacity(LATENCY_WINDOW),
            violation_count: 0,
            candidates: Vec::new(),
            excluded: BTreeSet::new(),
            transitions: Vec::new(),
            illegal_transitions: 0,
            delivered: 0,
            heals: 0,
            stream: None,
            last_request: None,
            last_served_by: None,
        }
    }

    /// Moves to `to`; illegal moves are refused and counted.
    pub fn transition(&mut self, now: u64, to: SessionState) -> bool {
        if !self.state.can_move_to(to) {
            self.illegal_transitions += 1;
            return false;
        }
        self.transitions.push((now, self.state, to));
        self.state = to;
        true
    }

    pub fn visited(&self, state: SessionState) -> bool {
        self.transitions.iter().any(|(_, _, s)| *s == state)
    }

    pub fn provider_id(&self) -> Option<NodeId> {
        self.provider.as_ref().map(|p| p.node_id)
    }
}

fn go(d: &mut dyn Driver, s: &mut IntentSession, to: SessionState) {
    let from = s.state;
    if s.transition(d.now(), to) {
        d.note(&format!("session {from:?} -> {to:?}"));
    }
}

fn fail(d: &mut dyn Driver, s: &mut IntentSession, e: OrchestratorError) -> OrchestratorError {
    go(d, s, SessionState::Failed);
    e
}

/// Registers a capability and advertises it on both discovery paths.
pub fn provider_serve(
    d: &mut dyn Driver,
    capability: Capability,
    availability: f64,
    handler: Handler,
) -> Result<(), NodeError> {
    let id = capability.id.clone();
    d.node().register_capability(capability, availability, handler)?;
    discovery::mdns_announce(d);
    match discovery::dht_publish(d, &id) {
        Ok(_) | Err(DiscoveryError::NoPeers) => Ok(()),
        Err(e) => {
            tracing::warn!(capability = %id, error = %e, "publish failed");
            Ok(())
        }
    }
}

/// Whether the intent asks for wide-area providers explicitly.
fn wants_wan(intent: &Intent) -> bool {
    intent.constraints.get("wan").is_some_and(|v| *v != 0.0)
}

fn collect_candidates(d: &mut dyn Driver, s: &IntentSession) -> Vec<NodeRecord> {
    let cap = s.intent.capability_required.clone();
    let wan = wants_wan(&s.intent) || !s.excluded.is_empty();
    let report = discovery::discover(d, &cap, wan);
    report
        .providers
        .into_iter()
        .filter(|p| !s.excluded.contains(&p.node_id))
        .collect()
}

/// Probes, scores and ranks; drops candidates that fail a hard constraint.
fn score_candidates(
    d: &mut dyn Driver,
    s: &mut IntentSession,
    providers: Vec<NodeRecord>,
) -> Result<Vec<ScoredCandidate>, OrchestratorError> {
    let cap_id = s.intent.capability_required.clone();
    let mut inputs = Vec::new();
    for p in providers {
        let Some(addr) = p.primary_address().map(str::to_owned) else { continue };
        let Ok(probe) = discovery::probe(d, &addr, &cap_id) else { continue };
        // Prefer the probed record: it is fresh and comes from the node itself.
        let mut node = probe.record;
        if node.node_id != p.node_id {
            continue;
        }
        if node.capabilities.is_empty() {
            node.capabilities = p.capabilities.clone();
        }
        if !node.serves(&cap_id) {
            continue;
        }
        let now = d.now();
        inputs.push(CandidateInput {
            reputation: d.node_ref().reputation.get(&node.node_id, now),
            node,
            rtt_ms: probe.rtt_ms,
            availability: probe.availability,
        });
    }
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let now = d.now();
    let node = d.node_ref();
    let desired = s.intent.desired_schema;
    let ranked = negotiation::score(&s.intent, &inputs, now, node.config.lambda, &|c: &Capability| {
        node.adapters.has_adapter(c.schema, desired)
    })?;
    s.candidates = ranked.clone();
    Ok(ranked.into_iter().filter(|c| c.u_func > 0.0).collect())
}

/// Tries candidates in rank order until one contract is signed.
fn contract_best(
    d: &mut dyn Driver,
    s: &mut IntentSession,
    ranked: Vec<ScoredCandidate>,
) -> Result<(), OrchestratorError> {
    go(d, s, SessionState::Negotiating);
    for c in &ranked {
        match negotiate(d, s, c) {
            Ok((contract, keys)) => {
                s.contract = Some(contract);
                s.session_keys = Some(keys);
                s.provider = Some(c.node.clone());
                s.violation_count = 0;
                go(d, s, SessionState::Active);
                return Ok(());
            }
            Err(e) => {
                d.note(&format!("negotiation with {} failed: {e}", c.node.node_id.short()));
                let now = d.now();
                let _ = d.node().reputation.record(&c.node.node_id, Outcome::Failure, now);
            }
        }
    }
    Err(fail(d, s, OrchestratorError::AllCandidatesRejected))
}

/// Discovers, scores and contracts the best provider for `intent`.
pub fn submit_intent(d: &mut dyn Driver, intent: Intent) -> Result<IntentSession, OrchestratorError> {
    let mut s = IntentSession::new(intent);
    establish(d, &mut s).map(|_| s)
}

/// Like [`submit_intent`], but returns the session even on failure.
pub fn establish(d: &mut dyn Driver, s: &mut IntentSession) -> Result<(), OrchestratorError> {
    if let Err(e) = s.intent.validate() {
        return Err(fail(d, s, e.into()));
    }
    let providers = collect_candidates(d, s);
    if providers.is_empty() {
        let cap = s.intent.capability_required.clone();
        return Err(fail(d, s, OrchestratorError::NoProviders(cap)));
    }
    go(d, s, SessionState::Scoring);
    let ranked = match score_candidates(d, s, providers) {
        Ok(r) => r,
        Err(e) => return Err(fail(d, s, e)),
    };
    if ranked.is_empty() {
        return Err(fail(d, s, OrchestratorError::AllCandidatesRejected));
    }
    contract_best(d, s, ranked)
}

/// Waits for a message on `tx` from `sender` that `accept` takes.
fn await_reply<T>(
    d: &mut dyn Driver,
    tx: [u8; 16],
    sender: [u8; 32],
    deadline: u64,
    accept: &dyn Fn(&Incoming) -> Option<T>,
) -> Option<T> {
    loop {
        d.run_until(deadline, &mut |n| n.has_response(&tx));
        for inc in d.node().take_responses(&tx) {
            if inc.sender == sender {
                if let Some(v) = accept(&inc) {
                    return Some(v);
                }
            }
        }
        if d.now() >= deadline {
            return None;
        }
    }
}

/// INTENT_REQUEST → INTENT_PROPOSAL → CONTRACT_ACCEPT → CONTRACT_SIGNED.
pub fn negotiate(
    d: &mut dyn Driver,
    s: &IntentSession,
    candidate: &ScoredCandidate,
) -> Result<(Contract, SessionKeys), OrchestratorError> {
    let provider = &candidate.node;
    let addr = provider
        .primary_address()
        .ok_or_else(|| OrchestratorError::ContractRejected("provider has no address".into()))?
        .to_owned();
    let cap_id = &s.intent.capability_required;
    let cap_hash = capability_hash(cap_id).map_err(NodeError::from)?;
    let cfg = d.node_ref().config.clone();
    let tx = d.node().new_transaction_id();
    d.node().expect(tx);
    let result = negotiate_inner(d, s, provider, &addr, cap_hash, tx, &cfg);
    d.node().forget(&tx);
    result
}

fn negotiate_inner(
    d: &mut dyn Driver,
    s: &IntentSession,
    provider: &NodeRecord,
    addr: &str,
    cap_hash: u32,
    tx: [u8; 16],
    cfg: &crate::node::NodeConfig,
) -> Result<(Contract, SessionKeys), OrchestratorError> {
    let intent = &s.intent;
    let request = PayloadMessage::IntentRequest(intent.to_request());
    let now = d.now();
    d.node().send(
        now,
        addr,
        &Envelope {
            message: &request,
            transaction_id: tx,
            flags: Flags::empty(),
            capability_hash: cap_hash,
        },
    )
    .map_err(NodeError::from)?;
    let proposal = await_reply(d, tx, provider.signing_public, now + cfg.rpc_timeout_us, &|inc| {
        match &inc.message {
            Some(PayloadMessage::IntentProposal(p)) => Some(p.clone()),
            _ => None,
        }
    })
    .ok_or(OrchestratorError::ProposalTimeout)?;

    if proposal.capability.id != intent.capability_required {
        return Err(OrchestratorError::ContractRejected("capability mismatch".into()));
    }
    let (u_func, _) = negotiation::functional_utility(intent, &proposal.capability, {
        let desired = intent.desired_schema;
        d.node_ref().adapters.has_adapter(proposal.capability.schema, desired)
    })?;
    if u_func == 0.0 {
        return Err(OrchestratorError::ContractRejected("offer violates the intent".into()));
    }
    let remote = proposal
        .ephemeral
        .ok_or_else(|| OrchestratorError::ContractRejected("proposal without ephemeral key".into()))?;
    if !remote.verify(&provider.signing_public, &tx) {
        return Err(OrchestratorError::BadSignature);
    }
    let adapter_id = if proposal.capability.schema == intent.desired_schema {
        None
    } else {
        d.node_ref()
            .adapters
            .lookup(proposal.capability.schema, intent.desired_schema)
            .map(|a| a.spec.id.clone())
    };

    let handshake = {
        let node = d.node();
        let identity = node.identity().clone();
        Handshake::start(&identity, tx, Role::Initiator, node.rng())
    };
    let offer = handshake.offer();
    let keys = handshake.finish(&remote, &provider.signing_public)?;

    let now = d.now();
    let qos: BTreeMap<String, f64> = intent
        .constraints
        .iter()
        .filter(|(k, _)| matches!(k.as_str(), "max_latency_ms" | "min_precision"))
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    let body = ContractBody {
        contract_id: tx,
        requester_id: d.node_ref().node_id(),
        provider_id: provider.node_id,
        capability: proposal.capability.clone(),
        agreed_schema: intent.desired_schema,
        adapter_id,
        qos,
        expiry: now + cfg.contract_ttl_us,
    };
    let body_bytes = body.encode();
    let requester_signature = d.node_ref().identity().sign(&body_bytes);
    let accept = PayloadMessage::ContractAccept(ContractMessage {
        body: body_bytes.clone(),
        signature: requester_signature,
        ephemeral: Some(offer),
    });

    let mut signed = None;
    for _ in 0..=cfg.ack_retransmits {
        let now = d.now();
        d.node()
            .send(
                now,
                addr,
                &Envelope {
                    message: &accept,
                    transaction_id: tx,
                    flags: Flags(Flags::REQUIRES_ACK),
                    capability_hash: cap_hash,
                },
            )
            .map_err(NodeError::from)?;
        signed = await_reply(d, tx, provider.signing_public, now + cfg.ack_timeout_us, &|inc| {
            match &inc.message {
                Some(PayloadMessage::ContractSigned(m)) => Some(m.clone()),
                _ => None,
            }
        });
        if signed.is_some() {
            break;
        }
    }
    let signed = signed.ok_or(OrchestratorError::ProposalTimeout)?;
    if !crypto::verify(&provider.signing_public, &signed.body, &signed.signature) {
        return Err(OrchestratorError::BadSignature);
    }
    if signed.body != body_bytes {
        return Err(OrchestratorError::ContractRejected("provider signed different terms".into()));
    }
    let now = d.now();
    d.node()
        .send(
            now,
            addr,
            &Envelope {
                message: &PayloadMessage::Ack,
                transaction_id: tx,
                flags: Flags::empty(),
                capability_hash: cap_hash,
            },
        )
        .map_err(NodeError::from)?;
    let contract = Contract {
        body,
        body_bytes,
        requester_signature,
        provider_signature: signed.signature,
    };
    Ok((contract, keys))
}

/// Records one latency sample. Returns true when it moved the session to
/// Healing.
pub fn monitor_qos(d: &mut dyn Driver, s: &mut IntentSession, observed_latency_ms: f64) -> bool {
    if s.latency_window.len() == LATENCY_WINDOW {
        s.latency_window.pop_front();
    }
    s.latency_window.push_back(observed_latency_ms);
    if s.state != SessionState::Active {
        return false;
    }
    match s.intent.max_latency_ms() {
        Some(max) if observed_latency_ms > max => s.violation_count += 1,
        _ => s.violation_count = 0,
    }
    if s.violation_count >= VIOLATION_LIMIT {
        d.note(&format!("qos violated {} times", s.violation_count));
        go(d, s, SessionState::Healing);
        return true;
    }
    false
}

fn open_response(
    d: &mut dyn Driver,
    s: &IntentSession,
    inc: &Incoming,
) -> Result<(TypedValue, bool), OrchestratorError> {
    let contract = s.contract.as_ref().expect("active session has a contract");
    let keys = s.session_keys.as_ref().expect("active session has keys");
    let plain = keys.open(&inc.payload, &wire::header_aad(&inc.header))?;
    let msg = wire::decode_payload(PacketType::DataResponse, &plain)
        .map_err(|e| OrchestratorError::MalformedResponse(e.to_string()))?;
    let PayloadMessage::DataResponse(r) = msg else {
        return Err(OrchestratorError::MalformedResponse("empty response".into()));
    };
    if r.contract_id != contract.contract_id() {
        return Err(OrchestratorError::MalformedResponse("wrong contract".into()));
    }
    let v = cbor::decode(&r.value).map_err(|e| OrchestratorError::MalformedResponse(e.to_string()))?;
    if let Some(msg) = response_error(&v) {
        return Err(OrchestratorError::ProviderError(msg));
    }
    let native = contract.body.capability.schema;
    let value =
        TypedValue::from_cbor(native, &v).map_err(|e| OrchestratorError::MalformedResponse(e.to_string()))?;
    let agreed = contract.body.agreed_schema;
    let flagged = inc.header.flags.contains(Flags::HAS_ADAPTER);
    if flagged || native != agreed {
        let out = d
            .node_ref()
            .adapters
            .translate(&value, agreed)
            .map_err(OrchestratorError::Translation)?;
        return Ok((out, true));
    }
    Ok((value, false))
}

fn send_data_request(
    d: &mut dyn Driver,
    s: &mut IntentSession,
    params: &BTreeMap<String, Value>,
    flags: Flags,
) -> Result<[u8; 16], OrchestratorError> {
    let contract = s.contract.as_ref().expect("active session has a contract");
    let to = s
        .provider
        .as_ref()
        .and_then(|p| p.primary_address())
        .expect("active session has a provider")
        .to_owned();
    let msg = PayloadMessage::DataRequest(DataRequest {
        contract_id: contract.contract_id(),
        params: params.clone(),
    });
    let cap_hash = capability_hash(&contract.body.capability.id).map_err(NodeError::from)?;
    let tx = d.node().new_transaction_id();
    d.node().expect(tx);
    let now = d.now();
    let keys = s.session_keys.as_mut().expect("active session has keys");
    d.node()
        .send_sealed(
            now,
            &to,
            &Envelope {
                message: &msg,
                transaction_id: tx,
                flags,
                capability_hash: cap_hash,
            },
            keys,
        )
        .map_err(NodeError::from)?;
    s.last_request = Some(tx);
    Ok(tx)
}

/// One encrypted request/response on the active contract. The observed
/// latency feeds [`monitor_qos`]; a timeout sends the session straight to
/// Healing.
pub fn request_data(
    d: &mut dyn Driver,
    s: &mut IntentSession,
    params: &BTreeMap<String, Value>,
) -> Result<TypedValue, OrchestratorError> {
    if s.state != SessionState::Active {
        return Err(OrchestratorError::NotActive(s.state));
    }
    let contract = s.contract.as_ref().expect("active session has a contract");
    if contract.is_expired(d.now()) {
        return Err(OrchestratorError::ContractExpired);
    }
    let provider_key = s.provider.as_ref().expect("active session has a provider").signing_public;
    let start = d.now();
    let tx = send_data_request(d, s, params, Flags::empty())?;
    let deadline = start + d.node_ref().config.data_timeout_us;
    let mut result = Err(OrchestratorError::Timeout);
    let mut at = None;
    loop {
        d.run_until(deadline, &mut |n| n.has_response(&tx));
        let got = d.node().take_responses(&tx);
        for inc in got.iter().filter(|i| i.sender == provider_key) {
            match open_response(d, s, inc) {
                Ok((v, _)) => {
                    result = Ok(v);
                    at = Some(inc.at);
                    break;
                }
                Err(e) => {
                    result = Err(e);
                    at = Some(inc.at);
                }
            }
        }
        if at.is_some() || d.now() >= deadline {
            break;
        }
    }
    d.node().forget(&tx);
    match at {
        Some(t) => {
            let latency_ms = t.saturating_sub(start) as f64 / 1000.0;
            monitor_qos(d, s, latency_ms);
            if result.is_ok() {
                s.delivered += 1;
                s.last_served_by = s.provider_id();
                if let Some(id) = s.provider_id() {
                    let now = d.now();
                    let _ = d.node().reputation.record(&id, Outcome::Success, now);
                }
            }
        }
        None => {
            d.note("data request timed out");
            go(d, s, SessionState::Healing);
        }
    }
    result
}

/// Replaces a failing provider: records the failure, re-runs discovery and
/// scoring without it, and contracts the best alternative.
pub fn heal(d: &mut dyn Driver, s: &mut IntentSession) -> Result<(), OrchestratorError> {
    if s.state != SessionState::Healing {
        return Err(OrchestratorError::NotActive(s.state));
    }
    s.heals += 1;
    let now = d.now();
    let failed = s.provider_id();
    if let Some(id) = failed {
        let _ = d.node().reputation.record(&id, Outcome::Failure, now);
        s.excluded.insert(id);
    }
    let cap = s.intent.capability_required.clone();
    d.node().discovery_cache.invalidate(&cap);
    let providers = collect_candidates(d, s);
    if providers.is_empty() {
        s.excluded.clear();
        return Err(fail(d, s, OrchestratorError::NoAlternateProvider));
    }
    go(d, s, SessionState::Scoring);
    let ranked = score_candidates(d, s, providers);
    s.excluded.clear();
    let ranked = match ranked {
        Ok(r) if !r.is_empty() => r,
        Ok(_) => return Err(fail(d, s, OrchestratorError::NoAlternateProvider)),
        Err(e) => return Err(fail(d, s, e)),
    };
    s.stream = None;
    contract_best(d, s, ranked).map_err(|_| OrchestratorError::NoAlternateProvider)
}

/// [`request_data`] with automatic healing. A request that timed out is
/// retried once on the new provider; a value that arrived late is still
/// returned, and healing happens before the next request.
pub fn request_with_healing(
    d: &mut dyn Driver,
    s: &mut IntentSession,
    params: &BTreeMap<String, Value>,
) -> Result<TypedValue, OrchestratorError> {
    let first = request_data(d, s, params);
    if s.state != SessionState::Healing {
        return first;
    }
    heal(d, s)?;
    match first {
        Err(OrchestratorError::Timeout) => request_data(d, s, params),
        other => other,
    }
}

/// Starts provider-pushed updates at the capability's rate.
pub fn subscribe(
    d: &mut dyn Driver,
    s: &mut IntentSession,
    params: &BTreeMap<String, Value>,
) -> Result<(), OrchestratorError> {
    if s.state != SessionState::Active {
        return Err(OrchestratorError::NotActive(s.state));
    }
    let tx = send_data_request(d, s, params, Flags(Flags::IS_STREAMING))?;
    s.stream = Some(tx);
    Ok(())
}

/// Collects stream values that arrive until `deadline`.
pub fn poll_stream(
    d: &mut dyn Driver,
    s: &mut IntentSession,
    deadline: u64,
) -> Vec<Result<TypedValue, OrchestratorError>> {
    let Some(tx) = s.stream else { return Vec::new() };
    d.sleep_until(deadline);
    let got = d.node().take_responses(&tx);
    let mut out = Vec::new();
    for inc in &got {
        let r = open_response(d, s, inc).map(|(v, _)| v);
        if r.is_ok() {
            s.delivered += 1;
        }
        out.push(r);
    }
    out
}

pub fn close(d: &mut dyn Driver, s: &mut IntentSession) {
    if let Some(tx) = s.stream.take() {
        d.node().forget(&tx);
    }
    go(d, s, SessionState::Closed);
}

#[cfg(test)]
mod tests {
    use super::*;
    use SessionState::*;

    #[test]
    fn transition_table() {
        let legal = [
            (Discovering, Scoring),
            (Scoring, Negotiating),
            (Negotiating, Active),
            (Active, Healing),
            (Healing, Scoring),
            (Healing, Failed),
            (Active, Closed),
            (Discovering, Closed),
            (Discovering, Failed),
        ];
        for (a, b) in legal {
            assert!(a.can_move_to(b), "{a:?} -> {b:?}");
        }
        for (a, b) in [
            (Discovering, Active),
            (Active, Scoring),
            (Healing, Active),
            (Failed, Scoring),
            (Closed, Active),
            (Active, Failed),
        ] {
            assert!(!a.can_move_to(b), "{a:?} -> {b:?}");
        }
    }

    #[test]
    fn three_consecutive_violations() {
        struct NoNet(crate::node::Node);
        impl Driver for NoNet {
            fn now(&self) -> u64 {
                0
            }
            fn node(&mut self) -> &mut crate::node::Node {
                &mut self.0
            }
            fn node_ref(&self) -> &crate::node::Node {
                &self.0
            }
            fn run_until(&mut self, _: u64, done: &mut dyn FnMut(&crate::node::Node) -> bool) -> bool {
                done(&self.0)
            }
        }
        let mut d = NoNet(crate::node::Node::new(
            crate::crypto::NodeIdentity::from_seed([1; 32]),
            "sim://x",
            "lan",
            Default::default(),
            1,
        ));
        let intent = Intent::new("c", crate::model::DataSchema::F32).with_constraint("max_latency_ms", 100.0);
        let run = |d: &mut NoNet, lat: &[f64]| {
            let mut s = IntentSession::new(intent.clone());
            s.state = Active;
            let fired: Vec<bool> = lat.iter().map(|l| monitor_qos(d, &mut s, *l)).collect();
            (fired, s.state)
        };
        assert_eq!(run(&mut d, &[50.0, 60.0]), (vec![false, false], Active));
        assert_eq!(run(&mut d, &[150.0; 3]), (vec![false, false, true], Healing));
        assert_eq!(
            run(&mut d, &[150.0, 50.0, 150.0, 150.0, 150.0]),
            (vec![false, false, false, false, true], Healing)
        );
    }
}
