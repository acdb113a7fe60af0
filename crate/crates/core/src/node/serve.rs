//! Provider-side handlers.

use std::collections::BTreeMap;

use ciborium::value::Value;

use super::{Envelope, Incoming, Node, PendingProposal, ProviderContract, Timer};
use crate::cbor;
use crate::crypto::{self, Handshake, Role};
use crate::model::{NodeId, NodeRecord};
use crate::orchestrator::{Contract, ContractBody};
use crate::wire::{
    self, capability_hash, Announce, ContractMessage, DataRequest, DataResponse, Flags, IntentProposal,
    IntentRequest, PacketType, PayloadMessage, ProviderRecord, Query,
};

/// Proposals not accepted within this window are forgotten.
const PROPOSAL_TTL_US: u64 = 30_000_000;

impl Node {
    fn self_announce(&self, now: u64) -> Announce {
        let r = self.record(now);
        Announce {
            node_id: r.node_id,
            capabilities: r.capabilities,
            addresses: r.addresses,
            ..Announce::default()
        }
    }

    fn reply(&mut self, now: u64, inc: &Incoming, message: PayloadMessage, flags: Flags) {
        let env = Envelope {
            message: &message,
            transaction_id: inc.header.transaction_id,
            flags,
            capability_hash: inc.header.capability_hash,
        };
        let to = inc.from.clone();
        if let Err(e) = self.send(now, &to, &env) {
            self.stats.drop(format!("reply failed: {e}"));
        }
    }

    pub(super) fn handle_query(&mut self, now: u64, inc: &Incoming, q: Query) {
        match q {
            Query::Ping => {
                let a = self.self_announce(now);
                self.reply(now, inc, PayloadMessage::Announce(a), Flags::empty());
            }
            Query::FindNode(target) => {
                let target = NodeId(target);
                let requester = NodeId::from_public(&inc.sender);
                let closer: Vec<NodeRecord> = self
                    .routing
                    .closest(&target, self.config.k + 1)
                    .into_iter()
                    .filter(|r| r.node_id != requester)
                    .take(self.config.k)
                    .collect();
                let providers = self.dht_store.get(&target).cloned().unwrap_or_default();
                let mut a = self.self_announce(now);
                a.closer = closer;
                a.providers = providers;
                self.reply(now, inc, PayloadMessage::Announce(a), Flags::empty());
            }
            Query::Capability(id) => {
                let probe = inc.header.flags.contains(Flags::REQUIRES_ACK);
                let served = self.services.get(&id).map(|s| s.availability);
                if !probe && served.is_none() {
                    return;
                }
                let mut a = self.self_announce(now);
                a.availability = Some(served.unwrap_or(0.0));
                if !probe {
                    let record = self.record(now);
                    let svc = &self.services[&id];
                    a.services = vec![crate::discovery::ServiceInstance::for_capability(
                        &record,
                        &svc.capability,
                    )];
                }
                self.reply(now, inc, PayloadMessage::Announce(a), Flags::empty());
            }
        }
    }

    pub(super) fn handle_store(&mut self, now: u64, inc: &Incoming, a: Announce) {
        let Some(key) = a.store_key else { return };
        let key = NodeId(key);
        let mut stored = 0;
        for p in a.providers {
            if !p.verify() || NodeId::for_capability(&p.capability_id) != key {
                self.stats.drop("bad provider record");
                continue;
            }
            let slot = self.dht_store.entry(key).or_default();
            slot.retain(|x: &ProviderRecord| x.record.node_id != p.record.node_id);
            slot.push(p);
            stored += 1;
        }
        if stored > 0 {
            let ack = self.self_announce(now);
            self.reply(now, inc, PayloadMessage::Announce(ack), Flags::empty());
        }
    }

    pub(super) fn handle_intent_request(&mut self, now: u64, inc: &Incoming, r: IntentRequest) {
        let Some(svc) = self.services.get(&r.capability_id) else {
            return self.stats.drop("capability not served");
        };
        let capability = svc.capability.clone();
        let availability = svc.availability;
        self.pending_proposals
            .retain(|_, p| now.saturating_sub(p.created) < PROPOSAL_TTL_US);
        let tx = inc.header.transaction_id;
        let handshake = Handshake::start(&self.identity, tx, Role::Responder, &mut self.rng);
        let offer = handshake.offer();
        self.pending_proposals.insert(
            tx,
            PendingProposal {
                handshake,
                requester: inc.sender,
                params: r.params,
                created: now,
            },
        );
        let proposal = IntentProposal {
            adapter_required: capability.schema != r.desired_schema,
            capability,
            measured_rtt_ms: 0.0,
            availability,
            ephemeral: Some(offer),
        };
        self.reply(now, inc, PayloadMessage::IntentProposal(proposal), Flags::empty());
    }

    fn send_signed(&mut self, now: u64, tx: [u8; 16]) {
        let Some(pc) = self.provider_contracts.get(&tx) else { return };
        if pc.acked {
            return;
        }
        let (to, msg) = (pc.requester_addr.clone(), pc.signed_payload.clone());
        let cap_hash = capability_hash(&pc.contract.body.capability.id).unwrap_or(0);
        let env = Envelope {
            message: &msg,
            transaction_id: tx,
            flags: Flags(Flags::REQUIRES_ACK),
            capability_hash: cap_hash,
        };
        if let Err(e) = self.send(now, &to, &env) {
            self.stats.drop(format!("reply failed: {e}"));
        }
    }

    pub(super) fn retransmit_signed(&mut self, now: u64, tx: [u8; 16], attempt: u32) {
        if self.provider_contracts.get(&tx).is_some_and(|pc| !pc.acked) {
            self.send_signed(now, tx);
            if attempt < self.config.ack_retransmits {
                self.schedule(now + self.config.ack_timeout_us, Timer::SignedRetransmit(tx, attempt + 1));
            }
        }
    }

    pub(super) fn handle_contract_accept(&mut self, now: u64, inc: &Incoming, m: ContractMessage) {
        let tx = inc.header.transaction_id;
        if self.faults.omit_countersign {
            return self.stats.drop("countersign withheld");
        }
        if self.provider_contracts.contains_key(&tx) {
            // The requester missed our countersignature.
            return self.send_signed(now, tx);
        }
        let Some(pending) = self.pending_proposals.get(&tx) else {
            return self.stats.drop("accept without proposal");
        };
        if pending.requester != inc.sender {
            return self.stats.drop("accept from wrong requester");
        }
        if !crypto::verify(&inc.sender, &m.body, &m.signature) {
            return self.stats.drop("bad contract signature");
        }
        let Ok(body) = ContractBody::decode(&m.body) else {
            return self.stats.drop("malformed contract body");
        };
        let served = self.services.get(&body.capability.id).map(|s| s.capability.clone());
        let valid = body.contract_id == tx
            && body.provider_id == self.node_id()
            && body.requester_id == NodeId::from_public(&inc.sender)
            && served.as_ref() == Some(&body.capability)
            && body.expiry > now;
        if !valid {
            return self.stats.drop("contract terms rejected");
        }
        let Some(remote) = m.ephemeral else {
            return self.stats.drop("accept without ephemeral");
        };
        let pending = self.pending_proposals.remove(&tx).expect("checked above");
        let keys = match pending.handshake.finish(&remote, &inc.sender) {
            Ok(k) => k,
            Err(e) => return self.stats.drop(format!("handshake failed: {e}")),
        };
        let provider_signature = self.identity.sign(&m.body);
        let mut sent_body = m.body.clone();
        if self.faults.tamper_contract {
            if let Some(last) = sent_body.last_mut() {
                *last ^= 0x01;
            }
        }
        let signed = PayloadMessage::ContractSigned(ContractMessage {
            body: sent_body,
            signature: provider_signature,
            ephemeral: None,
        });
        let contract = Contract {
            body,
            body_bytes: m.body,
            requester_signature: m.signature,
            provider_signature,
        };
        self.provider_contracts.insert(
            tx,
            ProviderContract {
                contract,
                keys,
                requester_addr: inc.from.clone(),
                requester_key: inc.sender,
                signed_payload: signed,
                params: pending.params,
                acked: false,
                stream: None,
            },
        );
        self.send_signed(now, tx);
        self.schedule(now + self.config.ack_timeout_us, Timer::SignedRetransmit(tx, 1));
    }

    /// Finds the contract whose session opens this sealed request.
    fn open_request(&self, inc: &Incoming) -> Option<([u8; 16], DataRequest)> {
        let aad = wire::header_aad(&inc.header);
        self.provider_contracts.iter().find_map(|(id, pc)| {
            if pc.requester_key != inc.sender {
                return None;
            }
            let plain = pc.keys.open(&inc.payload, &aad).ok()?;
            match wire::decode_payload(PacketType::DataRequest, &plain).ok()? {
                PayloadMessage::DataRequest(r) if r.contract_id == *id => Some((*id, r)),
                _ => None,
            }
        })
    }

    pub(super) fn handle_data_request(&mut self, now: u64, inc: &Incoming) {
        let Some((id, req)) = self.open_request(inc) else {
            return self.stats.drop("undecryptable data request");
        };
        let pc = &self.provider_contracts[&id];
        if pc.contract.is_expired(now) {
            self.provider_contracts.remove(&id);
            return self.stats.drop("contract expired");
        }
        pc_ack(self, id);
        if req.params.get("stream") == Some(&Value::Bool(false)) {
            if let Some(pc) = self.provider_contracts.get_mut(&id) {
                pc.stream = None;
            }
            return self.respond(now, id, inc.header.transaction_id, &req.params, Flags::empty());
        }
        if inc.header.flags.contains(Flags::IS_STREAMING) {
            let rate = self.provider_contracts[&id].contract.body.capability.rate_hz;
            if rate > 0.0 {
                let tx = inc.header.transaction_id;
                if let Some(pc) = self.provider_contracts.get_mut(&id) {
                    pc.stream = Some(tx);
                }
                let period = (1e6 / rate).round().max(1.0) as u64;
                self.schedule(now + period, Timer::Stream(id));
                return self.respond(now, id, tx, &req.params, Flags(Flags::IS_STREAMING));
            }
        }
        self.respond(now, id, inc.header.transaction_id, &req.params, Flags::empty());
    }

    pub(super) fn stream_tick(&mut self, now: u64, id: [u8; 16]) {
        let Some(pc) = self.provider_contracts.get(&id) else { return };
        let Some(tx) = pc.stream else { return };
        if pc.contract.is_expired(now) {
            return;
        }
        let rate = pc.contract.body.capability.rate_hz;
        self.respond(now, id, tx, &BTreeMap::new(), Flags(Flags::IS_STREAMING));
        let period = (1e6 / rate).round().max(1.0) as u64;
        self.schedule(now + period, Timer::Stream(id));
    }

    fn respond(
        &mut self,
        now: u64,
        id: [u8; 16],
        tx: [u8; 16],
        request_params: &BTreeMap<String, Value>,
        flags: Flags,
    ) {
        let Some(pc) = self.provider_contracts.get(&id) else { return };
        let mut params = pc.params.clone();
        params.extend(request_params.iter().map(|(k, v)| (k.clone(), v.clone())));
        let cap = pc.contract.body.capability.clone();
        let agreed = pc.contract.body.agreed_schema;
        let to = pc.requester_addr.clone();
        let mut keys = pc.keys.clone();

        let result = match self.services.get_mut(&cap.id) {
            Some(svc) => (svc.handler)(&params),
            None => Err("capability withdrawn".to_owned()),
        };
        let value = match result {
            Ok(v) if v.schema() == cap.schema => {
                self.stats.data_served += 1;
                cbor::encode(&v.to_cbor())
            }
            Ok(v) => {
                self.stats.handler_errors += 1;
                error_value(&format!("handler returned {} instead of {}", v.schema(), cap.schema))
            }
            Err(e) => {
                self.stats.handler_errors += 1;
                error_value(&e)
            }
        };
        let flags = if cap.schema != agreed {
            flags.with(Flags::HAS_ADAPTER)
        } else {
            flags
        };
        let msg = PayloadMessage::DataResponse(DataResponse {
            contract_id: id,
            value,
        });
        let env = Envelope {
            message: &msg,
            transaction_id: tx,
            flags,
            capability_hash: capability_hash(&cap.id).unwrap_or(0),
        };
        if let Err(e) = self.send_sealed(now, &to, &env, &mut keys) {
            self.stats.drop(format!("reply failed: {e}"));
        }
        if let Some(pc) = self.provider_contracts.get_mut(&id) {
            pc.keys = keys;
        }
    }
}

/// A data request proves the requester holds the session, so it also
/// acknowledges CONTRACT_SIGNED.
fn pc_ack(node: &mut Node, id: [u8; 16]) {
    if let Some(pc) = node.provider_contracts.get_mut(&id) {
        pc.acked = true;
    }
}

/// The value carried when the provider could not produce data.
pub fn error_value(message: &str) -> Vec<u8> {
    let key = "error".to_owned();
    cbor::encode(&cbor::text_map([(&key, Value::Text(message.to_owned()))]))
}

/// The error text from a response value, if it is an error.
pub fn response_error(value: &Value) -> Option<String> {
    let entries = cbor::read_text_map(value).ok()?;
    match entries.as_slice() {
        [(k, Value::Text(msg))] if k == "error" => Some(msg.clone()),
        _ => None,
    }
}
