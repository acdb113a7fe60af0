//! CBOR payload schemas, one per packet type.
//!
//! All payloads are integer-keyed maps encoded deterministically (see
//! [`crate::cbor`]). Key 9 is reserved in every map for the sender's Ed25519
//! public key so a receiver can authenticate first contact.

use std::collections::BTreeMap;

use ciborium::value::Value;
use thiserror::Error;

use super::PacketType;
use crate::cbor::{self, CborError, MapBuilder, MapView};
use crate::crypto::{self, NodeIdentity, SignedEphemeral};
use crate::discovery::mdns::ServiceInstance;
use crate::model::{Capability, DataSchema, ModelError, NodeId, NodeRecord};

pub const SENDER_KEY: u64 = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PayloadError {
    #[error("payload does not match the {0} schema: {1}")]
    SchemaMismatch(PacketType, String),
    #[error("malformed CBOR: {0}")]
    MalformedCbor(String),
}

/// A capability provider entry stored in the DHT, signed by the provider.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderRecord {
    pub capability_id: String,
    pub record: NodeRecord,
    pub signature: [u8; 64],
}

impl ProviderRecord {
    fn signed_body(capability_id: &str, record: &NodeRecord) -> Vec<u8> {
        cbor::encode(
            &MapBuilder::new()
                .put(0, capability_id)
                .put(1, record.to_cbor())
                .build(),
        )
    }

    pub fn sign(identity: &NodeIdentity, capability_id: &str, record: NodeRecord) -> Self {
        let signature = identity.sign(&Self::signed_body(capability_id, &record));
        Self {
            capability_id: capability_id.to_owned(),
            record,
            signature,
        }
    }

    /// Signature valid for the embedded public key, which must also hash to
    /// the embedded node id.
    pub fn verify(&self) -> bool {
        self.record.is_consistent()
            && crypto::verify(
                &self.record.signing_public,
                &Self::signed_body(&self.capability_id, &self.record),
                &self.signature,
            )
    }

    pub fn to_cbor(&self) -> Value {
        MapBuilder::new()
            .put(0, self.capability_id.as_str())
            .put(1, self.record.to_cbor())
            .bytes(2, &self.signature)
            .build()
    }

    pub fn from_cbor(v: &Value) -> Result<Self, ModelError> {
        let m = MapView::new(v)?;
        Ok(Self {
            capability_id: m.text(0)?.to_owned(),
            record: NodeRecord::from_cbor(m.required(1)?)?,
            signature: m.fixed::<64>(2)?,
        })
    }
}

/// DISCOVERY_ANNOUNCE. Plain announcements use keys 0–2; DHT replies and
/// stores add closer contacts (3), provider records (4) and a store key
/// (5); local-link announcements carry DNS-SD service instances (6); RTT
/// probe replies carry advertised availability (7).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Announce {
    pub node_id: NodeId,
    pub capabilities: Vec<Capability>,
    pub addresses: Vec<String>,
    pub closer: Vec<NodeRecord>,
    pub providers: Vec<ProviderRecord>,
    pub store_key: Option<[u8; 32]>,
    pub services: Vec<ServiceInstance>,
    pub availability: Option<f64>,
}

/// DISCOVERY_QUERY. Key 0 holds a capability id (text) for local-link
/// browsing and RTT probes, a 32-byte target for FIND_NODE, or is absent
/// for a liveness ping.
#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Capability(String),
    FindNode([u8; 32]),
    Ping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentRequest {
    pub capability_id: String,
    pub desired_schema: DataSchema,
    pub params: BTreeMap<String, Value>,
    pub constraints: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentProposal {
    pub capability: Capability,
    pub measured_rtt_ms: f64,
    pub availability: f64,
    pub adapter_required: bool,
    pub ephemeral: Option<SignedEphemeral>,
}

/// CONTRACT_ACCEPT and CONTRACT_SIGNED.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractMessage {
    pub body: Vec<u8>,
    pub signature: [u8; 64],
    pub ephemeral: Option<SignedEphemeral>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataRequest {
    pub contract_id: [u8; 16],
    pub params: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataResponse {
    pub contract_id: [u8; 16],
    /// CBOR encoding of the response value.
    pub value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PayloadMessage {
    Announce(Announce),
    Query(Query),
    IntentRequest(IntentRequest),
    IntentProposal(IntentProposal),
    ContractAccept(ContractMessage),
    ContractSigned(ContractMessage),
    DataRequest(DataRequest),
    DataResponse(DataResponse),
    /// Empty DATA_RESPONSE acknowledging a REQUIRES_ACK packet.
    Ack,
}

impl PayloadMessage {
    pub fn packet_type(&self) -> PacketType {
        match self {
            Self::Announce(_) => PacketType::DiscoveryAnnounce,
            Self::Query(_) => PacketType::DiscoveryQuery,
            Self::IntentRequest(_) => PacketType::IntentRequest,
            Self::IntentProposal(_) => PacketType::IntentProposal,
            Self::ContractAccept(_) => PacketType::ContractAccept,
            Self::ContractSigned(_) => PacketType::ContractSigned,
            Self::DataRequest(_) => PacketType::DataRequest,
            Self::DataResponse(_) | Self::Ack => PacketType::DataResponse,
        }
    }
}

fn ephemeral_to_cbor(e: &SignedEphemeral) -> Value {
    MapBuilder::new()
        .bytes(0, &e.public)
        .bytes(1, &e.signature)
        .build()
}

fn ephemeral_from_cbor(v: &Value) -> Result<SignedEphemeral, CborError> {
    let m = MapView::new(v)?;
    Ok(SignedEphemeral {
        public: m.fixed::<32>(0)?,
        signature: m.fixed::<64>(1)?,
    })
}

fn params_to_cbor(params: &BTreeMap<String, Value>) -> Value {
    cbor::text_map(params.iter().map(|(k, v)| (k, v.clone())))
}

fn numbers_to_cbor(map: &BTreeMap<String, f64>) -> Value {
    cbor::text_map(map.iter().map(|(k, v)| (k, Value::Float(*v))))
}

fn params_from_cbor(v: &Value) -> Result<BTreeMap<String, Value>, CborError> {
    Ok(cbor::read_text_map(v)?.into_iter().collect())
}

fn numbers_from_cbor(v: &Value) -> Result<BTreeMap<String, f64>, CborError> {
    cbor::read_text_map(v)?
        .into_iter()
        .map(|(k, v)| {
            cbor::as_f64(&v)
                .map(|f| (k, f))
                .ok_or_else(|| CborError::Schema("expected number".into()))
        })
        .collect()
}

fn to_value(msg: &PayloadMessage) -> Option<MapBuilder> {
    Some(match msg {
        PayloadMessage::Announce(a) => {
            let mut b = MapBuilder::new()
                .bytes(0, &a.node_id.0)
                .put(
                    1,
                    Value::Array(a.capabilities.iter().map(Capability::to_cbor).collect()),
                )
                .put(
                    2,
                    Value::Array(a.addresses.iter().map(|s| Value::Text(s.clone())).collect()),
                );
            if !a.closer.is_empty() {
                b = b.put(3, Value::Array(a.closer.iter().map(NodeRecord::to_cbor).collect()));
            }
            if !a.providers.is_empty() {
                b = b.put(
                    4,
                    Value::Array(a.providers.iter().map(ProviderRecord::to_cbor).collect()),
                );
            }
            if let Some(key) = &a.store_key {
                b = b.bytes(5, key);
            }
            if !a.services.is_empty() {
                b = b.put(
                    6,
                    Value::Array(a.services.iter().map(ServiceInstance::to_cbor).collect()),
                );
            }
            b.put_opt(7, a.availability)
        }
        PayloadMessage::Query(q) => match q {
            Query::Capability(id) => MapBuilder::new().put(0, id.as_str()),
            Query::FindNode(target) => MapBuilder::new().bytes(0, target),
            Query::Ping => MapBuilder::new(),
        },
        PayloadMessage::IntentRequest(r) => MapBuilder::new()
            .put(0, r.capability_id.as_str())
            .put(1, r.desired_schema.code() as u64)
            .put(2, params_to_cbor(&r.params))
            .put(3, numbers_to_cbor(&r.constraints))
            .put(4, numbers_to_cbor(&r.weights)),
        PayloadMessage::IntentProposal(p) => MapBuilder::new()
            .put(0, p.capability.to_cbor())
            .put(1, p.measured_rtt_ms)
            .put(2, p.availability)
            .put(3, p.adapter_required)
            .put_opt(4, p.ephemeral.as_ref().map(ephemeral_to_cbor)),
        PayloadMessage::ContractAccept(c) | PayloadMessage::ContractSigned(c) => MapBuilder::new()
            .bytes(0, &c.body)
            .bytes(1, &c.signature)
            .put_opt(2, c.ephemeral.as_ref().map(ephemeral_to_cbor)),
        PayloadMessage::DataRequest(d) => MapBuilder::new()
            .bytes(0, &d.contract_id)
            .put(2, params_to_cbor(&d.params)),
        PayloadMessage::DataResponse(d) => MapBuilder::new()
            .bytes(0, &d.contract_id)
            .bytes(1, &d.value),
        PayloadMessage::Ack => return None,
    })
}

pub fn encode_payload(msg: &PayloadMessage) -> Vec<u8> {
    match to_value(msg) {
        Some(b) => cbor::encode(&b.build()),
        None => Vec::new(),
    }
}

/// Like [`encode_payload`] with the sender's public key under key 9.
pub fn encode_payload_with_sender(msg: &PayloadMessage, sender_public: &[u8; 32]) -> Vec<u8> {
    match to_value(msg) {
        Some(b) => cbor::encode(&b.bytes(SENDER_KEY, sender_public).build()),
        None => Vec::new(),
    }
}

/// Reads key 9 from an unencrypted payload without validating the rest.
pub fn peek_sender(payload: &[u8]) -> Option<[u8; 32]> {
    let v = cbor::decode(payload).ok()?;
    MapView::new(&v).ok()?.fixed::<32>(SENDER_KEY).ok()
}

pub fn decode_payload(packet_type: PacketType, bytes: &[u8]) -> Result<PayloadMessage, PayloadError> {
    if packet_type == PacketType::DataResponse && bytes.is_empty() {
        return Ok(PayloadMessage::Ack);
    }
    let value = cbor::decode(bytes).map_err(|e| PayloadError::MalformedCbor(e.to_string()))?;
    decode_value(packet_type, &value).map_err(|e| PayloadError::SchemaMismatch(packet_type, e))
}

fn decode_value(packet_type: PacketType, value: &Value) -> Result<PayloadMessage, String> {
    let m = MapView::new(value).map_err(|e| e.to_string())?;
    let s = |e: CborError| e.to_string();
    let me = |e: ModelError| e.to_string();
    Ok(match packet_type {
        PacketType::DiscoveryAnnounce => PayloadMessage::Announce(Announce {
            node_id: NodeId(m.fixed::<32>(0).map_err(s)?),
            capabilities: m
                .array(1)
                .map_err(s)?
                .iter()
                .map(Capability::from_cbor)
                .collect::<Result<_, _>>()
                .map_err(me)?,
            addresses: m
                .array(2)
                .map_err(s)?
                .iter()
                .map(|v| cbor::as_text(v).map(str::to_owned).ok_or("address must be text"))
                .collect::<Result<_, _>>()?,
            closer: m
                .array_or_empty(3)
                .map_err(s)?
                .iter()
                .map(NodeRecord::from_cbor)
                .collect::<Result<_, _>>()
                .map_err(me)?,
            providers: m
                .array_or_empty(4)
                .map_err(s)?
                .iter()
                .map(ProviderRecord::from_cbor)
                .collect::<Result<_, _>>()
                .map_err(me)?,
            store_key: match m.get(5) {
                Some(_) => Some(m.fixed::<32>(5).map_err(s)?),
                None => None,
            },
            services: m
                .array_or_empty(6)
                .map_err(s)?
                .iter()
                .map(ServiceInstance::from_cbor)
                .collect::<Result<_, _>>()
                .map_err(s)?,
            availability: match m.get(7) {
                Some(_) => Some(m.float(7).map_err(s)?),
                None => None,
            },
        }),
        PacketType::DiscoveryQuery => PayloadMessage::Query(match m.get(0) {
            None => Query::Ping,
            Some(Value::Text(id)) => Query::Capability(id.clone()),
            Some(Value::Bytes(_)) => Query::FindNode(m.fixed::<32>(0).map_err(s)?),
            Some(_) => return Err("key 0: expected text or 32 bytes".into()),
        }),
        PacketType::IntentRequest => {
            let code = m.uint(1).map_err(s)?;
            PayloadMessage::IntentRequest(IntentRequest {
                capability_id: m.text(0).map_err(s)?.to_owned(),
                desired_schema: DataSchema::from_code(code)
                    .ok_or_else(|| format!("unknown schema {code}"))?,
                params: params_from_cbor(m.required(2).map_err(s)?).map_err(s)?,
                constraints: numbers_from_cbor(m.required(3).map_err(s)?).map_err(s)?,
                weights: numbers_from_cbor(m.required(4).map_err(s)?).map_err(s)?,
            })
        }
        PacketType::IntentProposal => PayloadMessage::IntentProposal(IntentProposal {
            capability: Capability::from_cbor(m.required(0).map_err(s)?).map_err(me)?,
            measured_rtt_ms: m.float(1).map_err(s)?,
            availability: m.float(2).map_err(s)?,
            adapter_required: m.boolean(3).map_err(s)?,
            ephemeral: m.get(4).map(ephemeral_from_cbor).transpose().map_err(s)?,
        }),
        PacketType::ContractAccept | PacketType::ContractSigned => {
            let c = ContractMessage {
                body: m.bytes(0).map_err(s)?.to_vec(),
                signature: m.fixed::<64>(1).map_err(s)?,
                ephemeral: m.get(2).map(ephemeral_from_cbor).transpose().map_err(s)?,
            };
            if packet_type == PacketType::ContractAccept {
                PayloadMessage::ContractAccept(c)
            } else {
                PayloadMessage::ContractSigned(c)
            }
        }
        PacketType::DataRequest => PayloadMessage::DataRequest(DataRequest {
            contract_id: m.fixed::<16>(0).map_err(s)?,
            params: match m.get(2) {
                Some(p) => params_from_cbor(p).map_err(s)?,
                None => BTreeMap::new(),
            },
        }),
        PacketType::DataResponse => PayloadMessage::DataResponse(DataResponse {
            contract_id: m.fixed::<16>(0).map_err(s)?,
            value: m.bytes(1).map_err(s)?.to_vec(),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(msg: PayloadMessage) {
        let bytes = encode_payload(&msg);
        assert_eq!(decode_payload(msg.packet_type(), &bytes).unwrap(), msg);
        // Deterministic.
        assert_eq!(encode_payload(&msg), bytes);
    }

    #[test]
    fn discovery_query_roundtrip() {
        roundtrip(PayloadMessage::Query(Query::Capability("machine:fluid:fill".into())));
        roundtrip(PayloadMessage::Query(Query::FindNode([7; 32])));
        roundtrip(PayloadMessage::Query(Query::Ping));
    }

    #[test]
    fn intent_request_roundtrip() {
        let mut params = BTreeMap::new();
        params.insert("liquid".to_string(), Value::Text("water".into()));
        params.insert("volume_ml".to_string(), Value::Integer(500.into()));
        let mut constraints = BTreeMap::new();
        constraints.insert("max_latency_ms".to_string(), 100.0);
        constraints.insert("min_precision".to_string(), 0.99);
        let mut weights = BTreeMap::new();
        for (k, w) in [("func", 0.4), ("cost", 0.3), ("trust", 0.2), ("avail", 0.1)] {
            weights.insert(k.to_string(), w);
        }
        roundtrip(PayloadMessage::IntentRequest(IntentRequest {
            capability_id: "machine:fluid:fill".into(),
            desired_schema: DataSchema::F32,
            params,
            constraints,
            weights,
        }));
    }

    #[test]
    fn truncated_cbor_is_malformed() {
        let bytes = encode_payload(&PayloadMessage::Query(Query::Capability(
            "machine:fluid:fill".into(),
        )));
        assert!(matches!(
            decode_payload(PacketType::DiscoveryQuery, &bytes[..bytes.len() - 4]),
            Err(PayloadError::MalformedCbor(_))
        ));
    }

    #[test]
    fn wrong_schema_is_schema_mismatch() {
        let bytes = encode_payload(&PayloadMessage::Query(Query::Ping));
        assert!(matches!(
            decode_payload(PacketType::IntentRequest, &bytes),
            Err(PayloadError::SchemaMismatch(PacketType::IntentRequest, _))
        ));
    }

    #[test]
    fn ack_is_empty_data_response() {
        assert!(encode_payload(&PayloadMessage::Ack).is_empty());
        assert_eq!(
            decode_payload(PacketType::DataResponse, &[]).unwrap(),
            PayloadMessage::Ack
        );
    }

    #[test]
    fn sender_key_peek() {
        let msg = PayloadMessage::Query(Query::Ping);
        let bytes = encode_payload_with_sender(&msg, &[5; 32]);
        assert_eq!(peek_sender(&bytes), Some([5; 32]));
        assert_eq!(decode_payload(PacketType::DiscoveryQuery, &bytes).unwrap(), msg);
        assert_eq!(peek_sender(&encode_payload(&msg)), None);
    }

    #[test]
    fn provider_record_signature() {
        let id = NodeIdentity::from_seed([3; 32]);
        let mut rec = NodeRecord::new(id.public(), vec!["sim://3".into()]);
        rec.capabilities.push(Capability::new("machine:fluid:fill", DataSchema::U32));
        let p = ProviderRecord::sign(&id, "machine:fluid:fill", rec);
        assert!(p.verify());
        let back = ProviderRecord::from_cbor(&p.to_cbor()).unwrap();
        assert!(back.verify());
        let mut forged = back.clone();
        forged.capability_id = "machine:capping:mechanical".into();
        assert!(!forged.verify());
    }
}
