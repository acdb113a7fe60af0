use std::collections::BTreeMap;

use ciborium::value::Value;

use crate::cbor::{self, CborError, MapBuilder, MapView};
use crate::crypto;
use crate::model::{Capability, DataSchema, NodeId};

/// The signed part of a contract. Encoded canonically; both signatures
/// cover exactly these bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractBody {
    pub contract_id: [u8; 16],
    pub requester_id: NodeId,
    pub provider_id: NodeId,
    pub capability: Capability,
    pub agreed_schema: DataSchema,
    pub adapter_id: Option<String>,
    pub qos: BTreeMap<String, f64>,
    pub expiry: u64,
}

impl ContractBody {
    pub fn to_cbor(&self) -> Value {
        MapBuilder::new()
            .bytes(0, &self.contract_id)
            .bytes(1, &self.requester_id.0)
            .bytes(2, &self.provider_id.0)
            .put(3, self.capability.to_cbor())
            .put(4, self.agreed_schema.code() as u64)
            .put_opt(5, self.adapter_id.as_deref())
            .put(
                6,
                cbor::text_map(self.qos.iter().map(|(k, v)| (k, Value::Float(*v)))),
            )
            .put(7, self.expiry)
            .build()
    }

    pub fn encode(&self) -> Vec<u8> {
        cbor::encode(&self.to_cbor())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CborError> {
        let v = cbor::decode(bytes)?;
        let m = MapView::new(&v)?;
        let schema = m.uint(4)?;
        Ok(Self {
            contract_id: m.fixed::<16>(0)?,
            requester_id: NodeId(m.fixed::<32>(1)?),
            provider_id: NodeId(m.fixed::<32>(2)?),
            capability: Capability::from_cbor(m.required(3)?)
                .map_err(|e| CborError::Schema(e.to_string()))?,
            agreed_schema: DataSchema::from_code(schema)
                .ok_or_else(|| CborError::Schema(format!("unknown schema {schema}")))?,
            adapter_id: m.get(5).map(|v| cbor::as_text(v).map(str::to_owned)).flatten(),
            qos: cbor::read_text_map(m.required(6)?)?
                .into_iter()
                .map(|(k, v)| {
                    cbor::as_f64(&v)
                        .map(|f| (k, f))
                        .ok_or_else(|| CborError::Schema("qos values are numbers".into()))
                })
                .collect::<Result<_, _>>()?,
            expiry: m.uint(7)?,
        })
    }
}

/// A dual-signed contract.
#[derive(Debug, Clone, PartialEq)]
pub struct Contract {
    pub body: ContractBody,
    pub body_bytes: Vec<u8>,
    pub requester_signature: [u8; 64],
    pub provider_signature: [u8; 64],
}

impl Contract {
    pub fn contract_id(&self) -> [u8; 16] {
        self.body.contract_id
    }

    pub fn is_expired(&self, now: u64) -> bool {
        now >= self.body.expiry
    }

    /// Re-checks both signatures over the stored body.
    pub fn verify(&self, requester_public: &[u8; 32], provider_public: &[u8; 32]) -> bool {
        NodeId::from_public(requester_public) == self.body.requester_id
            && NodeId::from_public(provider_public) == self.body.provider_id
            && ContractBody::decode(&self.body_bytes).as_ref() == Ok(&self.body)
            && crypto::verify(requester_public, &self.body_bytes, &self.requester_signature)
            && crypto::verify(provider_public, &self.body_bytes, &self.provider_signature)
    }
}
