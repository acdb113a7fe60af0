//! Domain types shared across the protocol: schemas, capabilities, node
//! identifiers and records, and typed scalar values.

use std::fmt;

use ciborium::value::Value;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cbor::{self, CborError, MapBuilder, MapView};

/// Wire representation of a value type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSchema {
    U16 = 0,
    U32 = 1,
    I32 = 2,
    F32 = 3,
    F64 = 4,
    CborMap = 5,
}

impl DataSchema {
    pub const ALL: [DataSchema; 6] = [
        DataSchema::U16,
        DataSchema::U32,
        DataSchema::I32,
        DataSchema::F32,
        DataSchema::F64,
        DataSchema::CborMap,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u64) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() as u64 == code)
    }

    /// Parses the lowercase names used in descriptors and config files.
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "u16" => Some(Self::U16),
            "u32" => Some(Self::U32),
            "i32" => Some(Self::I32),
            "f32" => Some(Self::F32),
            "f64" => Some(Self::F64),
            "cbor_map" => Some(Self::CborMap),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::U16 => "u16",
            Self::U32 => "u32",
            Self::I32 => "i32",
            Self::F32 => "f32",
            Self::F64 => "f64",
            Self::CborMap => "cbor_map",
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Self::U16 | Self::U32 | Self::I32)
    }
}

impl fmt::Display for DataSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("capability id is empty")]
    EmptyId,
    #[error("precision {0} outside [0, 1]")]
    Precision(f64),
    #[error("rate {0} is negative")]
    Rate(f64),
    #[error(transparent)]
    Cbor(#[from] CborError),
}

/// A provider-advertised service: id, schema, version, precision and rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capability {
    pub id: String,
    pub schema: DataSchema,
    pub version: String,
    pub precision: f64,
    pub rate_hz: f64,
}

impl Capability {
    pub fn new(id: impl Into<String>, schema: DataSchema) -> Self {
        Self {
            id: id.into(),
            schema,
            version: "1.0.0".into(),
            precision: 1.0,
            rate_hz: 0.0,
        }
    }

    pub fn with_precision(mut self, precision: f64) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_rate(mut self, rate_hz: f64) -> Self {
        self.rate_hz = rate_hz;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::EmptyId);
        }
        if !(0.0..=1.0).contains(&self.precision) {
            return Err(ModelError::Precision(self.precision));
        }
        if !(self.rate_hz >= 0.0) {
            return Err(ModelError::Rate(self.rate_hz));
        }
        Ok(())
    }

    pub fn to_cbor(&self) -> Value {
        MapBuilder::new()
            .put(0, self.id.as_str())
            .put(1, self.schema.code() as u64)
            .put(2, self.version.as_str())
            .put(3, self.precision)
            .put(4, self.rate_hz)
            .build()
    }

    pub fn from_cbor(v: &Value) -> Result<Self, ModelError> {
        let m = MapView::new(v)?;
        let code = m.uint(1)?;
        let cap = Self {
            id: m.text(0)?.to_owned(),
            schema: DataSchema::from_code(code)
                .ok_or_else(|| CborError::Schema(format!("unknown schema {code}")))?,
            version: m.text(2)?.to_owned(),
            precision: m.float(3)?,
            rate_hz: m.float(4)?,
        };
        cap.validate()?;
        Ok(cap)
    }
}

/// 256-bit identifier. Ordering is big-endian unsigned integer order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct NodeId(pub [u8; 32]);

impl NodeId {
    pub const ZERO: NodeId = NodeId([0; 32]);

    /// Node id of a signing key: SHA-256 of its 32 public bytes.
    pub fn from_public(public: &[u8; 32]) -> Self {
        Self(Sha256::digest(public).into())
    }

    /// DHT key for a capability id.
    pub fn for_capability(capability_id: &str) -> Self {
        Self(Sha256::digest(capability_id.as_bytes()).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", self.short())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// What the network knows about a node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub node_id: NodeId,
    pub signing_public: [u8; 32],
    pub addresses: Vec<String>,
    pub capabilities: Vec<Capability>,
    pub last_seen: u64,
}

impl NodeRecord {
    pub fn new(signing_public: [u8; 32], addresses: Vec<String>) -> Self {
        Self {
            node_id: NodeId::from_public(&signing_public),
            signing_public,
            addresses,
            capabilities: Vec::new(),
            last_seen: 0,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.node_id == NodeId::from_public(&self.signing_public)
    }

    pub fn serves(&self, capability_id: &str) -> bool {
        self.capabilities.iter().any(|c| c.id == capability_id)
    }

    pub fn capability(&self, capability_id: &str) -> Option<&Capability> {
        self.capabilities.iter().find(|c| c.id == capability_id)
    }

    pub fn primary_address(&self) -> Option<&str> {
        self.addresses.first().map(String::as_str)
    }

    pub fn to_cbor(&self) -> Value {
        MapBuilder::new()
            .bytes(0, &self.node_id.0)
            .bytes(1, &self.signing_public)
            .put(
                2,
                Value::Array(self.addresses.iter().map(|a| Value::Text(a.clone())).collect()),
            )
            .put(
                3,
                Value::Array(self.capabilities.iter().map(Capability::to_cbor).collect()),
            )
            .put(4, self.last_seen)
            .build()
    }

    pub fn from_cbor(v: &Value) -> Result<Self, ModelError> {
        let m = MapView::new(v)?;
        let rec = Self {
            node_id: NodeId(m.fixed::<32>(0)?),
            signing_public: m.fixed::<32>(1)?,
            addresses: m
                .array(2)?
                .iter()
                .map(|a| {
                    cbor::as_text(a)
                        .map(str::to_owned)
                        .ok_or_else(|| CborError::Schema("address must be text".into()))
                })
                .collect::<Result<_, _>>()?,
            capabilities: m
                .array(3)?
                .iter()
                .map(Capability::from_cbor)
                .collect::<Result<_, _>>()?,
            last_seen: m.uint(4)?,
        };
        if !rec.is_consistent() {
            return Err(CborError::Schema("node id does not match public key".into()).into());
        }
        Ok(rec)
    }
}

/// A value in one of the [`DataSchema`] representations.
#[derive(Debug, Clone, PartialEq)]
pub enum TypedValue {
    U16(u16),
    U32(u32),
    I32(i32),
    F32(f32),
    F64(f64),
    Map(Value),
}

impl TypedValue {
    pub fn schema(&self) -> DataSchema {
        match self {
            Self::U16(_) => DataSchema::U16,
            Self::U32(_) => DataSchema::U32,
            Self::I32(_) => DataSchema::I32,
            Self::F32(_) => DataSchema::F32,
            Self::F64(_) => DataSchema::F64,
            Self::Map(_) => DataSchema::CborMap,
        }
    }

    /// Numeric value widened to f64; `None` for maps.
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Self::U16(v) => Some(v as f64),
            Self::U32(v) => Some(v as f64),
            Self::I32(v) => Some(v as f64),
            Self::F32(v) => Some(v as f64),
            Self::F64(v) => Some(v),
            Self::Map(_) => None,
        }
    }

    pub fn to_cbor(&self) -> Value {
        match self {
            Self::U16(v) => Value::Integer((*v).into()),
            Self::U32(v) => Value::Integer((*v).into()),
            Self::I32(v) => Value::Integer((*v).into()),
            Self::F32(v) => Value::Float(*v as f64),
            Self::F64(v) => Value::Float(*v),
            Self::Map(m) => m.clone(),
        }
    }

    pub fn from_cbor(schema: DataSchema, v: &Value) -> Result<Self, CborError> {
        let bad = || CborError::Schema(format!("value does not fit {schema}"));
        Ok(match schema {
            DataSchema::U16 => Self::U16(
                cbor::as_i128(v)
                    .and_then(|i| u16::try_from(i).ok())
                    .ok_or_else(bad)?,
            ),
            DataSchema::U32 => Self::U32(
                cbor::as_i128(v)
                    .and_then(|i| u32::try_from(i).ok())
                    .ok_or_else(bad)?,
            ),
            DataSchema::I32 => Self::I32(
                cbor::as_i128(v)
                    .and_then(|i| i32::try_from(i).ok())
                    .ok_or_else(bad)?,
            ),
            DataSchema::F32 => Self::F32(cbor::as_f64(v).ok_or_else(bad)? as f32),
            DataSchema::F64 => Self::F64(cbor::as_f64(v).ok_or_else(bad)?),
            DataSchema::CborMap => match v {
                Value::Map(_) => Self::Map(v.clone()),
                _ => return Err(bad()),
            },
        })
    }
}

impl fmt::Display for TypedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::U16(v) => write!(f, "{v}"),
            Self::U32(v) => write!(f, "{v}"),
            Self::I32(v) => write!(f, "{v}"),
            Self::F32(v) => write!(f, "{v:?}"),
            Self::F64(v) => write!(f, "{v:?}"),
            Self::Map(m) => write!(f, "{m:?}"),
        }
    }
}
