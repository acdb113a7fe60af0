//! Deterministic CBOR helpers.
//!
//! Every payload in the protocol is a CBOR map with small unsigned integer
//! keys. Encoding sorts map keys by their encoded bytes (RFC 8949 core
//! deterministic ordering) at every nesting level and always uses definite
//! lengths, so equal values always produce equal bytes.

use ciborium::value::{Integer, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CborError {
    #[error("malformed CBOR: {0}")]
    Malformed(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
}

fn encode_raw(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    // Writing into a Vec cannot fail.
    ciborium::ser::into_writer(value, &mut out).expect("in-memory CBOR write");
    out
}

/// Rebuilds `value` with every map's entries sorted by encoded key bytes.
pub fn canonicalize(value: &Value) -> Value {
    match value {
        Value::Map(entries) => {
            let mut sorted: Vec<(Vec<u8>, Value, Value)> = entries
                .iter()
                .map(|(k, v)| {
                    let k = canonicalize(k);
                    (encode_raw(&k), k, canonicalize(v))
                })
                .collect();
            sorted.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Map(sorted.into_iter().map(|(_, k, v)| (k, v)).collect())
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        Value::Tag(tag, inner) => Value::Tag(*tag, Box::new(canonicalize(inner))),
        other => other.clone(),
    }
}

pub fn encode(value: &Value) -> Vec<u8> {
    encode_raw(&canonicalize(value))
}

/// Decodes exactly one CBOR item; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Value, CborError> {
    let mut cursor = std::io::Cursor::new(bytes);
    let value: Value = ciborium::de::from_reader(&mut cursor)
        .map_err(|e| CborError::Malformed(e.to_string()))?;
    if cursor.position() as usize != bytes.len() {
        return Err(CborError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - cursor.position() as usize
        )));
    }
    Ok(value)
}

/// Builder for an integer-keyed map.
#[derive(Debug, Default, Clone)]
pub struct MapBuilder(Vec<(Value, Value)>);

impl MapBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(mut self, key: u64, value: impl Into<Value>) -> Self {
        self.0.push((Value::Integer(key.into()), value.into()));
        self
    }

    pub fn put_opt(self, key: u64, value: Option<impl Into<Value>>) -> Self {
        match value {
            Some(v) => self.put(key, v),
            None => self,
        }
    }

    pub fn bytes(self, key: u64, value: &[u8]) -> Self {
        self.put(key, Value::Bytes(value.to_vec()))
    }

    pub fn build(self) -> Value {
        Value::Map(self.0)
    }
}

/// Read-side view over an integer-keyed map.
#[derive(Debug, Clone, Copy)]
pub struct MapView<'a>(&'a [(Value, Value)]);

impl<'a> MapView<'a> {
    pub fn new(value: &'a Value) -> Result<Self, CborError> {
        match value {
            Value::Map(entries) => Ok(Self(entries)),
            _ => Err(CborError::Schema("expected map".into())),
        }
    }

    pub fn get(&self, key: u64) -> Option<&'a Value> {
        let key = Integer::from(key);
        self.0.iter().find_map(|(k, v)| match k {
            Value::Integer(i) if *i == key => Some(v),
            _ => None,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn required(&self, key: u64) -> Result<&'a Value, CborError> {
        self.get(key)
            .ok_or_else(|| CborError::Schema(format!("missing key {key}")))
    }

    pub fn text(&self, key: u64) -> Result<&'a str, CborError> {
        as_text(self.required(key)?).ok_or_else(|| wrong(key, "text"))
    }

    pub fn bytes(&self, key: u64) -> Result<&'a [u8], CborError> {
        as_bytes(self.required(key)?).ok_or_else(|| wrong(key, "bytes"))
    }

    pub fn fixed<const N: usize>(&self, key: u64) -> Result<[u8; N], CborError> {
        self.bytes(key)?
            .try_into()
            .map_err(|_| CborError::Schema(format!("key {key}: expected {N} bytes")))
    }

    pub fn uint(&self, key: u64) -> Result<u64, CborError> {
        as_u64(self.required(key)?).ok_or_else(|| wrong(key, "unsigned integer"))
    }

    pub fn float(&self, key: u64) -> Result<f64, CborError> {
        as_f64(self.required(key)?).ok_or_else(|| wrong(key, "number"))
    }

    pub fn boolean(&self, key: u64) -> Result<bool, CborError> {
        match self.required(key)? {
            Value::Bool(b) => Ok(*b),
            _ => Err(wrong(key, "bool")),
        }
    }

    pub fn array(&self, key: u64) -> Result<&'a [Value], CborError> {
        match self.required(key)? {
            Value::Array(items) => Ok(items),
            _ => Err(wrong(key, "array")),
        }
    }

    /// Array at `key`, or empty when the key is absent.
    pub fn array_or_empty(&self, key: u64) -> Result<&'a [Value], CborError> {
        match self.get(key) {
            None => Ok(&[]),
            Some(Value::Array(items)) => Ok(items),
            Some(_) => Err(wrong(key, "array")),
        }
    }
}

fn wrong(key: u64, what: &str) -> CborError {
    CborError::Schema(format!("key {key}: expected {what}"))
}

pub fn as_text(v: &Value) -> Option<&str> {
    match v {
        Value::Text(s) => Some(s),
        _ => None,
    }
}

pub fn as_bytes(v: &Value) -> Option<&[u8]> {
    match v {
        Value::Bytes(b) => Some(b),
        _ => None,
    }
}

pub fn as_u64(v: &Value) -> Option<u64> {
    match v {
        Value::Integer(i) => u64::try_from(*i).ok(),
        _ => None,
    }
}

pub fn as_i128(v: &Value) -> Option<i128> {
    match v {
        Value::Integer(i) => Some(i128::from(*i)),
        _ => None,
    }
}

/// Numbers may arrive as integers or floats.
pub fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(i128::from(*i) as f64),
        _ => None,
    }
}

/// Text-keyed map helpers used for params/constraints/weights.
pub fn text_map<'a, I>(entries: I) -> Value
where
    I: IntoIterator<Item = (&'a String, Value)>,
{
    Value::Map(
        entries
            .into_iter()
            .map(|(k, v)| (Value::Text(k.clone()), v))
            .collect(),
    )
}

pub fn read_text_map(v: &Value) -> Result<Vec<(String, Value)>, CborError> {
    match v {
        Value::Map(entries) => entries
            .iter()
            .map(|(k, v)| match k {
                Value::Text(s) => Ok((s.clone(), v.clone())),
                _ => Err(CborError::Schema("expected text key".into())),
            })
            .collect(),
        _ => Err(CborError::Schema("expected map".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted_on_encode() {
        let a = MapBuilder::new().put(3u64, 1u64).put(0u64, 2u64).build();
        let b = MapBuilder::new().put(0u64, 2u64).put(3u64, 1u64).build();
        assert_eq!(encode(&a), encode(&b));
        // a2 00 02 03 01
        assert_eq!(encode(&a), vec![0xa2, 0x00, 0x02, 0x03, 0x01]);
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&Value::Integer(5.into()));
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(CborError::Malformed(_))));
    }

    #[test]
    fn truncated_input_rejected() {
        let bytes = encode(&Value::Text("machine:fluid:fill".into()));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
