use std::collections::BTreeMap;

use ciborium::value::Value;
use serde::Deserialize;

use super::{ahp_weights, NegotiationError};
use crate::model::DataSchema;
use crate::wire::IntentRequest;

pub const CONSTRAINT_KEYS: [&str; 3] = ["max_latency_ms", "min_precision", "min_rate_hz"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub func: f64,
    pub cost: f64,
    pub trust: f64,
    pub avail: f64,
}

impl Weights {
    pub fn uniform() -> Self {
        Self {
            func: 0.25,
            cost: 0.25,
            trust: 0.25,
            avail: 0.25,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.func, self.cost, self.trust, self.avail]
    }

    pub fn validate(&self) -> Result<(), NegotiationError> {
        let a = self.as_array();
        if a.iter().any(|w| !(*w >= 0.0)) {
            return Err(NegotiationError::InvalidWeights("negative weight".into()));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(NegotiationError::InvalidWeights(format!("weights sum to {sum}")));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        ["func", "cost", "trust", "avail"]
            .into_iter()
            .zip(self.as_array())
            .map(|(k, v)| (k.to_owned(), v))
            .collect()
    }

    pub fn from_map(map: &BTreeMap<String, f64>) -> Result<Self, NegotiationError> {
        if let Some(k) = map.keys().find(|k| !["func", "cost", "trust", "avail"].contains(&k.as_str())) {
            return Err(NegotiationError::InvalidWeights(format!("unknown weight {k}")));
        }
        let get = |k: &str| map.get(k).copied().unwrap_or(0.0);
        let w = Self {
            func: get("func"),
            cost: get("cost"),
            trust: get("trust"),
            avail: get("avail"),
        };
        w.validate()?;
        Ok(w)
    }
}

impl Default for Weights {
    fn default() -> Self {
        Self::uniform()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intent {
    pub capability_required: String,
    pub desired_schema: DataSchema,
    pub params: BTreeMap<String, Value>,
    pub constraints: BTreeMap<String, f64>,
    pub weights: Weights,
}

impl Intent {
    pub fn new(capability: impl Into<String>, desired_schema: DataSchema) -> Self {
        Self {
            capability_required: capability.into(),
            desired_schema,
            params: BTreeMap::new(),
            constraints: BTreeMap::new(),
            weights: Weights::uniform(),
        }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_owned(), value.into());
        self
    }

    pub fn with_constraint(mut self, key: &str, value: f64) -> Self {
        self.constraints.insert(key.to_owned(), value);
        self
    }

    pub fn with_weights(mut self, weights: Weights) -> Self {
        self.weights = weights;
        self
    }

    pub fn max_latency_ms(&self) -> Option<f64> {
        self.constraints.get("max_latency_ms").copied()
    }

    pub fn validate(&self) -> Result<(), NegotiationError> {
        if self.capability_required.is_empty() {
            return Err(NegotiationError::InvalidIntent("empty capability".into()));
        }
        if let Some(k) = self.constraints.keys().find(|k| !CONSTRAINT_KEYS.contains(&k.as_str())) {
            return Err(NegotiationError::InvalidIntent(format!("unknown constraint {k}")));
        }
        self.weights.validate()
    }

    pub fn to_request(&self) -> IntentRequest {
        IntentRequest {
            capability_id: self.capability_required.clone(),
            desired_schema: self.desired_schema,
            params: self.params.clone(),
            constraints: self.constraints.clone(),
            weights: self.weights.to_map(),
        }
    }

    pub fn from_request(req: &IntentRequest) -> Result<Self, NegotiationError> {
        Ok(Self {
            capability_required: req.capability_id.clone(),
            desired_schema: req.desired_schema,
            params: req.params.clone(),
            constraints: req.constraints.clone(),
            weights: Weights::from_map(&req.weights)?,
        })
    }

    /// Reads an intent file:
    ///
    /// ```toml
    /// capability = "machine:fluid:fill"
    /// desired_schema = "f32"
    /// [params]
    /// volume_ml = 500
    /// [constraints]
    /// max_latency_ms = 100
    /// [weights]
    /// func = 0.4
    /// cost = 0.3
    /// trust = 0.2
    /// avail = 0.1
    /// ```
    ///
    /// A 4×4 `ahp` array may replace `[weights]`.
    pub fn from_toml(text: &str) -> Result<Self, NegotiationError> {
        let f: IntentFile =
            toml::from_str(text).map_err(|e| NegotiationError::InvalidIntent(e.to_string()))?;
        let desired_schema = DataSchema::parse(&f.desired_schema).ok_or_else(|| {
            NegotiationError::InvalidIntent(format!("unknown schema {}", f.desired_schema))
        })?;
        let weights = match (f.weights, f.ahp) {
            (Some(_), Some(_)) => {
                return Err(NegotiationError::InvalidIntent(
                    "give either weights or ahp, not both".into(),
                ))
            }
            (Some(w), None) => Weights::from_map(&w)?,
            (None, Some(m)) => {
                let r = ahp_weights(&m)?;
                if r.inconsistent {
                    tracing::warn!(cr = r.consistency_ratio, "pairwise matrix is inconsistent");
                }
                r.weights
            }
            (None, None) => Weights::uniform(),
        };
        let params = f
            .params
            .into_iter()
            .map(|(k, v)| toml_to_cbor(&v).map(|v| (k, v)))
            .collect::<Result<_, _>>()?;
        let intent = Self {
            capability_required: f.capability,
            desired_schema,
            params,
            constraints: f.constraints,
            weights,
        };
        intent.validate()?;
        Ok(intent)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IntentFile {
    capability: String,
    desired_schema: String,
    #[serde(default)]
    params: BTreeMap<String, toml::Value>,
    #[serde(default)]
    constraints: BTreeMap<String, f64>,
    weights: Option<BTreeMap<String, f64>>,
    ahp: Option<[[f64; 4]; 4]>,
}

fn toml_to_cbor(v: &toml::Value) -> Result<Value, NegotiationError> {
    Ok(match v {
        toml::Value::String(s) => Value::Text(s.clone()),
        toml::Value::Integer(i) => Value::Integer((*i).into()),
        toml::Value::Float(f) => Value::Float(*f),
        toml::Value::Boolean(b) => Value::Bool(*b),
        toml::Value::Array(a) => Value::Array(a.iter().map(toml_to_cbor).collect::<Result<_, _>>()?),
        toml::Value::Table(t) => Value::Map(
            t.iter()
                .map(|(k, v)| Ok((Value::Text(k.clone()), toml_to_cbor(v)?)))
                .collect::<Result<_, NegotiationError>>()?,
        ),
        toml::Value::Datetime(_) => {
            return Err(NegotiationError::InvalidIntent("datetime params are not supported".into()))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_intent_file() {
        let text = r#"
capability = "machine:fluid:fill"
desired_schema = "f32"
[params]
volume_ml = 500
[constraints]
max_latency_ms = 100
[weights]
func = 0.4
cost = 0.3
trust = 0.2
avail = 0.1
"#;
        let i = Intent::from_toml(text).unwrap();
        assert_eq!(i.desired_schema, DataSchema::F32);
        assert_eq!(i.params["volume_ml"], Value::Integer(500.into()));
        assert_eq!(i.max_latency_ms(), Some(100.0));
        assert_eq!(i.weights.func, 0.4);
        assert_eq!(Intent::from_request(&i.to_request()).unwrap(), i);
    }

    #[test]
    fn ahp_section_derives_weights() {
        let text = r#"
capability = "c"
desired_schema = "u16"
ahp = [[1,1,1,1],[1,1,1,1],[1,1,1,1],[1,1,1,1]]
"#;
        let i = Intent::from_toml(text).unwrap();
        assert!((i.weights.func - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_weights() {
        let text = "capability = \"c\"\ndesired_schema = \"u16\"\n[weights]\nfunc = 0.9\ncost = 0.3\n";
        assert!(matches!(Intent::from_toml(text), Err(NegotiationError::InvalidWeights(_))));
    }
}
