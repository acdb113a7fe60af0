//! Node configuration files.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use tip_core::adapter::{coerce_output, AdapterSpec};
use tip_core::crypto::NodeIdentity;
use tip_core::fieldbus::FillMachine;
use tip_core::model::{Capability, DataSchema, TypedValue};
use tip_core::node::Handler;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("key file {0} does not exist (pass --create-key to generate one)")]
    MissingKey(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeFile {
    #[serde(default = "default_name")]
    pub name: String,
    pub key_file: PathBuf,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_segment")]
    pub segment: String,
    /// Peers that receive local-link traffic over UDP.
    #[serde(default)]
    pub link_peers: Vec<String>,
    /// A known node to join the DHT through.
    pub bootstrap: Option<String>,
    pub reputation_file: Option<PathBuf>,
    #[serde(default, rename = "capability")]
    pub capabilities: Vec<CapabilityDecl>,
    #[serde(default, rename = "adapter")]
    pub adapters: Vec<AdapterDecl>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapabilityDecl {
    pub id: String,
    pub schema: String,
    #[serde(default = "one")]
    pub precision: f64,
    #[serde(default)]
    pub rate_hz: f64,
    #[serde(default = "one")]
    pub availability: f64,
    /// "constant" or "fill".
    #[serde(default = "default_handler")]
    pub handler: String,
    #[serde(default)]
    pub value: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterDecl {
    pub id: String,
    pub source: String,
    pub target: String,
    pub formula: String,
}

fn default_name() -> String {
    "node".into()
}

fn default_bind() -> String {
    "127.0.0.1:5683".into()
}

fn default_segment() -> String {
    "lan".into()
}

fn default_handler() -> String {
    "constant".into()
}

fn one() -> f64 {
    1.0
}

impl NodeFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut f: NodeFile = toml::from_str(&text).map_err(|e| ConfigError::Invalid {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        f.key_file = base.join(&f.key_file);
        if let Some(r) = &f.reputation_file {
            f.reputation_file = Some(base.join(r));
        }
        Ok(f)
    }

    pub fn identity(&self, create: bool) -> Result<NodeIdentity, ConfigError> {
        if !self.key_file.exists() {
            if !create {
                return Err(ConfigError::MissingKey(self.key_file.display().to_string()));
            }
            let id = NodeIdentity::generate(&mut rand::rngs::OsRng);
            if let Some(dir) = self.key_file.parent() {
                let _ = std::fs::create_dir_all(dir);
            }
            id.save(&self.key_file).map_err(|e| ConfigError::Read {
                path: self.key_file.display().to_string(),
                message: e.to_string(),
            })?;
            return Ok(id);
        }
        NodeIdentity::load(&self.key_file).map_err(|e| ConfigError::Invalid {
            path: self.key_file.display().to_string(),
            message: e.to_string(),
        })
    }

    fn invalid(&self, message: String) -> ConfigError {
        ConfigError::Invalid {
            path: self.name.clone(),
            message,
        }
    }

    pub fn services(&self) -> Result<Vec<(Capability, f64, Handler)>, ConfigError> {
        let mut out = Vec::new();
        for c in &self.capabilities {
            let schema =
                DataSchema::parse(&c.schema).ok_or_else(|| self.invalid(format!("unknown schema {}", c.schema)))?;
            let cap = Capability::new(c.id.clone(), schema)
                .with_precision(c.precision)
                .with_rate(c.rate_hz);
            let handler: Handler = match c.handler.as_str() {
                "constant" => {
                    let v = coerce_output(c.value, schema).map_err(|e| self.invalid(e.to_string()))?;
                    Box::new(move |_| Ok(v.clone()))
                }
                "fill" => {
                    let mut machine = FillMachine::new();
                    Box::new(move |params| {
                        let volume = params
                            .get("volume_ml")
                            .and_then(|v| match v {
                                ciborium::value::Value::Integer(i) => Some(i128::from(*i) as f64),
                                ciborium::value::Value::Float(f) => Some(*f),
                                _ => None,
                            })
                            .ok_or("volume_ml missing")?;
                        let t = machine.fill(volume).map_err(|e| e.to_string())?;
                        match schema {
                            DataSchema::U16 => u16::try_from(t.pulses)
                                .map(TypedValue::U16)
                                .map_err(|_| "pulse count overflows u16".to_string()),
                            _ => Ok(TypedValue::U32(t.pulses)),
                        }
                    })
                }
                other => return Err(self.invalid(format!("unknown handler {other}"))),
            };
            out.push((cap, c.availability, handler));
        }
        Ok(out)
    }

    pub fn adapter_specs(&self) -> Result<Vec<AdapterSpec>, ConfigError> {
        self.adapters
            .iter()
            .map(|a| {
                let s = |n: &str| DataSchema::parse(n).ok_or_else(|| self.invalid(format!("unknown schema {n}")));
                Ok(AdapterSpec::new(&a.id, s(&a.source)?, s(&a.target)?, &a.formula))
            })
            .collect()
    }
}
