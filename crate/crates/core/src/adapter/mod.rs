//! Schema adapters: TOML descriptors compiled from a formula into a
//! WebAssembly module, cached by schema pair and run in a sandbox.

pub mod emit;
pub mod formula;
pub mod registry;
pub mod sandbox;

use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{DataSchema, TypedValue};

pub use emit::{emit_buffer_identity, emit_module, EmittedModule, Width};
pub use formula::{parse_formula, BinOp, Expr};
pub use registry::{AdapterRegistry, CompiledAdapter};
pub use sandbox::{Sandbox, SandboxConfig, BUFFER_BASE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("TOML syntax: {0}")]
    TomlSyntax(String),
    #[error("missing field {0}")]
    MissingField(&'static str),
    #[error("unknown schema {0:?}")]
    UnknownSchema(String),
    #[error("adapter id is empty")]
    EmptyId,
    #[error("unexpected character {ch:?} at {pos}")]
    Lex { pos: usize, ch: char },
    #[error("unexpected {found} at {pos}")]
    UnexpectedToken { pos: usize, found: String },
    #[error("unknown identifier {0:?}; only x is allowed")]
    UnknownIdentifier(String),
    #[error("trailing input at {0}")]
    TrailingInput(usize),
    #[error("expression depth {0} exceeds limit")]
    DepthExceeded(usize),
    #[error("{0} is not a scalar schema")]
    NotScalar(DataSchema),
    #[error("an adapter for {0} -> {1} is already registered")]
    DuplicatePair(DataSchema, DataSchema),
    #[error("invalid module: {0}")]
    InvalidModule(String),
    #[error("trap: {0}")]
    Trap(String),
    #[error("result {0} does not fit the target schema")]
    TargetOverflow(f64),
    #[error("execution exceeded {0:?}")]
    Timeout(Duration),
    #[error("malformed result: {0}")]
    MalformedResult(String),
    #[error("no adapter registered for {0} -> {1}")]
    NoAdapter(DataSchema, DataSchema),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterSpec {
    pub id: String,
    pub source_schema: DataSchema,
    pub target_schema: DataSchema,
    pub formula: String,
}

impl AdapterSpec {
    pub fn new(id: &str, source: DataSchema, target: DataSchema, formula: &str) -> Self {
        Self {
            id: id.to_owned(),
            source_schema: source,
            target_schema: target,
            formula: formula.to_owned(),
        }
    }

    pub fn width(&self) -> Width {
        if self.source_schema == DataSchema::F64 || self.target_schema == DataSchema::F64 {
            Width::F64
        } else {
            Width::F32
        }
    }

    /// 64-bit key over (source, target, formula).
    pub fn cache_key(&self) -> u64 {
        let mut h = Sha256::new();
        h.update([self.source_schema.code(), self.target_schema.code()]);
        h.update(self.formula.as_bytes());
        u64::from_be_bytes(h.finalize()[..8].try_into().unwrap())
    }

    pub fn to_toml(&self) -> String {
        format!(
            "[adapter]\nid = {:?}\nsource_schema = {:?}\ntarget_schema = {:?}\nformula = {:?}\n",
            self.id,
            self.source_schema.name(),
            self.target_schema.name(),
            self.formula
        )
    }
}

pub fn parse_adapter_toml(text: &str) -> Result<AdapterSpec, AdapterError> {
    let doc: toml::Table = toml::from_str(text).map_err(|e| AdapterError::TomlSyntax(e.to_string()))?;
    let table = doc
        .get("adapter")
        .and_then(|v| v.as_table())
        .ok_or(AdapterError::MissingField("adapter"))?;
    let field = |name: &'static str| {
        table
            .get(name)
            .and_then(|v| v.as_str())
            .ok_or(AdapterError::MissingField(name))
    };
    let schema = |name: &'static str| {
        let s = field(name)?;
        DataSchema::parse(s).ok_or_else(|| AdapterError::UnknownSchema(s.to_owned()))
    };
    let spec = AdapterSpec {
        id: field("id")?.to_owned(),
        source_schema: schema("source_schema")?,
        target_schema: schema("target_schema")?,
        formula: field("formula")?.to_owned(),
    };
    if spec.id.is_empty() {
        return Err(AdapterError::EmptyId);
    }
    parse_formula(&spec.formula)?;
    Ok(spec)
}

/// Widens a scalar to the float fed to `transform`.
pub fn coerce_input(value: &TypedValue) -> Result<f64, AdapterError> {
    value.as_f64().ok_or(AdapterError::NotScalar(value.schema()))
}

/// Converts a `transform` result to the target schema. Integer targets use
/// round-half-to-even and must fit the range.
pub fn coerce_output(out: f64, target: DataSchema) -> Result<TypedValue, AdapterError> {
    let int = |lo: f64, hi: f64| {
        let r = out.round_ties_even();
        if r.is_nan() || r < lo || r > hi {
            Err(AdapterError::TargetOverflow(out))
        } else {
            Ok(r)
        }
    };
    Ok(match target {
        DataSchema::F32 => TypedValue::F32(out as f32),
        DataSchema::F64 => TypedValue::F64(out),
        DataSchema::U16 => TypedValue::U16(int(0.0, u16::MAX as f64)? as u16),
        DataSchema::U32 => TypedValue::U32(int(0.0, u32::MAX as f64)? as u32),
        DataSchema::I32 => TypedValue::I32(int(i32::MIN as f64, i32::MAX as f64)? as i32),
        DataSchema::CborMap => return Err(AdapterError::NotScalar(target)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const PULSE: &str = r#"[adapter]
id = "pulse_to_ml"
source_schema = "u32"
target_schema = "f32"
formula = "x * 0.2"
"#;

    #[test]
    fn parses_descriptor() {
        let s = parse_adapter_toml(PULSE).unwrap();
        assert_eq!(s, AdapterSpec::new("pulse_to_ml", DataSchema::U32, DataSchema::F32, "x * 0.2"));
        assert_eq!(parse_adapter_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn descriptor_errors() {
        let missing = PULSE.replace("formula = \"x * 0.2\"\n", "");
        assert_eq!(parse_adapter_toml(&missing), Err(AdapterError::MissingField("formula")));
        let q8 = PULSE.replace("\"u32\"", "\"q8\"");
        assert_eq!(parse_adapter_toml(&q8), Err(AdapterError::UnknownSchema("q8".into())));
        assert!(matches!(parse_adapter_toml("[adapter"), Err(AdapterError::TomlSyntax(_))));
        assert_eq!(parse_adapter_toml("x = 1"), Err(AdapterError::MissingField("adapter")));
    }

    #[test]
    fn output_coercion() {
        assert_eq!(coerce_output(2.5, DataSchema::U16).unwrap(), TypedValue::U16(2));
        assert_eq!(coerce_output(3.5, DataSchema::U16).unwrap(), TypedValue::U16(4));
        assert_eq!(coerce_output(-2.5, DataSchema::I32).unwrap(), TypedValue::I32(-2));
        assert!(matches!(coerce_output(f64::NAN, DataSchema::U32), Err(AdapterError::TargetOverflow(_))));
        assert!(matches!(coerce_output(-1.0, DataSchema::U32), Err(AdapterError::TargetOverflow(_))));
        assert!(matches!(coerce_output(65535.6, DataSchema::U16), Err(AdapterError::TargetOverflow(_))));
        assert!(coerce_output(f64::INFINITY, DataSchema::F32).is_ok());
    }

    #[test]
    fn key_includes_formula() {
        let a = AdapterSpec::new("a", DataSchema::U16, DataSchema::F32, "x");
        let b = AdapterSpec::new("a", DataSchema::U16, DataSchema::F32, "x * 1");
        assert_ne!(a.cache_key(), b.cache_key());
    }
}
