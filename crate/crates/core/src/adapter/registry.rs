use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use wasmi::Module;

use super::{
    coerce_input, coerce_output, emit_module, parse_formula, AdapterError, AdapterSpec, Expr,
    Sandbox, SandboxConfig, Width,
};
use crate::model::{DataSchema, TypedValue};

pub struct CompiledAdapter {
    pub spec: AdapterSpec,
    pub ast: Expr,
    pub width: Width,
    pub wasm_bytes: Vec<u8>,
    pub text_form: String,
    pub cache_key: u64,
    module: Module,
}

impl fmt::Debug for CompiledAdapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompiledAdapter")
            .field("spec", &self.spec)
            .field("width", &self.width)
            .field("cache_key", &format_args!("{:016x}", self.cache_key))
            .field("wasm_len", &self.wasm_bytes.len())
            .finish()
    }
}

impl CompiledAdapter {
    pub fn module(&self) -> &Module {
        &self.module
    }
}

#[derive(Default)]
struct Inner {
    by_key: HashMap<u64, Arc<CompiledAdapter>>,
    by_pair: BTreeMap<(DataSchema, DataSchema), u64>,
}

/// Compiled adapters keyed by (source, target, formula), with dispatch by
/// schema pair. At most one adapter per pair.
pub struct AdapterRegistry {
    sandbox: Sandbox,
    pub config: SandboxConfig,
    inner: RwLock<Inner>,
    compilations: AtomicU64,
    invocations: AtomicU64,
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        Self::new(SandboxConfig::default())
    }
}

impl fmt::Debug for AdapterRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdapterRegistry")
            .field("adapters", &self.len())
            .field("compilations", &self.compilations())
            .finish()
    }
}

pub fn compile(sandbox: &Sandbox, spec: &AdapterSpec) -> Result<CompiledAdapter, AdapterError> {
    for s in [spec.source_schema, spec.target_schema] {
        if s == DataSchema::CborMap {
            return Err(AdapterError::NotScalar(s));
        }
    }
    let ast = parse_formula(&spec.formula)?;
    let width = spec.width();
    let emitted = emit_module(&ast, width)?;
    let module = sandbox.compile(&emitted.wasm)?;
    Ok(CompiledAdapter {
        spec: spec.clone(),
        ast,
        width,
        wasm_bytes: emitted.wasm,
        text_form: emitted.text,
        cache_key: spec.cache_key(),
        module,
    })
}

impl AdapterRegistry {
    pub fn new(config: SandboxConfig) -> Self {
        Self {
            sandbox: Sandbox::new(),
            config,
            inner: RwLock::new(Inner::default()),
            compilations: AtomicU64::new(0),
            invocations: AtomicU64::new(0),
        }
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn compilations(&self) -> u64 {
        self.compilations.load(Ordering::Relaxed)
    }

    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn get_or_compile(&self, spec: &AdapterSpec) -> Result<Arc<CompiledAdapter>, AdapterError> {
        let key = spec.cache_key();
        let pair = (spec.source_schema, spec.target_schema);
        {
            let inner = self.inner.read().unwrap();
            if let Some(hit) = inner.by_key.get(&key) {
                return Ok(hit.clone());
            }
            if inner.by_pair.contains_key(&pair) {
                return Err(AdapterError::DuplicatePair(pair.0, pair.1));
            }
        }
        let compiled = Arc::new(compile(&self.sandbox, spec)?);
        self.compilations.fetch_add(1, Ordering::Relaxed);
        let mut inner = self.inner.write().unwrap();
        if let Some(hit) = inner.by_key.get(&key) {
            return Ok(hit.clone());
        }
        if inner.by_pair.contains_key(&pair) {
            return Err(AdapterError::DuplicatePair(pair.0, pair.1));
        }
        inner.by_key.insert(key, compiled.clone());
        inner.by_pair.insert(pair, key);
        Ok(compiled)
    }

    pub fn lookup(&self, source: DataSchema, target: DataSchema) -> Option<Arc<CompiledAdapter>> {
        let inner = self.inner.read().unwrap();
        let key = inner.by_pair.get(&(source, target))?;
        inner.by_key.get(key).cloned()
    }

    pub fn has_adapter(&self, source: DataSchema, target: DataSchema) -> bool {
        source == target || self.lookup(source, target).is_some()
    }

    pub fn adapters(&self) -> Vec<Arc<CompiledAdapter>> {
        let inner = self.inner.read().unwrap();
        inner
            .by_pair
            .values()
            .filter_map(|k| inner.by_key.get(k).cloned())
            .collect()
    }

    pub fn execute_scalar(&self, adapter: &CompiledAdapter, input: f64) -> Result<f64, AdapterError> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        self.sandbox
            .execute_scalar(adapter.module(), adapter.width, input, &self.config)
    }

    /// Runs `adapter` on a typed value and coerces to its target schema.
    pub fn apply(&self, adapter: &CompiledAdapter, value: &TypedValue) -> Result<TypedValue, AdapterError> {
        let x = coerce_input(value)?;
        let out = self.execute_scalar(adapter, x)?;
        coerce_output(out, adapter.spec.target_schema)
    }

    pub fn translate(&self, value: &TypedValue, target: DataSchema) -> Result<TypedValue, AdapterError> {
        let source = value.schema();
        if source == target {
            return Ok(value.clone());
        }
        let adapter = self
            .lookup(source, target)
            .ok_or(AdapterError::NoAdapter(source, target))?;
        self.apply(&adapter, value)
    }
}
