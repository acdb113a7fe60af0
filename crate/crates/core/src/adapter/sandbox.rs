//! Bounded execution of adapter modules on the wasmi interpreter. Every call
//! gets a fresh store and instance with a fuel budget and a memory cap.

use std::time::{Duration, Instant};

use wasmi::{Config, Engine, Linker, Module, Store, StoreLimits, StoreLimitsBuilder};

use super::emit::{Width, BUFFER_EXPORT, MEMORY_EXPORT, TRANSFORM_EXPORT};
use super::AdapterError;

pub const PAGE_SIZE: usize = 65_536;
/// Guest address the host writes buffer inputs to.
pub const BUFFER_BASE: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SandboxConfig {
    pub linear_memory_pages: u32,
    pub fuel_limit: u64,
    pub timeout: Duration,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            linear_memory_pages: 1,
            fuel_limit: 1_000_000,
            timeout: Duration::from_millis(50),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sandbox {
    engine: Engine,
}

impl Default for Sandbox {
    fn default() -> Self {
        Self::new()
    }
}

fn trap(e: wasmi::Error) -> AdapterError {
    match e.as_trap_code() {
        Some(code) => AdapterError::Trap(code.trap_message().to_owned()),
        None => AdapterError::Trap(e.to_string()),
    }
}

impl Sandbox {
    pub fn new() -> Self {
        let mut config = Config::default();
        config.consume_fuel(true);
        Self {
            engine: Engine::new(&config),
        }
    }

    pub fn compile(&self, wasm: &[u8]) -> Result<Module, AdapterError> {
        Module::new(&self.engine, wasm).map_err(|e| AdapterError::InvalidModule(e.to_string()))
    }

    fn instantiate(
        &self,
        module: &Module,
        cfg: &SandboxConfig,
    ) -> Result<(Store<StoreLimits>, wasmi::Instance), AdapterError> {
        let limits = StoreLimitsBuilder::new()
            .memory_size(cfg.linear_memory_pages as usize * PAGE_SIZE)
            .memories(1)
            .tables(1)
            .instances(1)
            .trap_on_grow_failure(true)
            .build();
        let mut store = Store::new(&self.engine, limits);
        store.limiter(|l| l);
        store
            .set_fuel(cfg.fuel_limit)
            .map_err(|e| AdapterError::Trap(e.to_string()))?;
        let linker = Linker::<StoreLimits>::new(&self.engine);
        let instance = linker
            .instantiate(&mut store, module)
            .and_then(|pre| pre.start(&mut store))
            .map_err(trap)?;
        Ok((store, instance))
    }

    pub fn execute_scalar(
        &self,
        module: &Module,
        width: Width,
        input: f64,
        cfg: &SandboxConfig,
    ) -> Result<f64, AdapterError> {
        let started = Instant::now();
        let (mut store, instance) = self.instantiate(module, cfg)?;
        let out = match width {
            Width::F32 => {
                let f = instance
                    .get_typed_func::<f32, f32>(&store, TRANSFORM_EXPORT)
                    .map_err(|e| AdapterError::InvalidModule(e.to_string()))?;
                f.call(&mut store, input as f32).map_err(trap)? as f64
            }
            Width::F64 => {
                let f = instance
                    .get_typed_func::<f64, f64>(&store, TRANSFORM_EXPORT)
                    .map_err(|e| AdapterError::InvalidModule(e.to_string()))?;
                f.call(&mut store, input).map_err(trap)?
            }
        };
        if started.elapsed() > cfg.timeout {
            return Err(AdapterError::Timeout(cfg.timeout));
        }
        Ok(out)
    }

    /// Buffer protocol: the input is written at [`BUFFER_BASE`], the guest
    /// gets `(offset, length)` and returns `result_offset << 32 | result_length`.
    pub fn execute_buffer(
        &self,
        module: &Module,
        payload: &[u8],
        cfg: &SandboxConfig,
    ) -> Result<Vec<u8>, AdapterError> {
        let started = Instant::now();
        let (mut store, instance) = self.instantiate(module, cfg)?;
        let memory = instance
            .get_memory(&store, MEMORY_EXPORT)
            .ok_or_else(|| AdapterError::InvalidModule("no exported memory".into()))?;
        let f = instance
            .get_typed_func::<(i32, i32), i64>(&store, BUFFER_EXPORT)
            .map_err(|e| AdapterError::InvalidModule(e.to_string()))?;
        memory
            .write(&mut store, BUFFER_BASE as usize, payload)
            .map_err(|_| AdapterError::MalformedResult("input does not fit guest memory".into()))?;
        let packed = f
            .call(&mut store, (BUFFER_BASE as i32, payload.len() as i32))
            .map_err(trap)? as u64;
        if started.elapsed() > cfg.timeout {
            return Err(AdapterError::Timeout(cfg.timeout));
        }
        let offset = (packed >> 32) as usize;
        let len = (packed & 0xffff_ffff) as usize;
        let data = memory.data(&store);
        match offset.checked_add(len) {
            Some(end) if end <= data.len() => Ok(data[offset..end].to_vec()),
            _ => Err(AdapterError::MalformedResult(format!(
                "result {offset}+{len} exceeds {} bytes of memory",
                data.len()
            ))),
        }
    }
}
