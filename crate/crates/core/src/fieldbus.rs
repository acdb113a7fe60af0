//! Simulated Modbus holding registers of a filling machine and their
//! mapping to structured telemetry.

use std::collections::BTreeMap;

use ciborium::value::Value;
use serde::Serialize;
use thiserror::Error;

use crate::cbor;

pub const REG_PULSES_MSW: u16 = 40001;
pub const REG_PULSES_LSW: u16 = 40002;
pub const REG_VALVE: u16 = 40003;
pub const REG_PRESSURE_MBAR: u16 = 40004;
pub const REG_TEMP_DECI_C: u16 = 40005;
pub const REGISTERS: [u16; 5] = [
    REG_PULSES_MSW,
    REG_PULSES_LSW,
    REG_VALVE,
    REG_PRESSURE_MBAR,
    REG_TEMP_DECI_C,
];

/// Millilitres per flow-meter pulse.
pub const ML_PER_PULSE: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldbusError {
    #[error("register {0} is not set")]
    MissingRegister(u16),
    #[error("register {0} is not part of the map")]
    UndefinedRegister(u16),
    #[error("valve state {0} is neither 0 nor 1")]
    InvalidValveState(u16),
    #[error("pressure {0} mbar is out of range")]
    PressureOutOfRange(u16),
    #[error("temperature {0} (0.1 °C) is out of range")]
    TemperatureOutOfRange(u16),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegisterMap {
    holding: BTreeMap<u16, u16>,
}

impl RegisterMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: &[(u16, u16)]) -> Result<Self, FieldbusError> {
        let mut m = Self::new();
        for (a, v) in pairs {
            m.write(*a, *v)?;
        }
        Ok(m)
    }

    pub fn write(&mut self, address: u16, value: u16) -> Result<(), FieldbusError> {
        if !REGISTERS.contains(&address) {
            return Err(FieldbusError::UndefinedRegister(address));
        }
        self.holding.insert(address, value);
        Ok(())
    }

    pub fn read(&self, address: u16) -> Result<u16, FieldbusError> {
        if !REGISTERS.contains(&address) {
            return Err(FieldbusError::UndefinedRegister(address));
        }
        self.holding
            .get(&address)
            .copied()
            .ok_or(FieldbusError::MissingRegister(address))
    }

    pub fn write_pulses(&mut self, pulses: u32) {
        self.holding.insert(REG_PULSES_MSW, (pulses >> 16) as u16);
        self.holding.insert(REG_PULSES_LSW, pulses as u16);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FillTelemetry {
    pub pulses: u32,
    pub valve_open: bool,
    pub pressure_bar: f32,
    pub temp_c: f32,
}

impl FillTelemetry {
    pub fn to_cbor(&self) -> Value {
        let entries = [
            ("pulses", Value::Integer(self.pulses.into())),
            ("valve_open", Value::Bool(self.valve_open)),
            ("pressure_bar", Value::Float(self.pressure_bar as f64)),
            ("temp_c", Value::Float(self.temp_c as f64)),
        ]
        .map(|(k, v)| (k.to_owned(), v));
        cbor::text_map(entries.iter().map(|(k, v)| (k, v.clone())))
    }
}

pub fn map_registers(regs: &RegisterMap) -> Result<FillTelemetry, FieldbusError> {
    let msw = regs.read(REG_PULSES_MSW)?;
    let lsw = regs.read(REG_PULSES_LSW)?;
    let valve = regs.read(REG_VALVE)?;
    let pressure = regs.read(REG_PRESSURE_MBAR)?;
    let temp = regs.read(REG_TEMP_DECI_C)?;
    let valve_open = match valve {
        0 => false,
        1 => true,
        v => return Err(FieldbusError::InvalidValveState(v)),
    };
    if pressure > 10_000 {
        return Err(FieldbusError::PressureOutOfRange(pressure));
    }
    if temp > 1_200 {
        return Err(FieldbusError::TemperatureOutOfRange(temp));
    }
    Ok(FillTelemetry {
        pulses: ((msw as u32) << 16) | lsw as u32,
        valve_open,
        pressure_bar: pressure as f32 / 1000.0,
        temp_c: temp as f32 / 10.0,
    })
}

/// A filling machine driven through its registers. Each fill runs the
/// valve for the requested volume and leaves the pulse count behind.
#[derive(Debug, Clone)]
pub struct FillMachine {
    pub registers: RegisterMap,
    /// Every telemetry snapshot read back, in order.
    pub log: Vec<FillTelemetry>,
}

impl Default for FillMachine {
    fn default() -> Self {
        Self::new()
    }
}

impl FillMachine {
    pub fn new() -> Self {
        let registers = RegisterMap::from_pairs(&[
            (REG_PULSES_MSW, 0),
            (REG_PULSES_LSW, 0),
            (REG_VALVE, 0),
            (REG_PRESSURE_MBAR, 2500),
            (REG_TEMP_DECI_C, 235),
        ])
        .expect("all addresses are defined");
        Self {
            registers,
            log: Vec::new(),
        }
    }

    pub fn fill(&mut self, volume_ml: f64) -> Result<FillTelemetry, FieldbusError> {
        let pulses = (volume_ml / ML_PER_PULSE).round().clamp(0.0, u32::MAX as f64) as u32;
        self.registers.write(REG_VALVE, 1)?;
        self.registers.write_pulses(pulses);
        let t = map_registers(&self.registers)?;
        self.registers.write(REG_VALVE, 0)?;
        self.log.push(t);
        Ok(t)
    }
}
