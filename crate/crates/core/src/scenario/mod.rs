//! Scripted runs on the simulated network.
//!
//! A script declares nodes and a list of steps executed in order:
//!
//! ```toml
//! name = "demo"
//! seed = 7
//! relays = 4
//!
//! [[node]]
//! name = "planner"
//! segment = "line"
//!
//! [[step]]
//! action = "serve"
//! node = "fill_a"
//! capability = "machine:fluid:fill"
//! schema = "u32"
//! handler = "fill"
//!
//! [[step]]
//! action = "intent"
//! node = "planner"
//! session = "fill"
//! intent = { capability = "machine:fluid:fill", desired_schema = "f32" }
//! ```
//!
//! Every step appends to a [`ScenarioReport`], which serializes to JSON
//! lines.

pub mod factory;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use ciborium::value::Value;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::adapter::{coerce_output, AdapterSpec};
use crate::fieldbus::{FillMachine, FillTelemetry};
use crate::model::{Capability, DataSchema, NodeId, TypedValue};
use crate::negotiation::Intent;
use crate::node::Handler;
use crate::orchestrator::{self, IntentSession, SessionState};
use crate::transport::sim::SimConfig;
use crate::world::World;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("script: {0}")]
    Parse(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("step {step}: {message}")]
    Step { step: usize, message: String },
    #[error("assertion failed at step {step}: {message}")]
    AssertionFailure { step: usize, message: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Extra nodes on a "backbone" segment that only carry DHT traffic.
    #[serde(default)]
    pub relays: usize,
    #[serde(default, rename = "node")]
    pub nodes: Vec<NodeDecl>,
    #[serde(default, rename = "step")]
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDecl {
    pub name: String,
    pub segment: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Serve {
        node: String,
        capability: String,
        schema: String,
        #[serde(default = "one")]
        precision: f64,
        #[serde(default)]
        rate_hz: f64,
        #[serde(default = "one")]
        availability: f64,
        handler: String,
        #[serde(default)]
        value: f64,
    },
    Adapter {
        node: String,
        id: String,
        source: String,
        target: String,
        formula: String,
    },
    Intent {
        node: String,
        session: String,
        intent: toml::Table,
    },
    Request {
        session: String,
        #[serde(default = "one_u32")]
        count: u32,
        #[serde(default = "default_interval")]
        interval_ms: u64,
    },
    Latency {
        node: String,
        ms: u64,
    },
    Mute {
        node: String,
        #[serde(default = "yes")]
        muted: bool,
    },
    Advance {
        ms: u64,
    },
    Close {
        session: String,
    },
    Expect {
        session: String,
        state: Option<String>,
        provider: Option<String>,
        heals: Option<u32>,
        visited_failed: Option<bool>,
        values: Option<f64>,
        delivered: Option<u64>,
    },
}

fn one() -> f64 {
    1.0
}

fn one_u32() -> u32 {
    1
}

fn yes() -> bool {
    true
}

fn default_interval() -> u64 {
    100
}

impl Script {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEvent {
    pub t_us: u64,
    pub kind: String,
    pub detail: serde_json::Value,
}

/// One delivered value and the request that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Delivery {
    pub session: String,
    pub t_us: u64,
    pub request: String,
    pub provider: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionSummary {
    pub state: String,
    pub provider: Option<String>,
    pub heals: u32,
    pub delivered: u64,
    pub illegal_transitions: u32,
    pub states_visited: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub events: Vec<ReportEvent>,
    pub deliveries: Vec<Delivery>,
    pub request_errors: u64,
    pub sessions: BTreeMap<String, SessionSummary>,
    /// Register snapshots per filling machine, in fill order.
    pub machines: BTreeMap<String, Vec<FillTelemetry>>,
    /// Raw network trace from the simulator.
    #[serde(skip)]
    pub event_log: String,
}

impl ScenarioReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn session(&self, name: &str) -> Option<&SessionSummary> {
        self.sessions.get(name)
    }

    pub fn values(&self, session: &str) -> Vec<f64> {
        self.deliveries
            .iter()
            .filter(|d| d.session == session)
            .map(|d| d.value)
            .collect()
    }

    /// Number of request ids that appear more than once among deliveries.
    pub fn duplicate_deliveries(&self) -> usize {
        let mut seen = BTreeMap::new();
        for d in &self.deliveries {
            *seen.entry(d.request.as_str()).or_insert(0usize) += 1;
        }
        seen.values().filter(|n| **n > 1).count()
    }
}

fn state_name(s: SessionState) -> String {
    format!("{s:?}").to_lowercase()
}

fn param_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Integer(i) => i128::from(*i).to_string().parse().ok(),
        Value::Float(f) => Some(*f),
        _ => None,
    }
}

fn fill_handler(machine: Arc<Mutex<FillMachine>>, schema: DataSchema) -> Handler {
    Box::new(move |params| {
        let volume = params
            .get("volume_ml")
            .and_then(param_f64)
            .ok_or_else(|| "volume_ml missing".to_string())?;
        let t = machine
            .lock()
            .expect("machine lock")
            .fill(volume)
            .map_err(|e| e.to_string())?;
        match schema {
            DataSchema::U32 => Ok(TypedValue::U32(t.pulses)),
            DataSchema::U16 => u16::try_from(t.pulses)
                .map(TypedValue::U16)
                .map_err(|_| "pulse count overflows u16".to_string()),
            other => Err(format!("fill handler cannot emit {}", other.name())),
        }
    })
}

pub struct Runner {
    pub world: World,
    pub sessions: BTreeMap<String, (String, IntentSession)>,
    pub report: ScenarioReport,
    machines: BTreeMap<String, Arc<Mutex<FillMachine>>>,
    seen_transitions: BTreeMap<String, usize>,
}

impl Runner {
    pub fn new(script: &Script, seed: u64) -> Result<Self, ScenarioError> {
        let mut world = World::new(SimConfig {
            seed,
            ..SimConfig::default()
        });
        for n in &script.nodes {
            if world.get(&n.name).is_some() {
                return Err(ScenarioError::Parse(format!("node {} declared twice", n.name)));
            }
            world.add_node(&n.name, &n.segment);
        }
        for i in 0..script.relays {
            world.add_node(&format!("relay{i}"), "backbone");
        }
        world.bootstrap_full();
        let mut report = ScenarioReport {
            name: script.name.clone(),
            seed,
            ..ScenarioReport::default()
        };
        let t_us = world.now();
        for n in &script.nodes {
            report.events.push(ReportEvent {
                t_us,
                kind: "node_started".into(),
                detail: json!({
                    "node": n.name,
                    "segment": n.segment,
                    "id": world.node(&n.name).node_id().short(),
                }),
            });
        }
        Ok(Self {
            world,
            sessions: BTreeMap::new(),
            report,
            machines: BTreeMap::new(),
            seen_transitions: BTreeMap::new(),
        })
    }

    fn event(&mut self, kind: &str, detail: serde_json::Value) {
        self.report.events.push(ReportEvent {
            t_us: self.world.now(),
            kind: kind.into(),
            detail,
        });
    }

    fn node_name(&self, id: NodeId) -> String {
        self.world
            .nodes()
            .find(|(_, n)| n.node_id() == id)
            .map(|(k, _)| k.to_owned())
            .unwrap_or_else(|| id.short())
    }

    fn check_node(&self, name: &str) -> Result<(), ScenarioError> {
        match self.world.get(name) {
            Some(_) => Ok(()),
            None => Err(ScenarioError::UnknownNode(name.into())),
        }
    }

    fn record_transitions(&mut self, session: &str) {
        let Some((_, s)) = self.sessions.get(session) else { return };
        let start = self.seen_transitions.get(session).copied().unwrap_or(0);
        let fresh: Vec<_> = s.transitions[start..].to_vec();
        self.seen_transitions.insert(session.into(), s.transitions.len());
        for (t, from, to) in fresh {
            self.report.events.push(ReportEvent {
                t_us: t,
                kind: "state".into(),
                detail: json!({ "session": session, "from": state_name(from), "to": state_name(to) }),
            });
        }
    }

    fn record_contract(&mut self, session: &str) {
        let Some((_, s)) = self.sessions.get(session) else { return };
        let Some(c) = &s.contract else { return };
        let detail = json!({
            "session": session,
            "contract_id": hex::encode(c.contract_id()),
            "provider": self.node_name(c.body.provider_id),
            "capability": c.body.capability.id,
            "native_schema": c.body.capability.schema.name(),
            "agreed_schema": c.body.agreed_schema.name(),
            "adapter": c.body.adapter_id,
            "expiry_us": c.body.expiry,
        });
        self.event("contract", detail);
    }

    pub fn run_step(&mut self, index: usize, step: &Step) -> Result<(), ScenarioError> {
        let step_err = |message: String| ScenarioError::Step { step: index, message };
        match step {
            Step::Serve {
                node,
                capability,
                schema,
                precision,
                rate_hz,
                availability,
                handler,
                value,
            } => {
                self.check_node(node)?;
                let schema = DataSchema::parse(schema).ok_or_else(|| step_err(format!("unknown schema {schema}")))?;
                let cap = Capability::new(capability.clone(), schema)
                    .with_precision(*precision)
                    .with_rate(*rate_hz);
                let h: Handler = match handler.as_str() {
                    "fill" => {
                        let m = Arc::new(Mutex::new(FillMachine::new()));
                        self.machines.insert(node.clone(), m.clone());
                        fill_handler(m, schema)
                    }
                    "constant" => {
                        let v = coerce_output(*value, schema).map_err(|e| step_err(e.to_string()))?;
                        Box::new(move |_| Ok(v.clone()))
                    }
                    "error" => Box::new(|_| Err("stage fault".to_string())),
                    other => return Err(step_err(format!("unknown handler {other}"))),
                };
                orchestrator::provider_serve(&mut self.world.client(node), cap, *availability, h)
                    .map_err(|e| step_err(e.to_string()))?;
                self.event(
                    "serve",
                    json!({ "node": node, "capability": capability, "schema": schema.name(), "precision": precision }),
                );
            }
            Step::Adapter {
                node,
                id,
                source,
                target,
                formula,
            } => {
                self.check_node(node)?;
                let parse = |s: &str| DataSchema::parse(s).ok_or_else(|| step_err(format!("unknown schema {s}")));
                let spec = AdapterSpec::new(id, parse(source)?, parse(target)?, formula);
                self.world
                    .node_mut(node)
                    .adapters
                    .get_or_compile(&spec)
                    .map_err(|e| step_err(e.to_string()))?;
                self.event(
                    "adapter",
                    json!({ "node": node, "id": id, "source": source, "target": target, "formula": formula }),
                );
            }
            Step::Intent { node, session, intent } => {
                self.check_node(node)?;
                let text = toml::to_string(intent).map_err(|e| step_err(e.to_string()))?;
                let intent = Intent::from_toml(&text).map_err(|e| step_err(e.to_string()))?;
                self.event(
                    "intent",
                    json!({ "session": session, "node": node, "capability": intent.capability_required }),
                );
                let mut s = IntentSession::new(intent);
                let r = orchestrator::establish(&mut self.world.client(node), &mut s);
                self.sessions.insert(session.clone(), (node.clone(), s));
                self.record_transitions(session);
                self.record_candidates(session);
                match r {
                    Ok(()) => self.record_contract(session),
                    Err(e) => self.event("intent_failed", json!({ "session": session, "error": e.to_string() })),
                }
            }
            Step::Request {
                session,
                count,
                interval_ms,
            } => {
                for _ in 0..*count {
                    let (node, mut s) = self
                        .sessions
                        .remove(session)
                        .ok_or_else(|| ScenarioError::UnknownSession(session.clone()))?;
                    if matches!(s.state, SessionState::Failed | SessionState::Closed) {
                        self.sessions.insert(session.clone(), (node, s));
                        break;
                    }
                    let params = s.intent.params.clone();
                    let heals_before = s.heals;
                    let r = orchestrator::request_with_healing(&mut self.world.client(&node), &mut s, &params);
                    let request = s.last_request.map(hex::encode).unwrap_or_default();
                    let healed = s.heals > heals_before;
                    self.sessions.insert(session.clone(), (node, s));
                    self.record_transitions(session);
                    if healed {
                        let s = &self.sessions[session].1;
                        let provider = s.provider_id().map(|p| self.node_name(p));
                        let state = state_name(s.state);
                        self.event("heal", json!({ "session": session, "provider": provider, "state": state }));
                        if self.sessions[session].1.state == SessionState::Active {
                            self.record_contract(session);
                        }
                    }
                    match r {
                        Ok(v) => {
                            let value = v.as_f64().unwrap_or(f64::NAN);
                            let provider = self.sessions[session]
                                .1
                                .last_served_by
                                .map(|p| self.node_name(p))
                                .unwrap_or_default();
                            self.event(
                                "value",
                                json!({ "session": session, "request": request, "provider": provider, "value": value }),
                            );
                            self.report.deliveries.push(Delivery {
                                session: session.clone(),
                                t_us: self.world.now(),
                                request,
                                provider,
                                value,
                            });
                        }
                        Err(e) => {
                            self.report.request_errors += 1;
                            self.event("request_error", json!({ "session": session, "error": e.to_string() }));
                        }
                    }
                    self.world.run_for(interval_ms * 1000);
                }
            }
            Step::Latency { node, ms } => {
                self.check_node(node)?;
                self.world.set_latency(node, ms * 1000);
                self.event("fault", json!({ "node": node, "latency_ms": ms }));
            }
            Step::Mute { node, muted } => {
                self.check_node(node)?;
                self.world.set_muted(node, *muted);
                self.event("fault", json!({ "node": node, "muted": muted }));
            }
            Step::Advance { ms } => self.world.run_for(ms * 1000),
            Step::Close { session } => {
                let (node, s) = self
                    .sessions
                    .get_mut(session)
                    .ok_or_else(|| ScenarioError::UnknownSession(session.clone()))?;
                let node = node.clone();
                orchestrator::close(&mut self.world.client(&node), s);
                self.record_transitions(session);
            }
            Step::Expect {
                session,
                state,
                provider,
                heals,
                visited_failed,
                values,
                delivered,
            } => {
                let (_, s) = self
                    .sessions
                    .get(session)
                    .ok_or_else(|| ScenarioError::UnknownSession(session.clone()))?;
                let mut problems = Vec::new();
                if let Some(want) = state {
                    let got = state_name(s.state);
                    if &got != want {
                        problems.push(format!("state is {got}, expected {want}"));
                    }
                }
                if let Some(want) = provider {
                    let got = s.provider_id().map(|p| self.node_name(p));
                    if got.as_deref() != Some(want.as_str()) {
                        problems.push(format!("provider is {got:?}, expected {want}"));
                    }
                }
                if let Some(want) = heals {
                    if s.heals != *want {
                        problems.push(format!("{} heals, expected {want}", s.heals));
                    }
                }
                if let Some(want) = visited_failed {
                    if s.visited(SessionState::Failed) != *want {
                        problems.push(format!("visited Failed is {}", !want));
                    }
                }
                if let Some(want) = values {
                    let got = self.report.values(session);
                    if got.is_empty() || got.iter().any(|v| v != want) {
                        problems.push(format!("values {got:?}, expected all {want}"));
                    }
                }
                if let Some(want) = delivered {
                    if s.delivered != *want {
                        problems.push(format!("{} delivered, expected {want}", s.delivered));
                    }
                }
                if !problems.is_empty() {
                    let message = problems.join("; ");
                    self.event("assert_failed", json!({ "session": session, "problems": message }));
                    return Err(ScenarioError::AssertionFailure { step: index, message });
                }
                self.event("assert_ok", json!({ "session": session }));
            }
        }
        Ok(())
    }

    fn record_candidates(&mut self, session: &str) {
        let Some((_, s)) = self.sessions.get(session) else { return };
        let rows: Vec<_> = s
            .candidates
            .iter()
            .map(|c| {
                json!({
                    "node": self.node_name(c.node.node_id),
                    "u_func": c.u_func,
                    "u_cost": c.u_cost,
                    "u_trust": c.u_trust,
                    "u_avail": c.u_avail,
                    "total": c.total,
                })
            })
            .collect();
        if !rows.is_empty() {
            self.event("candidates", json!({ "session": session, "ranked": rows }));
        }
    }

    pub fn finish(mut self) -> ScenarioReport {
        for (name, (_, s)) in &self.sessions {
            let mut states: Vec<String> = Vec::new();
            for (_, _, to) in &s.transitions {
                let n = state_name(*to);
                if !states.contains(&n) {
                    states.push(n);
                }
            }
            self.report.sessions.insert(
                name.clone(),
                SessionSummary {
                    state: state_name(s.state),
                    provider: s.provider_id().map(|p| self.node_name(p)),
                    heals: s.heals,
                    delivered: s.delivered,
                    illegal_transitions: s.illegal_transitions,
                    states_visited: states,
                },
            );
        }
        for (name, m) in &self.machines {
            let log = m.lock().expect("machine lock").log.clone();
            self.report.machines.insert(name.clone(), log);
        }
        self.report.event_log = self.world.event_log_text();
        self.report
    }
}

/// Runs every step of `script`. `seed` overrides the script's own seed.
/// The report is returned alongside the first error, if any.
pub fn run_script(script: &Script, seed: Option<u64>) -> (ScenarioReport, Result<(), ScenarioError>) {
    let seed = seed.unwrap_or(script.seed);
    let mut runner = match Runner::new(script, seed) {
        Ok(r) => r,
        Err(e) => return (ScenarioReport::default(), Err(e)),
    };
    let mut result = Ok(());
    for (i, step) in script.steps.iter().enumerate() {
        if let Err(e) = runner.run_step(i, step) {
            result = Err(e);
            break;
        }
    }
    (runner.finish(), result)
}

pub fn run_script_text(text: &str, seed: Option<u64>) -> (ScenarioReport, Result<(), ScenarioError>) {
    match Script::parse(text) {
        Ok(s) => run_script(&s, seed),
        Err(e) => (ScenarioReport::default(), Err(e)),
    }
}
