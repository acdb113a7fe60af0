use std::collections::BTreeMap;

use tip_core::adapter::AdapterSpec;
use tip_core::model::{Capability, DataSchema, TypedValue};
use tip_core::negotiation::Intent;
use tip_core::orchestrator::{self, OrchestratorError, SessionState};
use tip_core::transport::sim::SimConfig;
use tip_core::world::World;

const CAP: &str = "sensor:temp:probe";

fn world(seed: u64) -> World {
    let mut w = World::new(SimConfig {
        seed,
        ..SimConfig::default()
    });
    for n in ["req", "p1", "p2"] {
        w.add_node(n, "lan");
    }
    w.bootstrap_full();
    serve(&mut w, "p1", Capability::new(CAP, DataSchema::U32), 0.99, 21);
    serve(&mut w, "p2", Capability::new(CAP, DataSchema::U32), 0.5, 22);
    w
}

fn serve(w: &mut World, node: &str, cap: Capability, availability: f64, value: u32) {
    let schema = cap.schema;
    orchestrator::provider_serve(
        &mut w.client(node),
        cap,
        availability,
        Box::new(move |_| match schema {
            DataSchema::U16 => Ok(TypedValue::U16(value as u16)),
            _ => Ok(TypedValue::U32(value)),
        }),
    )
    .unwrap();
}

fn intent() -> Intent {
    Intent::new(CAP, DataSchema::U32).with_constraint("max_latency_ms", 100.0)
}

fn provider_name(w: &World, s: &orchestrator::IntentSession) -> String {
    let id = s.provider_id().unwrap();
    w.nodes().find(|(_, n)| n.node_id() == id).unwrap().0.to_owned()
}

#[test]
fn contract_then_encrypted_data() {
    let mut w = world(1);
    let mut s = orchestrator::submit_intent(&mut w.client("req"), intent()).unwrap();
    assert_eq!(s.state, SessionState::Active);
    assert_eq!(provider_name(&w, &s), "p1");
    let c = s.contract.clone().unwrap();
    assert!(c.verify(&w.node("req").public(), &w.node("p1").public()));
    assert_eq!(w.node("p1").provider_contract_count(), 1);

    let v = orchestrator::request_data(&mut w.client("req"), &mut s, &BTreeMap::new()).unwrap();
    assert_eq!(v, TypedValue::U32(21));
    assert_eq!(w.node("p1").stats.data_served, 1);
    assert_eq!(s.delivered, 1);
    assert_eq!(w.node("req").stats.dropped_total(), 0);
    assert_eq!(w.node("p1").stats.dropped_total(), 0);
}

#[test]
fn missing_countersignature_falls_through_to_next_candidate() {
    let mut w = world(2);
    w.node_mut("p1").faults.omit_countersign = true;
    let s = orchestrator::submit_intent(&mut w.client("req"), intent()).unwrap();
    assert_eq!(provider_name(&w, &s), "p2");
    assert_eq!(w.node("p1").provider_contract_count(), 0);
    let p1 = w.node("p1").node_id();
    let now = w.now();
    assert!(w.node("req").reputation.get(&p1, now).score < 0.5);
}

#[test]
fn tampered_countersignature_is_rejected() {
    let mut w = world(3);
    w.node_mut("p1").faults.tamper_contract = true;
    let s = orchestrator::submit_intent(&mut w.client("req"), intent()).unwrap();
    assert_eq!(provider_name(&w, &s), "p2");
}

#[test]
fn provider_error_surfaces_and_session_stays_active() {
    let mut w = World::new(SimConfig::default());
    w.add_node("req", "lan");
    w.add_node("bad", "lan");
    w.bootstrap_full();
    orchestrator::provider_serve(
        &mut w.client("bad"),
        Capability::new(CAP, DataSchema::U32),
        1.0,
        Box::new(|_| Err("sensor offline".into())),
    )
    .unwrap();
    let mut s = orchestrator::submit_intent(&mut w.client("req"), intent()).unwrap();
    let r = orchestrator::request_data(&mut w.client("req"), &mut s, &BTreeMap::new());
    assert_eq!(r, Err(OrchestratorError::ProviderError("sensor offline".into())));
    assert_eq!(s.state, SessionState::Active);
    assert_eq!(w.node("bad").stats.handler_errors, 1);
}

#[test]
fn no_providers_fails_the_session() {
    let mut w = World::new(SimConfig::default());
    w.add_node("req", "lan");
    w.add_node("other", "lan");
    w.bootstrap_full();
    let mut s = orchestrator::IntentSession::new(intent());
    let r = orchestrator::establish(&mut w.client("req"), &mut s);
    assert_eq!(r, Err(OrchestratorError::NoProviders(CAP.into())));
    assert_eq!(s.state, SessionState::Failed);
}

#[test]
fn native_schema_is_translated_by_the_requester() {
    let mut w = World::new(SimConfig::default());
    w.add_node("req", "lan");
    w.add_node("p", "lan");
    w.bootstrap_full();
    serve(&mut w, "p", Capability::new(CAP, DataSchema::U16), 1.0, 300);
    w.node_mut("req")
        .adapters
        .get_or_compile(&AdapterSpec::new("half", DataSchema::U16, DataSchema::F32, "x * 0.5"))
        .unwrap();
    let mut s = orchestrator::submit_intent(&mut w.client("req"), Intent::new(CAP, DataSchema::F32)).unwrap();
    assert_eq!(s.contract.as_ref().unwrap().body.adapter_id.as_deref(), Some("half"));
    let v = orchestrator::request_data(&mut w.client("req"), &mut s, &BTreeMap::new()).unwrap();
    assert_eq!(v, TypedValue::F32(150.0));
}

#[test]
fn unadaptable_schema_is_never_contracted() {
    let mut w = World::new(SimConfig::default());
    w.add_node("req", "lan");
    w.add_node("p", "lan");
    w.bootstrap_full();
    serve(&mut w, "p", Capability::new(CAP, DataSchema::U16), 1.0, 300);
    let r = orchestrator::submit_intent(&mut w.client("req"), Intent::new(CAP, DataSchema::F32));
    assert_eq!(r.err(), Some(OrchestratorError::AllCandidatesRejected));
    assert_eq!(w.node("p").provider_contract_count(), 0);
}

#[test]
fn stream_pushes_at_the_capability_rate() {
    let mut w = World::new(SimConfig::default());
    w.add_node("req", "lan");
    w.add_node("p", "lan");
    w.bootstrap_full();
    serve(&mut w, "p", Capability::new(CAP, DataSchema::U32).with_rate(10.0), 1.0, 5);
    let mut s = orchestrator::submit_intent(&mut w.client("req"), intent()).unwrap();
    orchestrator::subscribe(&mut w.client("req"), &mut s, &BTreeMap::new()).unwrap();
    let deadline = w.now() + 1_000_000;
    let got = orchestrator::poll_stream(&mut w.client("req"), &mut s, deadline);
    assert!((9..=11).contains(&got.len()), "{} updates", got.len());
    assert!(got.iter().all(|r| r == &Ok(TypedValue::U32(5))));
    orchestrator::close(&mut w.client("req"), &mut s);
    assert_eq!(s.state, SessionState::Closed);
}

#[test]
fn muted_provider_times_out_then_heals() {
    let mut w = world(4);
    let mut s = orchestrator::submit_intent(&mut w.client("req"), intent()).unwrap();
    assert_eq!(provider_name(&w, &s), "p1");
    w.set_muted("p1", true);
    let v = orchestrator::request_with_healing(&mut w.client("req"), &mut s, &BTreeMap::new()).unwrap();
    assert_eq!(v, TypedValue::U32(22));
    assert_eq!(provider_name(&w, &s), "p2");
    assert_eq!(s.heals, 1);
    assert!(!s.visited(SessionState::Failed));
    assert_eq!(s.illegal_transitions, 0);
}
