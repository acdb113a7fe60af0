use tip_core::scenario::factory::{run_factory_scenario, FactoryVariant, DEFAULT_SEED};

#[test]
fn nominal_delivers_500_ml() {
    let (report, r) = run_factory_scenario(FactoryVariant::Nominal, DEFAULT_SEED);
    print!("{}", report.to_jsonl());
    r.unwrap();
    let values = report.values("fill");
    assert_eq!(values.len(), 10);
    assert!(values.iter().all(|v| *v == 500.0));
    assert_eq!(report.session("fill").unwrap().heals, 0);
}

#[test]
fn degraded_filler_heals_to_fill_b() {
    let (report, r) = run_factory_scenario(FactoryVariant::Degrade, DEFAULT_SEED);
    print!("{}", report.to_jsonl());
    r.unwrap();
    let s = report.session("fill").unwrap();
    assert_eq!(s.provider.as_deref(), Some("fill_b"));
    assert!(!s.states_visited.contains(&"failed".to_string()));
    assert_eq!(report.duplicate_deliveries(), 0);
}

#[test]
fn muted_fillers_fail_the_session() {
    let (report, r) = run_factory_scenario(FactoryVariant::MuteBoth, DEFAULT_SEED);
    print!("{}", report.to_jsonl());
    r.unwrap();
    assert_eq!(report.session("fill").unwrap().state, "failed");
}
