use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tip_core::adapter::{AdapterRegistry, AdapterSpec, SandboxConfig};
use tip_core::crypto::{Handshake, NodeIdentity, Role};
use tip_core::model::{Capability, DataSchema, NodeRecord};
use tip_core::negotiation::{self, CandidateInput, Intent, ReputationRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchKind {
    Scoring,
    Translate,
    Crypto,
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub name: &'static str,
    pub samples: usize,
    pub mean_us: f64,
    pub median_us: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub kind: String,
    pub size: usize,
    pub timings: Vec<Timing>,
}

fn summarize(name: &'static str, mut us: Vec<f64>) -> Timing {
    us.sort_by(f64::total_cmp);
    let n = us.len().max(1);
    Timing {
        name,
        samples: us.len(),
        mean_us: us.iter().sum::<f64>() / n as f64,
        median_us: us.get(us.len() / 2).copied().unwrap_or(0.0),
    }
}

fn time_us<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64() * 1e6)
}

pub fn synthetic_candidates(n: usize, capability: &str, seed: u64) -> Vec<CandidateInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut key = [0u8; 32];
            rng.fill(&mut key);
            let mut node = NodeRecord::new(key, vec![]);
            let schema = if rng.gen_bool(0.5) { DataSchema::F32 } else { DataSchema::U32 };
            node.capabilities = vec![Capability::new(capability, schema).with_precision(rng.gen_range(0.9..1.0))];
            CandidateInput {
                reputation: ReputationRecord {
                    score: rng.gen_range(0.0..1.0),
                    interaction_count: rng.gen_range(0..100),
                    ..ReputationRecord::neutral(node.node_id, 0)
                },
                node,
                rtt_ms: rng.gen_range(0.1..500.0),
                availability: rng.gen_range(0.5..1.0),
            }
        })
        .collect()
}

pub fn run(kind: BenchKind, size: usize) -> Result<BenchReport, String> {
    let size = size.max(1);
    let timings = match kind {
        BenchKind::Scoring => {
            let cands = synthetic_candidates(size, "bench:cap", 1);
            let intent = Intent::new("bench:cap", DataSchema::F32);
            let mut runs = Vec::new();
            for _ in 0..5 {
                let (r, us) = time_us(|| negotiation::score(&intent, &cands, 1_000_000, 1e-9, &|_| true));
                r.map_err(|e| e.to_string())?;
                runs.push(us);
            }
            vec![summarize("score", runs)]
        }
        BenchKind::Translate => {
            let reg = AdapterRegistry::new(SandboxConfig::default());
            let spec = AdapterSpec::new("pulse_to_ml", DataSchema::U32, DataSchema::F32, "x * 0.2");
            let (a, cold) = time_us(|| reg.get_or_compile(&spec));
            let a = a.map_err(|e| e.to_string())?;
            reg.execute_scalar(&a, 0.0).map_err(|e| e.to_string())?;
            let mut runs = Vec::with_capacity(size);
            for i in 0..size {
                let (r, us) = time_us(|| reg.execute_scalar(&a, i as f64));
                r.map_err(|e| e.to_string())?;
                runs.push(us);
            }
            vec![summarize("compile_cold", vec![cold]), summarize("execute_warm", runs)]
        }
        BenchKind::Crypto => {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let a = NodeIdentity::generate(&mut rng);
            let b = NodeIdentity::generate(&mut rng);
            let mut hs = Vec::with_capacity(size);
            let mut seal = Vec::with_capacity(size);
            let mut open = Vec::with_capacity(size);
            let msg = vec![0x5a; 1024];
            for i in 0..size {
                let tx = (i as u128).to_be_bytes();
                let ((ka, kb), us) = time_us(|| {
                    let x = Handshake::start(&a, tx, Role::Initiator, &mut rng);
                    let y = Handshake::start(&b, tx, Role::Responder, &mut rng);
                    let yo = y.offer();
                    let kb = y.finish(&x.offer(), &a.public()).expect("handshake");
                    let ka = x.finish(&yo, &b.public()).expect("handshake");
                    (ka, kb)
                });
                hs.push(us);
                let mut ka = ka;
                let (sealed, us) = time_us(|| ka.seal(&msg, b"aad"));
                seal.push(us);
                let (r, us) = time_us(|| kb.open(&sealed, b"aad"));
                r.map_err(|e| e.to_string())?;
                open.push(us);
            }
            vec![
                summarize("handshake", hs),
                summarize("seal_1k", seal),
                summarize("open_1k", open),
            ]
        }
    };
    Ok(BenchReport {
        kind: format!("{kind:?}").to_lowercase(),
        size,
        timings,
    })
}
