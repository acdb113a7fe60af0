use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::NegotiationError;
use crate::model::NodeId;

pub const NEUTRAL: f64 = 0.5;
/// Decay rate in s⁻¹.
pub const DEFAULT_LAMBDA: f64 = 9.6e-7;
pub const LEARNING_RATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReputationRecord {
    pub node_id: NodeId,
    pub score: f64,
    pub interaction_count: u64,
    pub last_update: u64,
}

impl ReputationRecord {
    pub fn neutral(node_id: NodeId, now: u64) -> Self {
        Self {
            node_id,
            score: NEUTRAL,
            interaction_count: 0,
            last_update: now,
        }
    }
}

pub fn confidence(interactions: u64) -> f64 {
    1.0 / (1.0 + (-0.1 * (interactions as f64 - 20.0)).exp())
}

/// Score at `now`, relaxed toward neutral. Does not modify the record.
pub fn decay_reputation(rep: &ReputationRecord, now: u64, lambda: f64) -> Result<f64, NegotiationError> {
    if now < rep.last_update {
        return Err(NegotiationError::ClockRegression {
            now,
            last_update: rep.last_update,
        });
    }
    let elapsed_s = (now - rep.last_update) as f64 / 1e6;
    Ok(NEUTRAL + (rep.score - NEUTRAL) * (-lambda * elapsed_s).exp())
}

pub fn trust_utility(rep: &ReputationRecord, now: u64, lambda: f64) -> Result<f64, NegotiationError> {
    let r = decay_reputation(rep, now, lambda)?;
    Ok((NEUTRAL + (r - NEUTRAL) * confidence(rep.interaction_count)).clamp(0.0, 1.0))
}

pub fn update_reputation(
    rep: &mut ReputationRecord,
    outcome: Outcome,
    now: u64,
    lambda: f64,
) -> Result<(), NegotiationError> {
    let decayed = decay_reputation(rep, now, lambda)?;
    let target = match outcome {
        Outcome::Success => 1.0,
        Outcome::Failure => 0.0,
    };
    rep.score = (decayed + LEARNING_RATE * (target - decayed)).clamp(0.0, 1.0);
    rep.interaction_count += 1;
    rep.last_update = now;
    Ok(())
}

/// Per-node local observations, persisted one record per line:
/// `<node id hex> <score> <interactions> <last update µs>`.
#[derive(Debug, Clone)]
pub struct ReputationStore {
    pub lambda: f64,
    records: BTreeMap<NodeId, ReputationRecord>,
}

impl Default for ReputationStore {
    fn default() -> Self {
        Self::new(DEFAULT_LAMBDA)
    }
}

impl ReputationStore {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            records: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: &NodeId, now: u64) -> ReputationRecord {
        self.records
            .get(id)
            .cloned()
            .unwrap_or_else(|| ReputationRecord::neutral(*id, now))
    }

    pub fn record(&mut self, id: &NodeId, outcome: Outcome, now: u64) -> Result<f64, NegotiationError> {
        let lambda = self.lambda;
        let rec = self
            .records
            .entry(*id)
            .or_insert_with(|| ReputationRecord::neutral(*id, now));
        update_reputation(rec, outcome, now.max(rec.last_update), lambda)?;
        Ok(rec.score)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReputationRecord> {
        self.records.values()
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in self.records.values() {
            out.push_str(&format!(
                "{} {} {} {}\n",
                r.node_id.to_hex(),
                r.score,
                r.interaction_count,
                r.last_update
            ));
        }
        out
    }

    /// Parses the line format. Any malformed line discards the whole file
    /// and yields an empty store.
    pub fn from_lines(text: &str, lambda: f64) -> Self {
        let mut store = Self::new(lambda);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match parse_line(line) {
                Some(r) => {
                    store.records.insert(r.node_id, r);
                }
                None => {
                    tracing::warn!(line, "corrupt reputation store, starting neutral");
                    return Self::new(lambda);
                }
            }
        }
        store
    }

    pub fn load(path: &Path, lambda: f64) -> Self {
        match fs::read_to_string(path) {
            Ok(text) => Self::from_lines(&text, lambda),
            Err(_) => Self::new(lambda),
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(self.to_lines().as_bytes())?;
        f.sync_all()?;
        fs::rename(tmp, path)
    }
}

fn parse_line(line: &str) -> Option<ReputationRecord> {
    let mut parts = line.split_whitespace();
    let id: [u8; 32] = hex::decode(parts.next()?).ok()?.try_into().ok()?;
    let score: f64 = parts.next()?.parse().ok()?;
    let interaction_count = parts.next()?.parse().ok()?;
    let last_update = parts.next()?.parse().ok()?;
    if parts.next().is_some() || !(0.0..=1.0).contains(&score) {
        return None;
    }
    Some(ReputationRecord {
        node_id: NodeId(id),
        score,
        interaction_count,
        last_update,
    })
}
