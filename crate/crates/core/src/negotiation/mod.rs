//! Candidate scoring, AHP weights and reputation bookkeeping.

pub mod ahp;
pub mod intent;
pub mod reputation;

use std::cmp::Ordering;

use thiserror::Error;

use crate::model::{Capability, NodeId, NodeRecord};

pub use ahp::{ahp_weights, AhpResult, RANDOM_INDEX_4};
pub use intent::{Intent, Weights};
pub use reputation::{
    confidence, decay_reputation, trust_utility, update_reputation, Outcome, ReputationRecord,
    ReputationStore, DEFAULT_LAMBDA, LEARNING_RATE, NEUTRAL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NegotiationError {
    #[error("negative round-trip time {0}")]
    NegativeRtt(f64),
    #[error("clock moved backwards: {now} < {last_update}")]
    ClockRegression { now: u64, last_update: u64 },
    #[error("capability {offered} does not match {required}")]
    CapabilityMismatch { required: String, offered: String },
    #[error("no candidates to score")]
    NoCandidates,
    #[error("matrix is not reciprocal at ({0}, {1})")]
    NotReciprocal(usize, usize),
    #[error("matrix entry ({0}, {1}) is not positive")]
    NonPositiveEntry(usize, usize),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid intent: {0}")]
    InvalidIntent(String),
}

pub const ADAPTER_PENALTY: f64 = 0.9;

pub fn proximity_utility(rtt_ms: f64) -> Result<f64, NegotiationError> {
    if !(rtt_ms >= 0.0) {
        return Err(NegotiationError::NegativeRtt(rtt_ms));
    }
    Ok(1.0 / (1.0 + rtt_ms / 100.0))
}

/// U_func and whether an adapter is needed. `adapter_available` reports
/// whether a translation from the capability's schema to the desired one
/// is registered.
pub fn functional_utility(
    intent: &Intent,
    cap: &Capability,
    adapter_available: bool,
) -> Result<(f64, bool), NegotiationError> {
    if cap.id != intent.capability_required {
        return Err(NegotiationError::CapabilityMismatch {
            required: intent.capability_required.clone(),
            offered: cap.id.clone(),
        });
    }
    if let Some(min) = intent.constraints.get("min_precision") {
        if cap.precision < *min {
            return Ok((0.0, false));
        }
    }
    if let Some(min) = intent.constraints.get("min_rate_hz") {
        if cap.rate_hz < *min {
            return Ok((0.0, false));
        }
    }
    if cap.schema == intent.desired_schema {
        Ok((1.0, false))
    } else if adapter_available {
        Ok((ADAPTER_PENALTY, true))
    } else {
        Ok((0.0, false))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub node: NodeRecord,
    pub u_func: f64,
    pub u_cost: f64,
    pub u_trust: f64,
    pub u_avail: f64,
    pub total: f64,
    pub adapter_required: bool,
}

impl ScoredCandidate {
    pub fn new(
        node: NodeRecord,
        [u_func, u_cost, u_trust, u_avail]: [f64; 4],
        adapter_required: bool,
        weights: &Weights,
    ) -> Self {
        let total = weights.func * u_func
            + weights.cost * u_cost
            + weights.trust * u_trust
            + weights.avail * u_avail;
        Self {
            node,
            u_func,
            u_cost,
            u_trust,
            u_avail,
            total,
            adapter_required,
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.node.node_id
    }
}

/// Descending by total, then higher trust, then smaller node id.
pub fn rank_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.total
        .total_cmp(&a.total)
        .then(b.u_trust.total_cmp(&a.u_trust))
        .then(a.node.node_id.cmp(&b.node.node_id))
}

/// Raw measurements for one candidate before weighting.
#[derive(Debug, Clone)]
pub struct CandidateInput {
    pub node: NodeRecord,
    pub rtt_ms: f64,
    pub availability: f64,
    pub reputation: ReputationRecord,
}

/// Computes all four utilities, applies the weights and ranks.
pub fn score(
    intent: &Intent,
    candidates: &[CandidateInput],
    now: u64,
    lambda: f64,
    adapter_available: &dyn Fn(&Capability) -> bool,
) -> Result<Vec<ScoredCandidate>, NegotiationError> {
    if candidates.is_empty() {
        return Err(NegotiationError::NoCandidates);
    }
    intent.weights.validate()?;
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        let cap = c
            .node
            .capability(&intent.capability_required)
            .ok_or_else(|| NegotiationError::CapabilityMismatch {
                required: intent.capability_required.clone(),
                offered: c
                    .node
                    .capabilities
                    .first()
                    .map(|c| c.id.clone())
                    .unwrap_or_default(),
            })?;
        let (u_func, adapter) = functional_utility(intent, cap, adapter_available(cap))?;
        let u_cost = proximity_utility(c.rtt_ms)?;
        let u_trust = trust_utility(&c.reputation, now, lambda)?;
        let u_avail = c.availability.clamp(0.0, 1.0);
        out.push(ScoredCandidate::new(
            c.node.clone(),
            [u_func, u_cost, u_trust, u_avail],
            adapter,
            &intent.weights,
        ));
    }
    rank(&mut out);
    Ok(out)
}

pub fn rank(candidates: &mut [ScoredCandidate]) {
    candidates.sort_by(rank_order);
}
