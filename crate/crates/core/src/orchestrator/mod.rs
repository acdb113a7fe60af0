//! Intent lifecycle: discovery, scoring, contract negotiation, data
//! exchange and healing.

pub mod contract;
mod session;

use thiserror::Error;

pub use contract::{Contract, ContractBody};
pub use session::{
    close, establish, heal, monitor_qos, negotiate, poll_stream, provider_serve, request_data, request_with_healing,
    submit_intent, subscribe, IntentSession, SessionState, LATENCY_WINDOW, VIOLATION_LIMIT,
};

use crate::adapter::AdapterError;
use crate::crypto::CryptoError;
use crate::negotiation::NegotiationError;
use crate::node::NodeError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error("no providers for {0}")]
    NoProviders(String),
    #[error("every candidate was rejected")]
    AllCandidatesRejected,
    #[error("no proposal or countersignature before the timeout")]
    ProposalTimeout,
    #[error("contract rejected: {0}")]
    ContractRejected(String),
    #[error("bad signature from provider")]
    BadSignature,
    #[error("contract expired")]
    ContractExpired,
    #[error("no data response before the timeout")]
    Timeout,
    #[error("translation failed: {0}")]
    Translation(AdapterError),
    #[error("response failed authentication")]
    AuthFailure,
    #[error("provider reported: {0}")]
    ProviderError(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("session is {0:?}")]
    NotActive(SessionState),
    #[error("no alternate provider")]
    NoAlternateProvider,
    #[error(transparent)]
    Negotiation(#[from] NegotiationError),
    #[error(transparent)]
    Node(#[from] NodeError),
}

impl From<CryptoError> for OrchestratorError {
    fn from(e: CryptoError) -> Self {
        match e {
            CryptoError::AuthFailure => Self::AuthFailure,
            CryptoError::BadSignature => Self::BadSignature,
            other => Self::ContractRejected(other.to_string()),
        }
    }
}
