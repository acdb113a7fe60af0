pub mod cbor;
pub mod crypto;
pub mod discovery;
pub mod model;
pub mod wire;
pub mod negotiation;
pub mod adapter;
pub mod transport;
pub mod orchestrator;
pub mod node;
pub mod world;
pub mod fieldbus;
pub mod scenario;
pub mod vectors;
