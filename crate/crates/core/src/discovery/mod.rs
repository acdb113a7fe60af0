//! Capability discovery: a Kademlia DHT for wide-area lookups and DNS-SD
//! style multicast on the local link, combined behind a TTL cache.

pub mod cache;
pub mod kad;
pub mod mdns;
pub mod ops;

use thiserror::Error;

pub use cache::{DiscoveryCache, DEFAULT_CACHE_TTL_US};
pub use kad::{
    bucket_index, xor_distance, Distance, InsertOutcome, KadError, Lookup, LookupMode,
    RoutingTable, DEFAULT_ALPHA, DEFAULT_K,
};
pub use mdns::{ServiceInstance, SERVICE_TYPE};
pub use ops::{
    dht_publish, discover, iterative_lookup, join, mdns_announce, mdns_browse, ping, probe, DiscoveryReport,
    LookupOutcome, Probe,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiscoveryError {
    #[error("no provider found for {0}")]
    NotFound(String),
    #[error("routing table is empty")]
    NoPeers,
    #[error("discovery timed out")]
    Timeout,
    #[error(transparent)]
    Kad(#[from] KadError),
}
