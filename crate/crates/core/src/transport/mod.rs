//! Datagram transports: CoAP framing, the simulated network and UDP.

pub mod coap;
pub mod sim;
pub mod udp;
