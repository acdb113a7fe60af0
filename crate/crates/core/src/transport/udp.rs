//! Real UDP sockets carrying CoAP-wrapped TIP frames, and a [`Driver`]
//! that runs a [`Node`] on the wall clock.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::coap::{coap_unwrap, coap_wrap};
use crate::node::{Driver, Node, Outgoing};

pub const UDP_SCHEME: &str = "udp://";
/// Largest UDP payload over IPv4.
pub const MAX_DATAGRAM: usize = 65_507;
pub const MDNS_GROUP_V4: &str = "224.0.0.251:5353";

#[derive(Debug, Error)]
pub enum UdpError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error("datagram of {0} bytes exceeds the UDP limit")]
    Oversized(usize),
    #[error("bad address {0}")]
    BadAddress(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn udp_address(addr: SocketAddr) -> String {
    format!("{UDP_SCHEME}{addr}")
}

pub fn parse_udp_address(address: &str) -> Result<SocketAddr, UdpError> {
    let s = address.strip_prefix(UDP_SCHEME).unwrap_or(address);
    s.to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| UdpError::BadAddress(address.to_owned()))
}

/// Microseconds since the Unix epoch.
pub fn wall_clock_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UdpCounters {
    pub sent: u64,
    pub received: u64,
    /// Datagrams that were not CoAP POST /tip with Content-Format 42.
    pub non_coap: u64,
    pub oversized: u64,
}

pub struct UdpEndpoint {
    socket: UdpSocket,
    rng: ChaCha8Rng,
    buf: Vec<u8>,
    pub counters: UdpCounters,
}

impl UdpEndpoint {
    pub fn bind(addr: &str) -> Result<Self, UdpError> {
        let socket = UdpSocket::bind(addr).map_err(|source| UdpError::BindFailure {
            addr: addr.to_owned(),
            source,
        })?;
        let seed = wall_clock_us() ^ u64::from(socket.local_addr()?.port());
        Ok(Self {
            socket,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buf: vec![0; MAX_DATAGRAM + 1],
            counters: UdpCounters::default(),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.socket.local_addr().expect("bound socket has an address")
    }

    /// Wraps `tip` in CoAP and sends it.
    pub fn send_frame(&mut self, to: SocketAddr, tip: &[u8]) -> Result<(), UdpError> {
        let datagram = coap_wrap(tip, &mut self.rng);
        if datagram.len() > MAX_DATAGRAM {
            self.counters.oversized += 1;
            return Err(UdpError::Oversized(datagram.len()));
        }
        self.socket.send_to(&datagram, to)?;
        self.counters.sent += 1;
        Ok(())
    }

    /// Waits up to `timeout` for one TIP frame. Datagrams that are not
    /// TIP-over-CoAP are counted and skipped.
    pub fn recv_frame(&mut self, timeout: Duration) -> Result<Option<(SocketAddr, Vec<u8>)>, UdpError> {
        let end = Instant::now() + timeout;
        loop {
            let left = end.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            self.socket.set_read_timeout(Some(left))?;
            match self.socket.recv_from(&mut self.buf) {
                Ok((n, from)) => match coap_unwrap(&self.buf[..n]) {
                    Ok(frame) => {
                        self.counters.received += 1;
                        return Ok(Some((from, frame)));
                    }
                    Err(e) => {
                        self.counters.non_coap += 1;
                        tracing::debug!(%from, error = %e, "dropped non-TIP datagram");
                    }
                },
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Ok(None)
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// Runs one node over UDP. Multicast is delivered by unicast to each
/// configured link peer.
pub struct UdpDriver {
    node: Node,
    pub endpoint: UdpEndpoint,
    pub link_peers: Vec<SocketAddr>,
}

impl UdpDriver {
    /// The node's address must be the `udp://` form of the endpoint's.
    pub fn new(node: Node, endpoint: UdpEndpoint) -> Self {
        Self {
            node,
            endpoint,
            link_peers: Vec::new(),
        }
    }

    pub fn into_node(self) -> Node {
        self.node
    }

    fn flush(&mut self) {
        for o in self.node.take_outbox() {
            match o {
                Outgoing::Unicast { to, bytes } => match parse_udp_address(&to) {
                    Ok(addr) => {
                        if let Err(e) = self.endpoint.send_frame(addr, &bytes) {
                            tracing::warn!(to = %to, error = %e, "send failed");
                        }
                    }
                    Err(e) => tracing::warn!(error = %e, "unroutable"),
                },
                Outgoing::Multicast { bytes, .. } => {
                    let own = self.endpoint.local_addr();
                    for peer in self.link_peers.clone() {
                        if peer == own {
                            continue;
                        }
                        if let Err(e) = self.endpoint.send_frame(peer, &bytes) {
                            tracing::warn!(to = %peer, error = %e, "multicast send failed");
                        }
                    }
                }
            }
        }
    }

    /// Serves until `stop` returns true, checking it at least every 50 ms.
    pub fn serve(&mut self, stop: &mut dyn FnMut() -> bool) {
        while !stop() {
            let deadline = self.now() + 50_000;
            self.run_until(deadline, &mut |_| false);
        }
    }
}

impl Driver for UdpDriver {
    fn now(&self) -> u64 {
        wall_clock_us()
    }

    fn node(&mut self) -> &mut Node {
        &mut self.node
    }

    fn node_ref(&self) -> &Node {
        &self.node
    }

    fn note(&mut self, line: &str) {
        tracing::info!(node = %self.node.address(), "{line}");
    }

    fn run_until(&mut self, deadline: u64, done: &mut dyn FnMut(&Node) -> bool) -> bool {
        loop {
            let now = self.now();
            if self.node.next_timer().is_some_and(|t| t <= now) {
                self.node.on_timers(now);
            }
            self.flush();
            if done(&self.node) {
                return true;
            }
            if now >= deadline {
                return false;
            }
            let wake = self.node.next_timer().map_or(deadline, |t| t.min(deadline));
            let wait = Duration::from_micros(wake.saturating_sub(now).max(1));
            match self.endpoint.recv_frame(wait) {
                Ok(Some((from, frame))) => {
                    let at = self.now();
                    self.node.receive(at, &udp_address(from), &frame);
                }
                Ok(None) => {}
                Err(e) => {
                    tracing::warn!(error = %e, "receive failed");
                    std::thread::sleep(wait.min(Duration::from_millis(5)));
                }
            }
        }
    }
}
