//! Deterministic discrete-event datagram network with a virtual clock.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::wire::PacketType;

/// Virtual clock origin (µs since the Unix epoch).
pub const SIM_EPOCH_US: u64 = 1_760_000_000_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("unknown multicast group {0}")]
    UnknownGroup(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub latency_us: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    /// Latency between nodes on the same segment.
    pub intra_segment_us: u64,
    /// Latency between segments.
    pub inter_segment_us: u64,
    pub default_loss: f64,
    pub log: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            intra_segment_us: 500,
            inter_segment_us: 20_000,
            default_loss: 0.0,
            log: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimEvent {
    Deliver { from: String, to: String, bytes: Vec<u8> },
    Wake { node: String },
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Queued {
    at: u64,
    seq: u64,
    slot: usize,
}

pub fn multicast_group(segment: &str) -> String {
    format!("mdns:{segment}")
}

fn type_name(bytes: &[u8]) -> &'static str {
    bytes
        .get(3)
        .and_then(|b| PacketType::try_from(*b).ok())
        .map(PacketType::name)
        .unwrap_or("UNKNOWN")
}

pub struct SimNetwork {
    pub config: SimConfig,
    clock: u64,
    seq: u64,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Queued>>,
    slots: Vec<Option<SimEvent>>,
    free: Vec<usize>,
    segments: BTreeMap<String, String>,
    links: BTreeMap<(String, String), LinkParams>,
    egress_delay: BTreeMap<String, u64>,
    groups: BTreeMap<String, BTreeSet<String>>,
    log: Vec<String>,
    pub delivered: u64,
    pub dropped: u64,
}

impl SimNetwork {
    pub fn new(config: SimConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            clock: SIM_EPOCH_US,
            seq: 0,
            queue: BinaryHeap::new(),
            slots: Vec::new(),
            free: Vec::new(),
            segments: BTreeMap::new(),
            links: BTreeMap::new(),
            egress_delay: BTreeMap::new(),
            groups: BTreeMap::new(),
            log: Vec::new(),
            delivered: 0,
            dropped: 0,
        }
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn add_node(&mut self, name: &str, segment: &str) {
        self.segments.insert(name.to_owned(), segment.to_owned());
        self.join(name, &multicast_group(segment));
    }

    pub fn has_node(&self, name: &str) -> bool {
        self.segments.contains_key(name)
    }

    pub fn join(&mut self, name: &str, group: &str) {
        self.groups
            .entry(group.to_owned())
            .or_default()
            .insert(name.to_owned());
    }

    pub fn leave(&mut self, name: &str, group: &str) {
        if let Some(g) = self.groups.get_mut(group) {
            g.remove(name);
        }
    }

    /// Overrides both directions of a link.
    pub fn set_link(&mut self, a: &str, b: &str, params: LinkParams) {
        self.links.insert((a.to_owned(), b.to_owned()), params);
        self.links.insert((b.to_owned(), a.to_owned()), params);
    }

    /// Extra delay added to everything `node` sends.
    pub fn set_egress_delay(&mut self, node: &str, delay_us: u64) {
        self.egress_delay.insert(node.to_owned(), delay_us);
    }

    pub fn link(&self, from: &str, to: &str) -> LinkParams {
        let mut p = self
            .links
            .get(&(from.to_owned(), to.to_owned()))
            .copied()
            .unwrap_or_else(|| {
                let same = self.segments.get(from) == self.segments.get(to);
                LinkParams {
                    latency_us: if same {
                        self.config.intra_segment_us
                    } else {
                        self.config.inter_segment_us
                    },
                    loss: self.config.default_loss,
                }
            });
        p.latency_us += self.egress_delay.get(from).copied().unwrap_or(0);
        p
    }

    fn push(&mut self, at: u64, event: SimEvent) {
        let slot = match self.free.pop() {
            Some(s) => {
                self.slots[s] = Some(event);
                s
            }
            None => {
                self.slots.push(Some(event));
                self.slots.len() - 1
            }
        };
        self.seq += 1;
        self.queue.push(Reverse(Queued {
            at,
            seq: self.seq,
            slot,
        }));
    }

    fn lost(&mut self, loss: f64) -> bool {
        // Always draw so the random stream does not depend on loss settings.
        let draw: f64 = self.rng.gen();
        draw < loss
    }

    pub fn sim_send(&mut self, from: &str, to: &str, bytes: Vec<u8>) -> Result<(), SimError> {
        for n in [from, to] {
            if !self.has_node(n) {
                return Err(SimError::UnknownNode(n.to_owned()));
            }
        }
        let link = self.link(from, to);
        if self.lost(link.loss) {
            self.dropped += 1;
            if self.config.log {
                self.log.push(format!(
                    "{} {from} {to} {} {} lost",
                    self.clock,
                    type_name(&bytes),
                    bytes.len()
                ));
            }
            return Ok(());
        }
        let at = self.clock + link.latency_us;
        self.push(
            at,
            SimEvent::Deliver {
                from: from.to_owned(),
                to: to.to_owned(),
                bytes,
            },
        );
        Ok(())
    }

    /// Fans out to every other member with independent loss draws.
    pub fn sim_multicast(&mut self, from: &str, group: &str, bytes: Vec<u8>) -> Result<(), SimError> {
        if !self.has_node(from) {
            return Err(SimError::UnknownNode(from.to_owned()));
        }
        let members: Vec<String> = self
            .groups
            .get(group)
            .ok_or_else(|| SimError::UnknownGroup(group.to_owned()))?
            .iter()
            .filter(|m| *m != from)
            .cloned()
            .collect();
        for m in members {
            self.sim_send(from, &m, bytes.clone())?;
        }
        Ok(())
    }

    pub fn schedule_wake(&mut self, node: &str, at: u64) {
        self.push(at.max(self.clock), SimEvent::Wake { node: node.to_owned() });
    }

    pub fn next_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(q)| q.at)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Pops the earliest event and moves the clock to it.
    pub fn pop(&mut self) -> Option<(u64, SimEvent)> {
        let Reverse(q) = self.queue.pop()?;
        self.clock = self.clock.max(q.at);
        let ev = self.slots[q.slot].take().expect("queued slot is occupied");
        self.free.push(q.slot);
        if let SimEvent::Deliver { from, to, bytes } = &ev {
            self.delivered += 1;
            if self.config.log {
                self.log.push(format!(
                    "{} {from} {to} {} {}",
                    q.at,
                    type_name(bytes),
                    bytes.len()
                ));
            }
        }
        Some((q.at, ev))
    }

    /// Advances to the next event time and returns every event due then.
    pub fn sim_step(&mut self) -> Vec<(u64, SimEvent)> {
        let Some(t) = self.next_time() else {
            return Vec::new();
        };
        let mut out = Vec::new();
        while self.next_time() == Some(t) {
            out.push(self.pop().unwrap());
        }
        out
    }

    pub fn advance_to(&mut self, t: u64) {
        self.clock = self.clock.max(t);
    }

    pub fn event_log(&self) -> &[String] {
        &self.log
    }

    pub fn event_log_text(&self) -> String {
        let mut s = self.log.join("\n");
        s.push('\n');
        s
    }

    pub fn note(&mut self, line: impl Into<String>) {
        if self.config.log {
            let line = line.into();
            self.log.push(format!("{} # {line}", self.clock));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(seed: u64) -> SimNetwork {
        let mut n = SimNetwork::new(SimConfig {
            seed,
            ..SimConfig::default()
        });
        n.add_node("a", "lan");
        n.add_node("b", "lan");
        n.add_node("c", "wan");
        n
    }

    #[test]
    fn latency_is_exact() {
        let mut n = net(1);
        n.set_link("a", "b", LinkParams { latency_us: 5000, loss: 0.0 });
        let t0 = n.now();
        n.sim_send("a", "b", vec![0x54, 0x49, 1, 2]).unwrap();
        let ev = n.sim_step();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].0, t0 + 5000);
        assert_eq!(n.now(), t0 + 5000);
    }

    #[test]
    fn total_loss_never_delivers() {
        let mut n = net(1);
        n.set_link("a", "b", LinkParams { latency_us: 10, loss: 1.0 });
        for _ in 0..100 {
            n.sim_send("a", "b", vec![1]).unwrap();
        }
        assert!(n.sim_step().is_empty());
        assert_eq!(n.dropped, 100);
    }

    #[test]
    fn multicast_stays_on_segment() {
        let mut n = net(1);
        n.sim_multicast("a", &multicast_group("lan"), vec![1]).unwrap();
        let ev = n.sim_step();
        assert_eq!(ev.len(), 1);
        assert!(matches!(&ev[0].1, SimEvent::Deliver { to, .. } if to == "b"));
        assert_eq!(n.sim_send("a", "zz", vec![]), Err(SimError::UnknownNode("zz".into())));
    }

    #[test]
    fn same_seed_same_log() {
        let run = |seed| {
            let mut n = net(seed);
            n.config.default_loss = 0.3;
            for i in 0..50u8 {
                n.sim_send("a", if i % 2 == 0 { "b" } else { "c" }, vec![0x54, 0x49, 1, 7, i]).unwrap();
            }
            while !n.sim_step().is_empty() {}
            n.event_log_text()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
