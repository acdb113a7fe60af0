//! A set of nodes on one [`SimNetwork`], stepped by a single scheduler.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::crypto::NodeIdentity;
use crate::node::{Driver, Node, NodeConfig, Outgoing};
use crate::transport::sim::{SimConfig, SimEvent, SimNetwork};

pub const SIM_SCHEME: &str = "sim://";

pub fn sim_address(name: &str) -> String {
    format!("{SIM_SCHEME}{name}")
}

pub fn sim_name(address: &str) -> &str {
    address.strip_prefix(SIM_SCHEME).unwrap_or(address)
}

pub struct World {
    pub net: SimNetwork,
    nodes: BTreeMap<String, Node>,
    wakes: BTreeMap<String, BTreeSet<u64>>,
    pub default_config: NodeConfig,
    /// Datagrams addressed to names the network does not know.
    pub undeliverable: u64,
}

fn derive_seed(seed: u64, label: &str, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"tip-sim");
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    h.update([0]);
    h.update(name.as_bytes());
    h.finalize().into()
}

impl World {
    pub fn new(config: SimConfig) -> Self {
        Self {
            net: SimNetwork::new(config),
            nodes: BTreeMap::new(),
            wakes: BTreeMap::new(),
            default_config: NodeConfig::default(),
            undeliverable: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.net.config.seed
    }

    pub fn now(&self) -> u64 {
        self.net.now()
    }

    /// Identity of a node named `name` in a world with this seed.
    pub fn identity_for(seed: u64, name: &str) -> NodeIdentity {
        NodeIdentity::from_seed(derive_seed(seed, "identity", name))
    }

    pub fn add_node(&mut self, name: &str, segment: &str) -> String {
        let cfg = self.default_config.clone();
        self.add_node_with(name, segment, cfg)
    }

    pub fn add_node_with(&mut self, name: &str, segment: &str, config: NodeConfig) -> String {
        let seed = self.seed();
        let rng_seed = u64::from_be_bytes(derive_seed(seed, "rng", name)[..8].try_into().unwrap());
        let address = sim_address(name);
        let node = Node::new(Self::identity_for(seed, name), address.clone(), segment, config, rng_seed);
        self.net.add_node(name, segment);
        self.nodes.insert(name.to_owned(), node);
        address
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, name: &str) -> &Node {
        self.nodes
            .get(name)
            .unwrap_or_else(|| panic!("no node named {name}"))
    }

    pub fn node_mut(&mut self, name: &str) -> &mut Node {
        self.nodes
            .get_mut(name)
            .unwrap_or_else(|| panic!("no node named {name}"))
    }

    pub fn get(&self, name: &str) -> Option<&Node> {
        self.nodes.get(name)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&str, &Node)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Fills every routing table from the global view, inserting peers in
    /// a seeded random order. Full buckets keep their first entries.
    pub fn bootstrap_full(&mut self) {
        let now = self.now();
        let records: Vec<_> = self.nodes.values().map(|n| n.record(now)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed() ^ 0xb007_57a9);
        for node in self.nodes.values_mut() {
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.shuffle(&mut rng);
            for i in order {
                let r = &records[i];
                if r.node_id == node.node_id() {
                    continue;
                }
                let mut contact = r.clone();
                contact.capabilities.clear();
                node.routing.insert(contact);
            }
        }
    }

    fn flush(&mut self, name: &str) {
        let Some(node) = self.nodes.get_mut(name) else { return };
        let out = node.take_outbox();
        let next = node.next_timer();
        for o in out {
            match o {
                Outgoing::Unicast { to, bytes } => {
                    let to = sim_name(&to).to_owned();
                    if self.net.sim_send(name, &to, bytes).is_err() {
                        self.undeliverable += 1;
                    }
                }
                Outgoing::Multicast { group, bytes } => {
                    if self.net.sim_multicast(name, &group, bytes).is_err() {
                        self.undeliverable += 1;
                    }
                }
            }
        }
        if let Some(t) = next {
            let pending = self.wakes.entry(name.to_owned()).or_default();
            if pending.first().is_none_or(|first| *first > t) {
                pending.insert(t);
                self.net.schedule_wake(name, t);
            }
        }
    }

    /// Processes all events due at the next event time. Returns false when
    /// the queue is empty.
    pub fn step(&mut self) -> bool {
        let events = self.net.sim_step();
        if events.is_empty() {
            return false;
        }
        for (at, ev) in events {
            let name = match ev {
                SimEvent::Deliver { from, to, bytes } => {
                    if let Some(node) = self.nodes.get_mut(&to) {
                        node.receive(at, &sim_address(&from), &bytes);
                    }
                    to
                }
                SimEvent::Wake { node: name } => {
                    if let Some(p) = self.wakes.get_mut(&name) {
                        p.remove(&at);
                    }
                    if let Some(node) = self.nodes.get_mut(&name) {
                        node.on_timers(at);
                    }
                    name
                }
            };
            self.flush(&name);
        }
        true
    }

    /// Steps until `done` holds or no event remains before `deadline`; the
    /// clock ends at `deadline` unless `done` fired first.
    pub fn run_until(&mut self, deadline: u64, done: &mut dyn FnMut(&World) -> bool) -> bool {
        let busy: Vec<String> = self
            .nodes
            .iter()
            .filter(|(_, n)| n.has_outgoing())
            .map(|(k, _)| k.clone())
            .collect();
        for n in &busy {
            self.flush(n);
        }
        loop {
            if done(self) {
                return true;
            }
            match self.net.next_time() {
                Some(t) if t <= deadline => {
                    self.step();
                }
                _ => {
                    self.net.advance_to(deadline);
                    return done(self);
                }
            }
        }
    }

    pub fn run_for(&mut self, duration_us: u64) {
        let deadline = self.now() + duration_us;
        self.run_until(deadline, &mut |_| false);
    }

    /// A driver acting on behalf of node `name`.
    pub fn client<'a>(&'a mut self, name: &str) -> ClientCtx<'a> {
        assert!(self.nodes.contains_key(name), "no node named {name}");
        ClientCtx {
            world: self,
            name: name.to_owned(),
        }
    }

    pub fn set_muted(&mut self, name: &str, muted: bool) {
        self.node_mut(name).faults.muted = muted;
        self.net.note(format!("{} muted={muted}", name));
    }

    /// Adds `latency_us` to everything `name` sends.
    pub fn set_latency(&mut self, name: &str, latency_us: u64) {
        self.net.set_egress_delay(name, latency_us);
        self.net.note(format!("{name} egress_delay_us={latency_us}"));
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.net.note(line);
    }

    pub fn event_log_text(&self) -> String {
        self.net.event_log_text()
    }
}

pub struct ClientCtx<'a> {
    pub world: &'a mut World,
    name: String,
}

impl ClientCtx<'_> {
    pub fn name(&self) -> &str {
        &self.name
    }
}

impl Driver for ClientCtx<'_> {
    fn now(&self) -> u64 {
        self.world.now()
    }

    fn node(&mut self) -> &mut Node {
        self.world.node_mut(&self.name)
    }

    fn node_ref(&self) -> &Node {
        self.world.node(&self.name)
    }

    fn note(&mut self, line: &str) {
        let line = format!("{} {line}", self.name);
        self.world.note(line);
    }

    fn run_until(&mut self, deadline: u64, done: &mut dyn FnMut(&Node) -> bool) -> bool {
        let name = self.name.clone();
        self.world.run_until(deadline, &mut |w| done(w.node(&name)))
    }
}
