//! Single-threaded discrete-event fabric. Every node hangs off a star of
//! directed links; each link serializes one packet per tick and adds a fixed
//! latency plus seeded jitter. Loss, duplication and jitter are drawn from one
//! generator at send time, so a seed fixes the whole event trace.

use super::{Addr, Emit, Node, NodeError, TrafficCounters};
use crate::transport::Tick;
use crate::wire::{Packet, WireError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::fmt::Write as _;
use thiserror::Error;

const TRACE_TAIL: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct FabricConfig {
    pub seed: u64,
    pub latency: Tick,
    pub jitter: Tick,
    pub loss_prob: f64,
    pub dup_prob: f64,
    /// Keep every trace line, not just the recent tail.
    pub trace: bool,
    /// Ticks without node progress before the run is declared stalled.
    pub stall_limit: Tick,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig { seed: 0, latency: 10, jitter: 0, loss_prob: 0.0, dup_prob: 0.0, trace: false, stall_limit: 2_000_000 }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{addr} at tick {tick}: {source}\nrecent events:\n{trace}")]
    Node { addr: Addr, tick: Tick, source: NodeError, trace: String },
    #[error("no progress for {idle} ticks at tick {tick}\nrecent events:\n{trace}")]
    Stalled { tick: Tick, idle: Tick, trace: String },
    #[error("event queue drained with work pending at tick {tick}\nrecent events:\n{trace}")]
    Deadlock { tick: Tick, trace: String },
    #[error("undecodable packet on {src}->{dst}: {source}")]
    Wire { src: Addr, dst: Addr, source: WireError },
    #[error("no node at {0}")]
    NoNode(Addr),
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Deliver { src: Addr, dst: Addr, bytes: Vec<u8> },
    Wake { node: usize },
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    tick: Tick,
    order: u64,
    kind: EventKind,
}

#[derive(Debug, Default, Clone)]
struct Link {
    busy_until: Tick,
    loss_override: Option<f64>,
}

struct Slot {
    addr: Addr,
    node: Box<dyn Node>,
    wake_at: Tick,
}

pub struct Sim {
    cfg: FabricConfig,
    now: Tick,
    order: u64,
    queue: BinaryHeap<Reverse<Event>>,
    nodes: Vec<Slot>,
    index: HashMap<Addr, usize>,
    links: HashMap<(Addr, Addr), Link>,
    rng: ChaCha8Rng,
    counters: BTreeMap<Addr, TrafficCounters>,
    trace: Vec<String>,
    tail: VecDeque<String>,
    last_progress: (u64, Tick),
    delivered: u64,
    sent: u64,
}

impl Sim {
    pub fn new(cfg: FabricConfig) -> Self {
        Sim {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            now: 0,
            order: 0,
            queue: BinaryHeap::new(),
            nodes: Vec::new(),
            index: HashMap::new(),
            links: HashMap::new(),
            counters: BTreeMap::new(),
            trace: Vec::new(),
            tail: VecDeque::new(),
            last_progress: (0, 0),
            delivered: 0,
            sent: 0,
        }
    }

    pub fn add_node(&mut self, addr: Addr, node: Box<dyn Node>) {
        let idx = self.nodes.len();
        self.nodes.push(Slot { addr, node, wake_at: Tick::MAX });
        self.index.insert(addr, idx);
        self.counters.entry(addr).or_default();
        self.schedule_wake(idx, false);
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn config(&self) -> &FabricConfig {
        &self.cfg
    }

    /// Overrides the loss probability of one directed link.
    pub fn set_link_loss(&mut self, src: Addr, dst: Addr, prob: Option<f64>) {
        self.links.entry((src, dst)).or_default().loss_override = prob;
    }

    pub fn node<T: Node>(&self, addr: Addr) -> Option<&T> {
        let idx = *self.index.get(&addr)?;
        self.nodes[idx].node.as_any().downcast_ref()
    }

    pub fn node_mut<T: Node>(&mut self, addr: Addr) -> Option<&mut T> {
        let idx = *self.index.get(&addr)?;
        self.nodes[idx].node.as_any_mut().downcast_mut()
    }

    pub fn counters(&self, addr: Addr) -> TrafficCounters {
        self.counters.get(&addr).cloned().unwrap_or_default()
    }

    pub fn all_counters(&self) -> &BTreeMap<Addr, TrafficCounters> {
        &self.counters
    }

    /// Every event line when tracing is enabled.
    pub fn trace(&self) -> &[String] {
        &self.trace
    }

    pub fn trace_tail(&self) -> String {
        self.tail.iter().fold(String::new(), |mut s, l| {
            let _ = writeln!(s, "{l}");
            s
        })
    }

    pub fn packets_sent(&self) -> u64 {
        self.sent
    }

    pub fn packets_delivered(&self) -> u64 {
        self.delivered
    }

    pub fn all_done(&self) -> bool {
        self.nodes.iter().all(|s| s.node.is_done())
    }

    /// Runs until every node reports done.
    pub fn run(&mut self) -> Result<(), SimError> {
        self.run_until(|sim| sim.all_done())
    }

    /// Runs until `stop` holds, checking it after every event.
    pub fn run_until(&mut self, mut stop: impl FnMut(&Sim) -> bool) -> Result<(), SimError> {
        while !stop(self) {
            if !self.step()? {
                return Err(SimError::Deadlock { tick: self.now, trace: self.trace_tail() });
            }
        }
        Ok(())
    }

    /// Processes the next event; `false` once the queue is empty.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some(Reverse(ev)) = self.queue.pop() else { return Ok(false) };
        debug_assert!(ev.tick >= self.now, "clock went backwards");
        self.now = ev.tick;
        let mut out = Vec::new();
        let mut woken = false;
        let idx = match ev.kind {
            EventKind::Deliver { src, dst, bytes } => {
                let pkt = Packet::decode(&bytes).map_err(|source| SimError::Wire { src, dst, source })?;
                self.delivered += 1;
                self.counters.entry(dst).or_default().record_rx(&pkt, bytes.len() as u64);
                self.log(pkt_line(self.now, "", src, dst, &pkt));
                let idx = *self.index.get(&dst).ok_or(SimError::NoNode(dst))?;
                let now = self.now;
                self.nodes[idx]
                    .node
                    .on_packet(now, pkt, &mut out)
                    .map_err(|e| self.node_error(idx, e))?;
                idx
            }
            EventKind::Wake { node } => {
                if self.nodes[node].wake_at != ev.tick {
                    return Ok(true);
                }
                self.nodes[node].wake_at = Tick::MAX;
                woken = true;
                let now = self.now;
                self.nodes[node].node.on_wake(now, &mut out).map_err(|e| self.node_error(node, e))?;
                node
            }
        };
        let src = self.nodes[idx].addr;
        for e in out {
            self.send(src, e)?;
        }
        self.schedule_wake(idx, woken);
        self.check_progress()?;
        Ok(true)
    }

    fn node_error(&self, idx: usize, source: NodeError) -> SimError {
        SimError::Node { addr: self.nodes[idx].addr, tick: self.now, source, trace: self.trace_tail() }
    }

    fn check_progress(&mut self) -> Result<(), SimError> {
        let p: u64 = self.nodes.iter().map(|s| s.node.progress()).sum();
        if p != self.last_progress.0 {
            self.last_progress = (p, self.now);
        } else if self.now - self.last_progress.1 > self.cfg.stall_limit && !self.all_done() {
            return Err(SimError::Stalled { tick: self.now, idle: self.now - self.last_progress.1, trace: self.trace_tail() });
        }
        Ok(())
    }

    /// A node asking for a wake at or before the tick it was just woken at
    /// is deferred by one tick so that it cannot spin in place.
    fn schedule_wake(&mut self, idx: usize, just_woken: bool) {
        let want = self.nodes[idx].node.next_wake();
        if want == Tick::MAX {
            return;
        }
        let at = want.max(self.now + just_woken as Tick);
        let slot = &mut self.nodes[idx];
        if at < slot.wake_at || slot.wake_at < self.now {
            slot.wake_at = at;
            self.push(at, EventKind::Wake { node: idx });
        }
    }

    fn push(&mut self, tick: Tick, kind: EventKind) {
        self.order += 1;
        self.queue.push(Reverse(Event { tick, order: self.order, kind }));
    }

    fn send(&mut self, src: Addr, e: Emit) -> Result<(), SimError> {
        let dst = e.to;
        let bytes = e.packet.encode().map_err(|source| SimError::Wire { src, dst, source })?;
        self.sent += 1;
        self.counters.entry(src).or_default().record_tx(&e.packet, bytes.len() as u64, e.retransmission);
        let link = self.links.entry((src, dst)).or_default();
        let loss = link.loss_override.unwrap_or(self.cfg.loss_prob);
        // Fixed draw order per packet: loss, duplicate, then one jitter per copy.
        let lost = self.rng.gen::<f64>() < loss;
        let dup = self.rng.gen::<f64>() < self.cfg.dup_prob;
        let copies = if dup { 2 } else { 1 };
        for copy in 0..copies {
            let link = self.links.get_mut(&(src, dst)).unwrap();
            let depart = link.busy_until.max(self.now);
            link.busy_until = depart + 1;
            let jitter = if self.cfg.jitter > 0 { self.rng.gen_range(0..=self.cfg.jitter) } else { 0 };
            if lost {
                if copy == 0 {
                    self.counters.entry(src).or_default().packets_lost_injected += 1;
                    self.log(pkt_line(self.now, "lost:", src, dst, &e.packet));
                }
                continue;
            }
            if copy == 1 {
                self.counters.entry(src).or_default().packets_dup_injected += 1;
            }
            let arrive = depart + 1 + self.cfg.latency + jitter;
            self.push(arrive, EventKind::Deliver { src, dst, bytes: bytes.clone() });
        }
        Ok(())
    }

    fn log(&mut self, line: String) {
        if self.tail.len() == TRACE_TAIL {
            self.tail.pop_front();
        }
        if self.cfg.trace {
            self.trace.push(line.clone());
        }
        self.tail.push_back(line);
    }
}

/// `tick kind src dst seq len`; heartbeats carry `ack/credit` in the seq
/// column and zero length.
fn pkt_line(tick: Tick, prefix: &str, src: Addr, dst: Addr, pkt: &Packet) -> String {
    match pkt.heartbeat_payload() {
        Some(hb) => format!("{tick} {prefix}{} {src} {dst} {}/{} 0", pkt.kind.name(), hb.ack, hb.credit),
        None => format!("{tick} {prefix}{} {src} {dst} {} {}", pkt.kind.name(), pkt.seq_num, pkt.elems()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::SwitchNode;
    use crate::switch::{Switch, SwitchConfig};
    use crate::wire::PacketKind;
    use std::any::Any;

    /// Sends `count` gradient packets at start, one per wake.
    struct Blaster {
        id: u8,
        count: u32,
        next: u32,
        received: Vec<Packet>,
    }

    impl Node for Blaster {
        fn on_packet(&mut self, _now: Tick, pkt: Packet, _out: &mut Vec<Emit>) -> Result<(), NodeError> {
            self.received.push(pkt);
            Ok(())
        }
        fn on_wake(&mut self, _now: Tick, out: &mut Vec<Emit>) -> Result<(), NodeError> {
            if self.next < self.count {
                out.push(Emit::new(Addr::Switch, Packet::data(PacketKind::GradData, self.id, self.next, vec![1; 4])));
                self.next += 1;
            }
            Ok(())
        }
        fn next_wake(&self) -> Tick {
            if self.next < self.count { 0 } else { Tick::MAX }
        }
        fn is_done(&self) -> bool {
            self.next == self.count
        }
        fn progress(&self) -> u64 {
            (self.next + self.received.len() as u32) as u64
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
        fn as_any_mut(&mut self) -> &mut dyn Any {
            self
        }
    }

    fn blaster(id: u8, count: u32) -> Box<Blaster> {
        Box::new(Blaster { id, count, next: 0, received: Vec::new() })
    }

    fn build(cfg: FabricConfig, count: u32) -> Sim {
        let mut sim = Sim::new(cfg);
        sim.add_node(Addr::Switch, Box::new(SwitchNode::new(Switch::new(SwitchConfig::new(1, 256, 0).unwrap()))));
        sim.add_node(Addr::Worker(0), blaster(0, count));
        sim.add_node(Addr::Optimizer, blaster(0xFF, 0));
        sim
    }

    #[test]
    fn lossless_conserves_packets() {
        let mut sim = build(FabricConfig { jitter: 5, ..Default::default() }, 200);
        sim.run_until(|s| s.queue.is_empty()).unwrap();
        assert_eq!(sim.packets_sent(), sim.packets_delivered());
        let opt: &Blaster = sim.node(Addr::Optimizer).unwrap();
        assert_eq!(opt.received.len(), 200);
        let w = sim.counters(Addr::Worker(0));
        let s = sim.counters(Addr::Switch);
        assert_eq!(w.data_bytes_tx, s.data_bytes_rx);
        assert_eq!(s.data_bytes_tx, sim.counters(Addr::Optimizer).data_bytes_rx);
    }

    #[test]
    fn links_serialize_one_packet_per_tick() {
        let mut sim = build(FabricConfig { trace: true, ..Default::default() }, 5);
        sim.run_until(|s| s.queue.is_empty()).unwrap();
        let ticks: Vec<Tick> = sim
            .trace()
            .iter()
            .filter(|l| l.contains("worker0 switch"))
            .map(|l| l.split(' ').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(ticks, vec![11, 12, 13, 14, 15]);
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = FabricConfig { seed: 9, jitter: 7, loss_prob: 0.2, dup_prob: 0.2, trace: true, ..Default::default() };
        let run = || {
            let mut sim = build(cfg.clone(), 300);
            sim.run_until(|s| s.queue.is_empty()).unwrap();
            sim.trace().to_vec()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().any(|l| l.contains("lost:")));
    }

    #[test]
    fn jitter_reorders() {
        let mut sim = build(FabricConfig { seed: 1, jitter: 20, ..Default::default() }, 100);
        sim.run_until(|s| s.queue.is_empty()).unwrap();
        let opt: &Blaster = sim.node(Addr::Optimizer).unwrap();
        let seqs: Vec<u32> = opt.received.iter().map(|p| p.seq_num).collect();
        assert!(seqs.windows(2).any(|w| w[0] > w[1]));
    }

    #[test]
    fn link_override_drops_everything() {
        let mut sim = build(FabricConfig::default(), 50);
        sim.set_link_loss(Addr::Worker(0), Addr::Switch, Some(1.0));
        sim.run_until(|s| s.queue.is_empty()).unwrap();
        assert_eq!(sim.counters(Addr::Worker(0)).packets_lost_injected, 50);
        assert_eq!(sim.counters(Addr::Switch).packets_rx, 0);
    }

    #[test]
    fn stall_is_reported_with_trace() {
        struct Spinner;
        impl Node for Spinner {
            fn on_packet(&mut self, _: Tick, _: Packet, _: &mut Vec<Emit>) -> Result<(), NodeError> {
                Ok(())
            }
            fn on_wake(&mut self, now: Tick, out: &mut Vec<Emit>) -> Result<(), NodeError> {
                out.push(Emit::new(Addr::Optimizer, Packet::heartbeat(PacketKind::GradHeartbeat, 0xFF, now as u32, 0)));
                Ok(())
            }
            fn next_wake(&self) -> Tick {
                0
            }
            fn is_done(&self) -> bool {
                false
            }
            fn progress(&self) -> u64 {
                0
            }
            fn as_any(&self) -> &dyn Any {
                self
            }
            fn as_any_mut(&mut self) -> &mut dyn Any {
                self
            }
        }
        let mut sim = Sim::new(FabricConfig { stall_limit: 100, ..Default::default() });
        // Wakes every tick and talks to itself, never making progress.
        sim.add_node(Addr::Optimizer, Box::new(Spinner));
        let err = sim.run().unwrap_err();
        assert!(matches!(err, SimError::Stalled { .. }), "{err}");
        assert!(err.to_string().contains("grad_hb optimizer optimizer"), "{err}");
    }
}
