//! Network substrate: node abstraction, traffic accounting, the discrete-event
//! simulator and the UDP runtime.

pub mod sim;
pub mod udp;

use crate::access::AccessError;
use crate::optimizer::store::StoreError;
use crate::switch::{Port, Switch, SwitchError};
use crate::transport::Tick;
use crate::wire::{Packet, WireError};
use std::any::Any;
use std::fmt;
use thiserror::Error;

pub use sim::{FabricConfig, Sim, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Addr {
    Worker(u8),
    Switch,
    Optimizer,
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Addr::Worker(i) => write!(f, "worker{i}"),
            Addr::Switch => write!(f, "switch"),
            Addr::Optimizer => write!(f, "optimizer"),
        }
    }
}

impl std::str::FromStr for Addr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "switch" => Ok(Addr::Switch),
            "optimizer" => Ok(Addr::Optimizer),
            _ => s
                .strip_prefix("worker")
                .and_then(|i| i.parse().ok())
                .map(Addr::Worker)
                .ok_or_else(|| format!("unknown role `{s}`")),
        }
    }
}

impl From<Port> for Addr {
    fn from(p: Port) -> Self {
        match p {
            Port::Worker(i) => Addr::Worker(i),
            Port::Optimizer => Addr::Optimizer,
        }
    }
}

/// A packet a node wants sent.
#[derive(Debug, Clone, PartialEq)]
pub struct Emit {
    pub to: Addr,
    pub packet: Packet,
    pub retransmission: bool,
}

impl Emit {
    pub fn new(to: Addr, packet: Packet) -> Self {
        Emit { to, packet, retransmission: false }
    }
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Switch(#[from] SwitchError),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("protocol: {0}")]
    Protocol(String),
}

/// An event-driven participant. Both runtimes call `on_packet` for each
/// arrival and `on_wake` once `next_wake` has passed.
pub trait Node: Any {
    fn on_packet(&mut self, now: Tick, pkt: Packet, out: &mut Vec<Emit>) -> Result<(), NodeError>;
    fn on_wake(&mut self, now: Tick, out: &mut Vec<Emit>) -> Result<(), NodeError>;
    /// `Tick::MAX` when only a packet can create new work.
    fn next_wake(&self) -> Tick;
    fn is_done(&self) -> bool;
    /// Monotone counter of application-level progress, used for stall detection.
    fn progress(&self) -> u64;
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// Adapts [`Switch`] to the node interface.
#[derive(Debug)]
pub struct SwitchNode {
    pub switch: Switch,
}

impl SwitchNode {
    pub fn new(switch: Switch) -> Self {
        SwitchNode { switch }
    }
}

impl Node for SwitchNode {
    fn on_packet(&mut self, _now: Tick, pkt: Packet, out: &mut Vec<Emit>) -> Result<(), NodeError> {
        for (port, p) in self.switch.handle(pkt)? {
            out.push(Emit::new(port.into(), p));
        }
        Ok(())
    }

    fn on_wake(&mut self, _now: Tick, _out: &mut Vec<Emit>) -> Result<(), NodeError> {
        Ok(())
    }

    fn next_wake(&self) -> Tick {
        Tick::MAX
    }

    fn is_done(&self) -> bool {
        true
    }

    fn progress(&self) -> u64 {
        self.switch.metrics().aggregates_emitted
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficCounters {
    pub data_bytes_tx: u64,
    pub data_bytes_rx: u64,
    pub heartbeat_bytes_tx: u64,
    pub heartbeat_bytes_rx: u64,
    pub retransmit_bytes: u64,
    pub packets_tx: u64,
    pub packets_rx: u64,
    pub packets_lost_injected: u64,
    pub packets_dup_injected: u64,
    /// Data elements sent for the first time.
    pub data_elems_tx: u64,
    pub data_elems_rx: u64,
}

impl TrafficCounters {
    pub fn heartbeat_bytes(&self) -> u64 {
        self.heartbeat_bytes_tx + self.heartbeat_bytes_rx
    }

    pub fn record_tx(&mut self, pkt: &Packet, bytes: u64, retransmission: bool) {
        self.packets_tx += 1;
        if pkt.kind.is_data() {
            self.data_bytes_tx += bytes;
            if retransmission {
                self.retransmit_bytes += bytes;
            } else {
                self.data_elems_tx += pkt.elems() as u64;
            }
        } else {
            self.heartbeat_bytes_tx += bytes;
        }
    }

    pub fn record_rx(&mut self, pkt: &Packet, bytes: u64) {
        self.packets_rx += 1;
        if pkt.kind.is_data() {
            self.data_bytes_rx += bytes;
            self.data_elems_rx += pkt.elems() as u64;
        } else {
            self.heartbeat_bytes_rx += bytes;
        }
    }

    pub fn delta(&self, earlier: &TrafficCounters) -> TrafficCounters {
        TrafficCounters {
            data_bytes_tx: self.data_bytes_tx - earlier.data_bytes_tx,
            data_bytes_rx: self.data_bytes_rx - earlier.data_bytes_rx,
            heartbeat_bytes_tx: self.heartbeat_bytes_tx - earlier.heartbeat_bytes_tx,
            heartbeat_bytes_rx: self.heartbeat_bytes_rx - earlier.heartbeat_bytes_rx,
            retransmit_bytes: self.retransmit_bytes - earlier.retransmit_bytes,
            packets_tx: self.packets_tx - earlier.packets_tx,
            packets_rx: self.packets_rx - earlier.packets_rx,
            packets_lost_injected: self.packets_lost_injected - earlier.packets_lost_injected,
            packets_dup_injected: self.packets_dup_injected - earlier.packets_dup_injected,
            data_elems_tx: self.data_elems_tx - earlier.data_elems_tx,
            data_elems_rx: self.data_elems_rx - earlier.data_elems_rx,
        }
    }

    pub fn add(&mut self, o: &TrafficCounters) {
        self.data_bytes_tx += o.data_bytes_tx;
        self.data_bytes_rx += o.data_bytes_rx;
        self.heartbeat_bytes_tx += o.heartbeat_bytes_tx;
        self.heartbeat_bytes_rx += o.heartbeat_bytes_rx;
        self.retransmit_bytes += o.retransmit_bytes;
        self.packets_tx += o.packets_tx;
        self.packets_rx += o.packets_rx;
        self.packets_lost_injected += o.packets_lost_injected;
        self.packets_dup_injected += o.packets_dup_injected;
        self.data_elems_tx += o.data_elems_tx;
        self.data_elems_rx += o.data_elems_rx;
    }
}

/// Non-negative fraction kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Option<Self> {
        if den == 0 {
            return None;
        }
        let g = gcd(num, den);
        Some(Ratio { num: num / g, den: den / g })
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Measured per-collective element counts next to the ring-collective baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficReport {
    pub workers: u64,
    /// Total parameter elements `S`.
    pub model_elems: u64,
    /// Collectives of each kind covered by the measurement.
    pub collectives: u64,
    /// Per worker, data elements pushed per collective.
    pub pushed_per_collective: Vec<Ratio>,
    /// Per worker, data elements pulled per collective.
    pub pulled_per_collective: Vec<Ratio>,
    /// `S`: what a push or pull moves per worker.
    pub push_pull_elems: u64,
    /// `2(N-1)S/N`, zero for one worker.
    pub ring_elems: Ratio,
    /// Largest measured per-worker push volume over `2(N-1)S/N`; undefined
    /// for one worker.
    pub ratio: Option<Ratio>,
}

/// `pushed[i]`/`pulled[i]` are worker `i`'s first-transmission data elements
/// over `push_collectives`/`pull_collectives` collectives.
pub fn traffic_report(
    model_elems: u64,
    pushed: &[u64],
    push_collectives: u64,
    pulled: &[u64],
    pull_collectives: u64,
) -> TrafficReport {
    let n = pushed.len() as u64;
    let per = |v: &[u64], c: u64| v.iter().map(|&x| Ratio::new(x, c.max(1)).unwrap()).collect();
    let ring_elems = Ratio::new(2 * (n.saturating_sub(1)) * model_elems, n.max(1)).unwrap();
    let pushed_per_collective: Vec<Ratio> = per(pushed, push_collectives);
    let ratio = match pushed_per_collective.iter().max_by(|a, b| (a.num * b.den).cmp(&(b.num * a.den))) {
        Some(m) if ring_elems.num > 0 => Ratio::new(m.num * ring_elems.den, m.den * ring_elems.num),
        _ => None,
    };
    TrafficReport {
        workers: n,
        model_elems,
        collectives: push_collectives,
        pushed_per_collective,
        pulled_per_collective: per(pulled, pull_collectives),
        push_pull_elems: model_elems,
        ring_elems,
        ratio,
    }
}

impl From<WireError> for NodeError {
    fn from(e: WireError) -> Self {
        NodeError::Protocol(e.to_string())
    }
}
