//! UDP runtime: drives one [`Node`] from a socket and a wall clock.
//!
//! Ticks are `elapsed / tick_us`, counted from process start. Every node
//! sends only to the addresses listed in the cluster manifest.

use super::{Addr, Node, NodeError, TrafficCounters};
use crate::transport::Tick;
use crate::wire::Packet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{self, ErrorKind};
use std::net::{SocketAddr, UdpSocket};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UdpError {
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("manifest has no entry for {0}")]
    Missing(Addr),
    #[error("socket: {0}")]
    Io(#[from] io::Error),
    #[error("{addr}: {source}")]
    Node { addr: Addr, source: NodeError },
    #[error("{addr}: not finished after {secs:.1}s")]
    Deadline { addr: Addr, secs: f64 },
}

/// Role to socket address map, one `role host port` line per node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: BTreeMap<Addr, SocketAddr>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, addr: Addr, sock: SocketAddr) {
        self.entries.insert(addr, sock);
    }

    pub fn get(&self, addr: Addr) -> Result<SocketAddr, UdpError> {
        self.entries.get(&addr).copied().ok_or(UdpError::Missing(addr))
    }

    pub fn entries(&self) -> impl Iterator<Item = (Addr, SocketAddr)> + '_ {
        self.entries.iter().map(|(a, s)| (*a, *s))
    }

    pub fn parse(text: &str) -> Result<Self, UdpError> {
        let mut m = Manifest::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| UdpError::Manifest { line: i + 1, msg };
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [role, host, port] = parts[..] else {
                return Err(err(format!("expected `role host port`, got `{line}`")));
            };
            let addr: Addr = role.parse().map_err(err)?;
            let sock = format!("{host}:{port}").parse().map_err(|e| err(format!("{e}")))?;
            if m.entries.insert(addr, sock).is_some() {
                return Err(err(format!("duplicate role {addr}")));
            }
        }
        Ok(m)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(a, s)| format!("{a} {} {}\n", s.ip(), s.port())).collect()
    }
}

#[derive(Debug, Clone)]
pub struct UdpOptions {
    pub tick_us: u64,
    /// Time to keep serving after the node reports done.
    pub linger: Duration,
    /// Exit after this long without traffic once something has arrived.
    /// Used for nodes that never report done on their own.
    pub idle_exit: Option<Duration>,
    pub deadline: Duration,
    pub loss_prob: f64,
    pub dup_prob: f64,
    pub seed: u64,
}

impl Default for UdpOptions {
    fn default() -> Self {
        UdpOptions {
            tick_us: 10,
            linger: Duration::from_millis(500),
            idle_exit: None,
            deadline: Duration::from_secs(120),
            loss_prob: 0.0,
            dup_prob: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UdpStats {
    pub counters: TrafficCounters,
    pub ticks: Tick,
    pub malformed: u64,
}

struct Runtime<'a> {
    me: Addr,
    sock: UdpSocket,
    manifest: &'a Manifest,
    opts: &'a UdpOptions,
    rng: ChaCha8Rng,
    stats: UdpStats,
}

impl Runtime<'_> {
    fn send(&mut self, to: Addr, pkt: &Packet, retransmission: bool) -> Result<(), UdpError> {
        let bytes = pkt.encode().map_err(|e| UdpError::Node { addr: self.me, source: e.into() })?;
        self.stats.counters.record_tx(pkt, bytes.len() as u64, retransmission);
        if self.opts.loss_prob > 0.0 && self.rng.gen_bool(self.opts.loss_prob) {
            self.stats.counters.packets_lost_injected += 1;
            return Ok(());
        }
        let copies = if self.opts.dup_prob > 0.0 && self.rng.gen_bool(self.opts.dup_prob) {
            self.stats.counters.packets_dup_injected += 1;
            2
        } else {
            1
        };
        let dst = self.manifest.get(to)?;
        for _ in 0..copies {
            match self.sock.send_to(&bytes, dst) {
                Ok(_) => {}
                // The peer may not be up yet or already gone; the transport recovers.
                Err(e) if matches!(e.kind(), ErrorKind::ConnectionRefused | ErrorKind::WouldBlock) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

/// Serves `node` at `me` until it is done and the linger time has passed.
/// `observe` runs after every event with the node and the traffic so far.
pub fn run_node(
    node: &mut dyn Node,
    me: Addr,
    manifest: &Manifest,
    opts: &UdpOptions,
    mut observe: impl FnMut(&dyn Node, &TrafficCounters, Tick),
) -> Result<UdpStats, UdpError> {
    let sock = UdpSocket::bind(manifest.get(me)?)?;
    let mut rt = Runtime {
        me,
        sock,
        manifest,
        opts,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        stats: UdpStats::default(),
    };
    let start = Instant::now();
    let tick_len = Duration::from_micros(opts.tick_us);
    let now = |start: Instant| (start.elapsed().as_micros() / opts.tick_us as u128) as Tick;
    let node_err = |source| UdpError::Node { addr: me, source };
    let mut out = Vec::new();
    let mut buf = vec![0u8; 65536];
    let mut done_since: Option<Instant> = None;
    let mut last_rx: Option<Instant> = None;
    loop {
        let t = now(start);
        if node.next_wake() <= t {
            node.on_wake(t, &mut out).map_err(node_err)?;
        }
        for e in out.drain(..) {
            rt.send(e.to, &e.packet, e.retransmission)?;
        }
        observe(&*node, &rt.stats.counters, t);

        if node.is_done() {
            let since = *done_since.get_or_insert_with(Instant::now);
            let idle_ok = opts.idle_exit.is_none_or(|idle| last_rx.is_some_and(|r| r.elapsed() >= idle));
            if since.elapsed() >= opts.linger && idle_ok {
                break;
            }
        } else {
            done_since = None;
        }
        if start.elapsed() >= opts.deadline {
            return Err(UdpError::Deadline { addr: me, secs: start.elapsed().as_secs_f64() });
        }

        let wake = node.next_wake();
        let wait = if wake == Tick::MAX {
            Duration::from_millis(5)
        } else {
            (tick_len * wake.saturating_sub(now(start)).min(500) as u32).clamp(Duration::from_micros(20), Duration::from_millis(5))
        };
        rt.sock.set_read_timeout(Some(wait))?;
        match rt.sock.recv_from(&mut buf) {
            Ok((n, _)) => {
                last_rx = Some(Instant::now());
                let pkt = match Packet::decode(&buf[..n]) {
                    Ok(p) => p,
                    Err(_) => {
                        rt.stats.malformed += 1;
                        continue;
                    }
                };
                rt.stats.counters.record_rx(&pkt, n as u64);
                node.on_packet(now(start), pkt, &mut out).map_err(node_err)?;
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::ConnectionRefused) => {}
            Err(e) => return Err(e.into()),
        }
    }
    rt.stats.ticks = now(start);
    Ok(rt.stats)
}

/// Binds `count` loopback sockets on ephemeral ports and returns their
/// addresses once released.
pub fn free_loopback_addrs(count: usize) -> io::Result<Vec<SocketAddr>> {
    let socks: Vec<UdpSocket> = (0..count).map(|_| UdpSocket::bind("127.0.0.1:0")).collect::<io::Result<_>>()?;
    socks.iter().map(|s| s.local_addr()).collect()
}
