//! Synthetic traffic for exercising the fabric without a model: sources push
//! seeded random vectors through the access module, sinks consume raw
//! fixed-point payloads on a seeded stall schedule.

use crate::access::{packets_for, AccessBuffer, AccessConfig, AccessModule, AccessRequest, RequestKind};
use crate::fabric::{Addr, Emit, FabricConfig, Node, NodeError, Sim, SimError, SwitchNode};
use crate::quant::QuantConfig;
use crate::switch::{Switch, SwitchConfig, DEFAULT_WINDOW as SWITCH_WINDOW};
use crate::transport::{EndpointRole, Tick, TimingConfig, TransportEndpoint, TransportMetrics, DEFAULT_WINDOW};
use crate::wire::Packet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::any::Any;

fn out_emit(out: &mut Vec<Emit>, o: crate::transport::Outgoing) {
    out.push(Emit { to: Addr::Switch, packet: o.packet, retransmission: o.retransmission });
}

/// Pushes `messages` random vectors of `len` elements, each uniform within
/// `±fill * clamp_bound`.
pub struct Source {
    ep: TransportEndpoint,
    access: AccessModule,
    rng: ChaCha8Rng,
    bound: f32,
    len: usize,
    messages: u64,
    submitted: u64,
    sent: Option<Vec<Vec<f32>>>,
}

impl Source {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        role: EndpointRole,
        timing: TimingConfig,
        window: usize,
        quant: QuantConfig,
        len: usize,
        messages: u64,
        fill: f64,
        seed: u64,
    ) -> Result<Self, NodeError> {
        let ep = TransportEndpoint::new(role, timing, window, window, window).map_err(|e| NodeError::Protocol(e.to_string()))?;
        Ok(Source {
            ep,
            access: AccessModule::new(AccessConfig { queue_depth: 4, ..AccessConfig::default() }, quant),
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: (quant.clamp_bound() * fill) as f32,
            len,
            messages,
            submitted: 0,
            sent: None,
        })
    }

    /// Keeps every submitted vector.
    pub fn record(&mut self) {
        self.sent = Some(Vec::new());
    }

    pub fn sent(&self) -> &[Vec<f32>] {
        self.sent.as_deref().unwrap_or(&[])
    }

    pub fn metrics(&self) -> &TransportMetrics {
        self.ep.metrics()
    }

    fn drive(&mut self, now: Tick, out: &mut Vec<Emit>) -> Result<(), NodeError> {
        for o in self.ep.on_timer_tick(now) {
            out_emit(out, o);
        }
        while self.submitted < self.messages && self.access.pending(RequestKind::Push) < 4 {
            let v: Vec<f32> = (0..self.len).map(|_| self.rng.gen_range(-self.bound..=self.bound)).collect();
            if let Some(log) = &mut self.sent {
                log.push(v.clone());
            }
            self.access.submit(AccessRequest::push(AccessBuffer::real(v), self.len))?;
            self.submitted += 1;
        }
        self.access.process_push(&mut self.ep);
        for o in self.ep.poll_transmit(now) {
            out_emit(out, o);
        }
        Ok(())
    }
}

impl Node for Source {
    fn on_packet(&mut self, now: Tick, pkt: Packet, out: &mut Vec<Emit>) -> Result<(), NodeError> {
        self.ep.on_packet(now, pkt);
        self.drive(now, out)
    }

    fn on_wake(&mut self, now: Tick, out: &mut Vec<Emit>) -> Result<(), NodeError> {
        self.drive(now, out)
    }

    fn next_wake(&self) -> Tick {
        if self.submitted == 0 {
            0
        } else {
            self.ep.next_deadline()
        }
    }

    fn is_done(&self) -> bool {
        self.submitted == self.messages && self.access.is_idle() && !self.ep.tx.has_outstanding()
    }

    fn progress(&self) -> u64 {
        self.submitted + self.ep.tx.ack_reg() as u64
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// When a sink consumes. After each burst it sleeps with probability
/// `stall_prob` for a uniform `1..=max_sleep` ticks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StallSchedule {
    pub seed: u64,
    pub max_burst: usize,
    pub stall_prob: f64,
    pub max_sleep: Tick,
}

impl StallSchedule {
    pub fn eager() -> Self {
        StallSchedule { seed: 0, max_burst: usize::MAX, stall_prob: 0.0, max_sleep: 1 }
    }
}

/// Consumes raw fixed-point payloads and reassembles them into messages of
/// `len` elements.
pub struct Sink {
    ep: TransportEndpoint,
    schedule: StallSchedule,
    rng: ChaCha8Rng,
    sleep_until: Tick,
    len: usize,
    expected: u64,
    partial: Vec<i32>,
    received: Vec<Vec<i32>>,
    keep: bool,
    messages: u64,
    packets: u64,
    max_occupancy: usize,
    capacity: usize,
}

impl Sink {
    pub fn new(
        role: EndpointRole,
        timing: TimingConfig,
        window: usize,
        len: usize,
        expected: u64,
        schedule: StallSchedule,
    ) -> Result<Self, NodeError> {
        let ep = TransportEndpoint::new(role, timing, window, window, window).map_err(|e| NodeError::Protocol(e.to_string()))?;
        Ok(Sink {
            ep,
            rng: ChaCha8Rng::seed_from_u64(schedule.seed),
            schedule,
            sleep_until: 0,
            len,
            expected,
            partial: Vec::with_capacity(len),
            received: Vec::new(),
            keep: true,
            messages: 0,
            packets: 0,
            max_occupancy: 0,
            capacity: window,
        })
    }

    /// Count messages without storing them.
    pub fn discard(&mut self) {
        self.keep = false;
    }

    pub fn received(&self) -> &[Vec<i32>] {
        &self.received
    }

    pub fn messages(&self) -> u64 {
        self.messages
    }

    pub fn packets(&self) -> u64 {
        self.packets
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Highest RX occupancy seen after any arrival.
    pub fn max_occupancy(&self) -> usize {
        self.max_occupancy
    }

    pub fn metrics(&self) -> &TransportMetrics {
        self.ep.metrics()
    }

    fn consume(&mut self, now: Tick) {
        if now < self.sleep_until {
            return;
        }
        let burst = if self.schedule.max_burst == usize::MAX {
            usize::MAX
        } else {
            self.rng.gen_range(1..=self.schedule.max_burst)
        };
        let mut taken = 0;
        while taken < burst {
            let Some(p) = self.ep.rx_consume() else { break };
            taken += 1;
            self.packets += 1;
            self.partial.extend_from_slice(&p);
            if self.partial.len() >= self.len {
                debug_assert_eq!(self.partial.len(), self.len);
                let msg = std::mem::replace(&mut self.partial, Vec::with_capacity(self.len));
                if self.keep {
                    self.received.push(msg);
                }
                self.messages += 1;
            }
        }
        if taken > 0 && self.schedule.stall_prob > 0.0 && self.rng.gen_bool(self.schedule.stall_prob) {
            self.sleep_until = now + self.rng.gen_range(1..=self.schedule.max_sleep);
        }
    }

    fn drive(&mut self, now: Tick, out: &mut Vec<Emit>) {
        for o in self.ep.on_timer_tick(now) {
            out_emit(out, o);
        }
        self.consume(now);
        for o in self.ep.poll_transmit(now) {
            out_emit(out, o);
        }
    }
}

impl Node for Sink {
    fn on_packet(&mut self, now: Tick, pkt: Packet, out: &mut Vec<Emit>) -> Result<(), NodeError> {
        self.ep.on_packet(now, pkt);
        self.max_occupancy = self.max_occupancy.max(self.ep.rx.occupancy());
        self.drive(now, out);
        Ok(())
    }

    fn on_wake(&mut self, now: Tick, out: &mut Vec<Emit>) -> Result<(), NodeError> {
        self.drive(now, out);
        Ok(())
    }

    fn next_wake(&self) -> Tick {
        let stalled = if self.ep.rx.occupancy() > 0 { self.sleep_until } else { Tick::MAX };
        self.ep.next_deadline().min(stalled)
    }

    fn is_done(&self) -> bool {
        self.messages >= self.expected
    }

    fn progress(&self) -> u64 {
        self.packets
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Which way the synthetic traffic flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Workers push, the optimizer consumes the switch aggregate.
    Gradients,
    /// The optimizer pushes, every worker consumes.
    Params,
}

#[derive(Debug, Clone)]
pub struct TrafficScenario {
    pub direction: Direction,
    pub workers: u32,
    pub len: usize,
    pub messages: u64,
    pub seed: u64,
    pub frac_bits: u32,
    pub window: usize,
    pub switch_window: u32,
    pub fabric: FabricConfig,
    pub schedule: StallSchedule,
    /// Keep sent and received vectors.
    pub record: bool,
}

impl TrafficScenario {
    pub fn new(direction: Direction, workers: u32, len: usize, messages: u64, seed: u64) -> Self {
        TrafficScenario {
            direction,
            workers,
            len,
            messages,
            seed,
            frac_bits: crate::quant::DEFAULT_FRAC_BITS,
            window: DEFAULT_WINDOW,
            switch_window: SWITCH_WINDOW,
            fabric: FabricConfig { seed, ..FabricConfig::default() },
            schedule: StallSchedule::eager(),
            record: true,
        }
    }

    pub fn timing(&self) -> TimingConfig {
        let rtt = 4 * (self.fabric.latency + self.fabric.jitter + 1);
        TimingConfig::new(self.window as Tick, 4, 25 * rtt, 4, rtt).expect("valid scenario timing")
    }

    pub fn packets_per_message(&self) -> usize {
        packets_for(self.len)
    }

    /// Builds the simulation; run it with [`Sim::run`].
    pub fn build(&self) -> Result<Sim, NodeError> {
        let timing = self.timing();
        let mut sim = Sim::new(self.fabric.clone());
        let sw = SwitchConfig::new(self.workers, self.switch_window, 0)?;
        sim.add_node(Addr::Switch, Box::new(SwitchNode::new(Switch::new(sw))));
        let q = |n| QuantConfig::new(self.frac_bits, n).map_err(|e| NodeError::Protocol(e.to_string()));
        let sched = |k: u64| StallSchedule { seed: self.schedule.seed.wrapping_add(k), ..self.schedule };
        match self.direction {
            Direction::Gradients => {
                let mut sink =
                    Sink::new(EndpointRole::Optimizer, timing, self.window, self.len, self.messages, sched(0))?;
                if !self.record {
                    sink.discard();
                }
                sim.add_node(Addr::Optimizer, Box::new(sink));
                for w in 0..self.workers {
                    let seed = self.seed.wrapping_mul(1000).wrapping_add(w as u64 + 1);
                    let mut src = Source::new(
                        EndpointRole::Worker(w as u8),
                        timing,
                        self.window,
                        q(self.workers)?,
                        self.len,
                        self.messages,
                        0.999,
                        seed,
                    )?;
                    if self.record {
                        src.record();
                    }
                    sim.add_node(Addr::Worker(w as u8), Box::new(src));
                }
            }
            Direction::Params => {
                let mut src = Source::new(
                    EndpointRole::Optimizer,
                    timing,
                    self.window,
                    q(1)?,
                    self.len,
                    self.messages,
                    0.999,
                    self.seed,
                )?;
                if self.record {
                    src.record();
                }
                sim.add_node(Addr::Optimizer, Box::new(src));
                for w in 0..self.workers {
                    let mut sink = Sink::new(
                        EndpointRole::Worker(w as u8),
                        timing,
                        self.window,
                        self.len,
                        self.messages,
                        sched(w as u64 + 1),
                    )?;
                    if !self.record {
                        sink.discard();
                    }
                    sim.add_node(Addr::Worker(w as u8), Box::new(sink));
                }
            }
        }
        Ok(sim)
    }

    pub fn run(&self) -> Result<Sim, SimError> {
        let mut sim = self.build().map_err(|source| SimError::Node { addr: Addr::Switch, tick: 0, source, trace: String::new() })?;
        sim.run()?;
        Ok(sim)
    }
}

/// Brute-force reference for one aggregated message: each element converted
/// with `round(v * 2^f)` in 64-bit arithmetic and summed across workers.
pub fn brute_force_sum(vectors: &[&[f32]], frac_bits: u32) -> Vec<i64> {
    let scale = (1u64 << frac_bits) as f64;
    let len = vectors.first().map_or(0, |v| v.len());
    let mut acc = vec![0i64; len];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += (*x as f64 * scale).round_ties_even() as i64;
        }
    }
    acc
}
