//! Reliable transport endpoints: credit-gated TX ring with go-back-N
//! retransmission, RX reorder buffer, and periodic heartbeats carrying the
//! receiver's `ack` (next expected seq) and `credit` (max acceptable seq).
//!
//! Each endpoint owns exactly one TX stream and one RX stream. Worker
//! endpoints send gradients and receive parameters; the optimizer endpoint
//! does the opposite.

use crate::wire::{Packet, PacketKind, OPTIMIZER_ID};
use std::collections::VecDeque;
use thiserror::Error;

/// Simulation time unit. One packet service time at line rate is one tick.
pub type Tick = u64;

pub const DEFAULT_WINDOW: usize = 64;
pub const DEFAULT_HEARTBEAT_DIVISOR: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("invalid timing: {0}")]
    InvalidTiming(String),
    #[error("window must be >= 1")]
    EmptyWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingConfig {
    pub heartbeat_interval: Tick,
    pub loss_detect_period: Tick,
    pub resend_stagger_unit: Tick,
}

impl TimingConfig {
    /// `t_send` is the time to drain a full credit window at line rate; the
    /// heartbeat interval is `t_send / divisor`.
    pub fn new(
        t_send: Tick,
        divisor: u64,
        loss_detect_period: Tick,
        resend_stagger_unit: Tick,
        round_trip: Tick,
    ) -> Result<Self, TransportError> {
        if divisor <= 1 {
            return Err(TransportError::InvalidTiming(format!("heartbeat divisor {divisor} must be > 1")));
        }
        let heartbeat_interval = (t_send / divisor).max(1);
        if heartbeat_interval >= t_send {
            return Err(TransportError::InvalidTiming(format!(
                "heartbeat interval {heartbeat_interval} must be < t_send {t_send}"
            )));
        }
        if loss_detect_period <= round_trip {
            return Err(TransportError::InvalidTiming(format!(
                "loss detect period {loss_detect_period} must exceed round trip {round_trip}"
            )));
        }
        Ok(TimingConfig { heartbeat_interval, loss_detect_period, resend_stagger_unit })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransportMetrics {
    pub packets_sent: u64,
    pub retransmissions: u64,
    pub resend_events: u64,
    pub duplicates_dropped: u64,
    pub out_of_window_dropped: u64,
    pub heartbeats_sent: u64,
    pub max_rx_occupancy: usize,
    /// Elements transmitted for the first time.
    pub elems_first_sent: u64,
    /// Elements released in order to the consumer.
    pub elems_released: u64,
}

/// Sending half: ring of unacknowledged payloads starting at `ack_reg`.
#[derive(Debug, Clone)]
pub struct TxState {
    ring: VecDeque<Vec<i32>>,
    capacity: usize,
    next_seq: u32,
    ack_reg: u32,
    credit_reg: u32,
    next_to_send: u32,
    sent_high: u32,
    last_progress: Tick,
    stagger: Tick,
}

impl TxState {
    /// `initial_credit` bootstraps the credit register before any heartbeat
    /// arrives (the receiver capacity minus one).
    pub fn new(capacity: usize, initial_credit: u32, stagger: Tick) -> Self {
        TxState {
            ring: VecDeque::with_capacity(capacity),
            capacity,
            next_seq: 0,
            ack_reg: 0,
            credit_reg: initial_credit,
            next_to_send: 0,
            sent_high: 0,
            last_progress: 0,
            stagger,
        }
    }

    pub fn next_seq(&self) -> u32 {
        self.next_seq
    }

    pub fn ack_reg(&self) -> u32 {
        self.ack_reg
    }

    pub fn credit_reg(&self) -> u32 {
        self.credit_reg
    }

    pub fn is_full(&self) -> bool {
        self.ring.len() >= self.capacity
    }

    /// True when every offered payload has been acknowledged.
    pub fn is_idle(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn has_outstanding(&self) -> bool {
        self.ack_reg < self.sent_high
    }

    pub fn offer(&mut self, payload: Vec<i32>) -> bool {
        if self.is_full() {
            return false;
        }
        self.ring.push_back(payload);
        self.next_seq += 1;
        true
    }

    /// Applies a heartbeat with the max rule. Returns true if `ack_reg` advanced.
    pub fn on_heartbeat(&mut self, now: Tick, ack: u32, credit: u32) -> bool {
        let ack = ack.min(self.next_seq);
        self.credit_reg = self.credit_reg.max(credit);
        if ack <= self.ack_reg {
            return false;
        }
        let evict = (ack - self.ack_reg) as usize;
        self.ring.drain(..evict);
        self.ack_reg = ack;
        self.next_to_send = self.next_to_send.max(ack);
        self.sent_high = self.sent_high.max(ack);
        self.last_progress = now;
        true
    }

    /// Packets eligible for transmission now, as `(seq, payload, is_retransmission)`.
    pub fn poll_transmit(&mut self, now: Tick) -> Vec<(u32, Vec<i32>, bool)> {
        let mut out = Vec::new();
        while self.next_to_send < self.next_seq && self.next_to_send <= self.credit_reg {
            if !self.has_outstanding() {
                self.last_progress = now;
            }
            let seq = self.next_to_send;
            let payload = self.ring[(seq - self.ack_reg) as usize].clone();
            let retransmit = seq < self.sent_high;
            out.push((seq, payload, retransmit));
            self.next_to_send += 1;
            self.sent_high = self.sent_high.max(self.next_to_send);
        }
        out
    }

    /// Tick at which the resend timer fires, if anything is outstanding.
    pub fn resend_deadline(&self, loss_detect_period: Tick) -> Option<Tick> {
        self.has_outstanding().then(|| self.last_progress + loss_detect_period + self.stagger)
    }

    /// Rewinds to `ack_reg` when the ack has not advanced for the loss
    /// detection period plus this endpoint's stagger.
    pub fn check_resend(&mut self, now: Tick, loss_detect_period: Tick) -> bool {
        match self.resend_deadline(loss_detect_period) {
            Some(deadline) if now >= deadline => {
                self.next_to_send = self.ack_reg;
                self.last_progress = now;
                true
            }
            _ => false,
        }
    }
}

/// Receiving half: slots cover `[consumed, consumed + capacity)`.
#[derive(Debug, Clone)]
pub struct RxState {
    capacity: usize,
    slots: Vec<Option<Vec<i32>>>,
    stored_out_of_order: usize,
    released: VecDeque<Vec<i32>>,
    consumed: u32,
    expected: u32,
}

/// Outcome of one [`RxState::deliver`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RxOutcome {
    Accepted { released: usize },
    Duplicate,
    OutOfWindow,
}

impl RxState {
    pub fn new(capacity: usize) -> Self {
        RxState {
            capacity,
            slots: vec![None; capacity],
            stored_out_of_order: 0,
            released: VecDeque::new(),
            consumed: 0,
            expected: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// RX ack: next in-order sequence number.
    pub fn ack(&self) -> u32 {
        self.expected
    }

    /// RX credit: highest sequence number the buffer can accept.
    pub fn credit(&self) -> u32 {
        self.consumed + self.capacity as u32 - 1
    }

    pub fn occupancy(&self) -> usize {
        self.released.len() + self.stored_out_of_order
    }

    pub fn released_len(&self) -> usize {
        self.released.len()
    }

    pub fn deliver(&mut self, seq: u32, payload: Vec<i32>) -> RxOutcome {
        if seq < self.expected {
            return RxOutcome::Duplicate;
        }
        if seq as u64 >= self.consumed as u64 + self.capacity as u64 {
            return RxOutcome::OutOfWindow;
        }
        let slot = seq as usize % self.capacity;
        if self.slots[slot].is_some() {
            return RxOutcome::Duplicate;
        }
        self.slots[slot] = Some(payload);
        self.stored_out_of_order += 1;
        let mut released = 0;
        while let Some(p) = self.slots[self.expected as usize % self.capacity].take() {
            self.stored_out_of_order -= 1;
            self.released.push_back(p);
            self.expected += 1;
            released += 1;
        }
        assert!(self.occupancy() <= self.capacity, "rx occupancy exceeded capacity");
        RxOutcome::Accepted { released }
    }

    pub fn peek(&self) -> Option<&[i32]> {
        self.released.front().map(Vec::as_slice)
    }

    /// Hands the next in-order payload to the consumer, freeing its slot.
    pub fn consume(&mut self) -> Option<Vec<i32>> {
        let p = self.released.pop_front()?;
        self.consumed += 1;
        Some(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointRole {
    Worker(u8),
    Optimizer,
}

impl EndpointRole {
    pub fn wire_id(self) -> u8 {
        match self {
            EndpointRole::Worker(id) => id,
            EndpointRole::Optimizer => OPTIMIZER_ID,
        }
    }

    pub fn tx_kind(self) -> PacketKind {
        match self {
            EndpointRole::Worker(_) => PacketKind::GradData,
            EndpointRole::Optimizer => PacketKind::ParamData,
        }
    }

    pub fn rx_kind(self) -> PacketKind {
        match self {
            EndpointRole::Worker(_) => PacketKind::ParamData,
            EndpointRole::Optimizer => PacketKind::GradData,
        }
    }

    /// Heartbeat this endpoint emits about its RX stream.
    pub fn heartbeat_out_kind(self) -> PacketKind {
        match self {
            EndpointRole::Worker(_) => PacketKind::ParamHeartbeat,
            EndpointRole::Optimizer => PacketKind::GradHeartbeat,
        }
    }

    /// Heartbeat that updates this endpoint's TX registers.
    pub fn heartbeat_in_kind(self) -> PacketKind {
        match self {
            EndpointRole::Worker(_) => PacketKind::GradHeartbeat,
            EndpointRole::Optimizer => PacketKind::ParamHeartbeat,
        }
    }
}

/// A packet ready to leave the endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub packet: Packet,
    pub retransmission: bool,
}

#[derive(Debug, Clone)]
pub struct TransportEndpoint {
    role: EndpointRole,
    timing: TimingConfig,
    pub tx: TxState,
    pub rx: RxState,
    next_heartbeat: Tick,
    metrics: TransportMetrics,
}

impl TransportEndpoint {
    /// `peer_rx_capacity` bootstraps the TX credit register.
    pub fn new(
        role: EndpointRole,
        timing: TimingConfig,
        tx_capacity: usize,
        rx_capacity: usize,
        peer_rx_capacity: usize,
    ) -> Result<Self, TransportError> {
        if tx_capacity == 0 || rx_capacity == 0 || peer_rx_capacity == 0 {
            return Err(TransportError::EmptyWindow);
        }
        let stagger = match role {
            EndpointRole::Worker(id) => id as Tick * timing.resend_stagger_unit,
            EndpointRole::Optimizer => 0,
        };
        Ok(TransportEndpoint {
            role,
            timing,
            tx: TxState::new(tx_capacity, peer_rx_capacity as u32 - 1, stagger),
            rx: RxState::new(rx_capacity),
            next_heartbeat: timing.heartbeat_interval,
            metrics: TransportMetrics::default(),
        })
    }

    pub fn role(&self) -> EndpointRole {
        self.role
    }

    pub fn timing(&self) -> &TimingConfig {
        &self.timing
    }

    pub fn metrics(&self) -> &TransportMetrics {
        &self.metrics
    }

    pub fn tx_offer(&mut self, payload: Vec<i32>) -> bool {
        self.tx.offer(payload)
    }

    pub fn on_heartbeat(&mut self, now: Tick, ack: u32, credit: u32) -> bool {
        self.tx.on_heartbeat(now, ack, credit)
    }

    /// Routes an inbound packet to the RX buffer or the TX registers.
    /// Packets of the wrong kind for this endpoint are ignored and reported.
    pub fn on_packet(&mut self, now: Tick, pkt: Packet) -> bool {
        if pkt.kind == self.role.rx_kind() {
            let seq = pkt.seq_num;
            let crate::wire::Payload::Data(values) = pkt.payload else { return false };
            self.rx_deliver(seq, values);
            true
        } else if pkt.kind == self.role.heartbeat_in_kind() {
            let hb = pkt.heartbeat_payload().unwrap_or_default();
            self.on_heartbeat(now, hb.ack, hb.credit);
            true
        } else {
            false
        }
    }

    pub fn rx_deliver(&mut self, seq: u32, values: Vec<i32>) -> RxOutcome {
        let outcome = self.rx.deliver(seq, values);
        match outcome {
            RxOutcome::Accepted { .. } => {
                self.metrics.max_rx_occupancy = self.metrics.max_rx_occupancy.max(self.rx.occupancy());
            }
            RxOutcome::Duplicate => self.metrics.duplicates_dropped += 1,
            RxOutcome::OutOfWindow => self.metrics.out_of_window_dropped += 1,
        }
        outcome
    }

    pub fn rx_consume(&mut self) -> Option<Vec<i32>> {
        let p = self.rx.consume()?;
        self.metrics.elems_released += p.len() as u64;
        Some(p)
    }

    /// Emits a heartbeat when one is due and arms go-back-N if the resend
    /// timer expired. Retransmitted data leaves through [`Self::poll_transmit`].
    pub fn on_timer_tick(&mut self, now: Tick) -> Vec<Outgoing> {
        let mut out = Vec::new();
        if now >= self.next_heartbeat {
            out.push(Outgoing { packet: self.heartbeat(), retransmission: false });
            self.metrics.heartbeats_sent += 1;
            while self.next_heartbeat <= now {
                self.next_heartbeat += self.timing.heartbeat_interval;
            }
        }
        if self.tx.check_resend(now, self.timing.loss_detect_period) {
            self.metrics.resend_events += 1;
        }
        out
    }

    /// Snapshot of the RX registers as a heartbeat packet.
    pub fn heartbeat(&self) -> Packet {
        Packet::heartbeat(self.role.heartbeat_out_kind(), self.role.wire_id(), self.rx.ack(), self.rx.credit())
    }

    pub fn poll_transmit(&mut self, now: Tick) -> Vec<Outgoing> {
        let kind = self.role.tx_kind();
        let id = self.role.wire_id();
        let sent = self.tx.poll_transmit(now);
        sent.into_iter()
            .map(|(seq, values, retransmission)| {
                self.metrics.packets_sent += 1;
                if retransmission {
                    self.metrics.retransmissions += 1;
                } else {
                    self.metrics.elems_first_sent += values.len() as u64;
                }
                Outgoing { packet: Packet::data(kind, id, seq, values), retransmission }
            })
            .collect()
    }

    /// Earliest tick at which [`Self::on_timer_tick`] has work to do.
    pub fn next_deadline(&self) -> Tick {
        let resend = self.tx.resend_deadline(self.timing.loss_detect_period).unwrap_or(Tick::MAX);
        self.next_heartbeat.min(resend)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn timing(loss: Tick, stagger: Tick) -> TimingConfig {
        TimingConfig { heartbeat_interval: 25, loss_detect_period: loss, resend_stagger_unit: stagger }
    }

    fn seqs(out: &[Outgoing]) -> Vec<u32> {
        out.iter().filter(|o| o.packet.kind.is_data()).map(|o| o.packet.seq_num).collect()
    }

    #[test]
    fn unconstrained_send() {
        let mut tx = TxState::new(16, 10, 0);
        assert!(tx.offer(vec![1]));
        let sent = tx.poll_transmit(0);
        assert_eq!(sent.len(), 1);
        assert_eq!(sent[0].0, 0);
        assert!(!sent[0].2);
    }

    #[test]
    fn credit_gates_transmission() {
        let mut tx = TxState::new(16, 5, 0);
        for i in 0..10 {
            assert!(tx.offer(vec![i]));
        }
        let sent: Vec<u32> = tx.poll_transmit(0).iter().map(|s| s.0).collect();
        assert_eq!(sent, vec![0, 1, 2, 3, 4, 5]);
        tx.on_heartbeat(1, 0, 7);
        let sent: Vec<u32> = tx.poll_transmit(1).iter().map(|s| s.0).collect();
        assert_eq!(sent, vec![6, 7]);
    }

    #[test]
    fn ring_full_is_backpressure() {
        let mut tx = TxState::new(2, 10, 0);
        assert!(tx.offer(vec![]));
        assert!(tx.offer(vec![]));
        assert!(!tx.offer(vec![]));
        tx.poll_transmit(0);
        tx.on_heartbeat(1, 1, 10);
        assert!(tx.offer(vec![]));
    }

    #[test]
    fn cumulative_ack_evicts_and_resets_timer() {
        let mut tx = TxState::new(16, 15, 0);
        for i in 0..6 {
            tx.offer(vec![i]);
        }
        tx.poll_transmit(0);
        assert!(tx.on_heartbeat(50, 4, 15));
        assert_eq!(tx.ack_reg(), 4);
        assert_eq!(tx.ring.len(), 2);
        assert_eq!(tx.resend_deadline(100), Some(150));
        // Duplicate heartbeat: no change.
        assert!(!tx.on_heartbeat(60, 4, 15));
        assert_eq!(tx.resend_deadline(100), Some(150));
        assert_eq!((tx.ack_reg(), tx.credit_reg()), (4, 15));
    }

    #[test]
    fn reordered_heartbeats_fold_to_componentwise_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let mut tx = TxState::new(1000, 0, 0);
            for _ in 0..500 {
                tx.offer(vec![]);
            }
            let mut hbs: Vec<(u32, u32)> = (0..50)
                .map(|_| {
                    let ack = rng.gen_range(0..500);
                    (ack, ack + rng.gen_range(0..200))
                })
                .collect();
            hbs.shuffle(&mut rng);
            for &(a, c) in &hbs {
                tx.on_heartbeat(0, a, c);
            }
            let max_ack = hbs.iter().map(|h| h.0).max().unwrap();
            let max_credit = hbs.iter().map(|h| h.1).max().unwrap();
            assert_eq!((tx.ack_reg(), tx.credit_reg()), (max_ack, max_credit));
        }
    }

    #[test]
    fn random_credit_schedule_matches_head_of_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let total = 200u32;
            let mut tx = TxState::new(total as usize, 3, 0);
            for i in 0..total {
                tx.offer(vec![i as i32]);
            }
            let mut sent = Vec::new();
            let mut credit = 3u32;
            let mut oracle = Vec::new();
            let mut head = 0u32;
            for step in 0..60 {
                // Oracle: a seq goes out iff it is <= the max credit seen while it was head of line.
                while head < total && head <= credit {
                    oracle.push(head);
                    head += 1;
                }
                sent.extend(tx.poll_transmit(step).into_iter().map(|s| s.0));
                let c = rng.gen_range(0..total);
                credit = credit.max(c);
                tx.on_heartbeat(step, 0, c);
            }
            assert_eq!(sent, oracle);
        }
    }

    #[test]
    fn rx_in_order_release() {
        let mut rx = RxState::new(8);
        for s in 0..3 {
            rx.deliver(s, vec![s as i32]);
        }
        assert_eq!(rx.ack(), 3);
        let got: Vec<i32> = std::iter::from_fn(|| rx.consume()).map(|v| v[0]).collect();
        assert_eq!(got, vec![0, 1, 2]);
    }

    #[test]
    fn rx_waits_for_gap() {
        let mut rx = RxState::new(8);
        assert_eq!(rx.deliver(1, vec![1]), RxOutcome::Accepted { released: 0 });
        assert!(rx.peek().is_none());
        assert_eq!(rx.deliver(0, vec![0]), RxOutcome::Accepted { released: 2 });
        assert_eq!(rx.ack(), 2);
    }

    #[test]
    fn rx_drops_duplicates_and_out_of_window() {
        let mut rx = RxState::new(4);
        rx.deliver(0, vec![]);
        assert_eq!(rx.deliver(0, vec![]), RxOutcome::Duplicate);
        rx.deliver(2, vec![]);
        assert_eq!(rx.deliver(2, vec![]), RxOutcome::Duplicate);
        // consumed = 0, capacity 4: seq 4 is beyond credit 3.
        assert_eq!(rx.credit(), 3);
        assert_eq!(rx.deliver(4, vec![]), RxOutcome::OutOfWindow);
        rx.consume();
        assert_eq!(rx.credit(), 4);
        assert!(matches!(rx.deliver(4, vec![]), RxOutcome::Accepted { .. }));
    }

    #[test]
    fn rx_random_permutation_releases_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 64u32;
        let mut order: Vec<u32> = (0..k).collect();
        order.shuffle(&mut rng);
        let mut rx = RxState::new(k as usize);
        for s in order {
            rx.deliver(s, vec![s as i32]);
        }
        let got: Vec<u32> = std::iter::from_fn(|| rx.consume()).map(|v| v[0] as u32).collect();
        let mut oracle: Vec<u32> = (0..k).collect();
        oracle.sort();
        assert_eq!(got, oracle);
    }

    #[test]
    fn heartbeat_cadence() {
        let mut ep =
            TransportEndpoint::new(EndpointRole::Worker(0), timing(100, 0), 8, 8, 8).unwrap();
        let mut count = 0;
        for now in 1..=1000 {
            count += ep.on_timer_tick(now).len();
        }
        assert_eq!(count, 40);
        assert_eq!(ep.metrics().heartbeats_sent, 40);
    }

    #[test]
    fn idle_endpoint_never_retransmits() {
        let mut ep =
            TransportEndpoint::new(EndpointRole::Worker(1), timing(30, 5), 8, 8, 8).unwrap();
        for now in 1..=2000 {
            ep.on_timer_tick(now);
            assert!(ep.poll_transmit(now).is_empty());
        }
        assert_eq!(ep.metrics().retransmissions, 0);
    }

    #[test]
    fn heartbeat_snapshots_rx_state() {
        let mut ep = TransportEndpoint::new(EndpointRole::Optimizer, timing(100, 0), 8, 4, 8).unwrap();
        ep.rx_deliver(0, vec![]);
        ep.rx_deliver(1, vec![]);
        ep.rx_consume();
        let hb = ep.heartbeat();
        assert_eq!(hb.kind, PacketKind::GradHeartbeat);
        let p = hb.heartbeat_payload().unwrap();
        assert_eq!((p.ack, p.credit), (2, 4));
    }

    /// Scripted two-worker trace: worker 2's packet 1 is lost, nothing acks
    /// past 1, and the resend fires at the first tick >= last_progress + 100 + 2*10.
    #[test]
    fn staggered_resend_after_loss() {
        let mut eps: Vec<TransportEndpoint> = [1u8, 2]
            .iter()
            .map(|&w| TransportEndpoint::new(EndpointRole::Worker(w), timing(100, 10), 8, 8, 8).unwrap())
            .collect();
        let mut first_resend = [None; 2];
        for (i, ep) in eps.iter_mut().enumerate() {
            for v in 0..3 {
                ep.tx_offer(vec![v]);
            }
            assert_eq!(seqs(&ep.poll_transmit(0)), vec![0, 1, 2]);
            // Receiver got seq 0 only (1 was lost); its ack arrives at tick 7.
            ep.on_heartbeat(7, 1, 7);
            for now in 8..400 {
                ep.on_timer_tick(now);
                let re = seqs(&ep.poll_transmit(now));
                if !re.is_empty() {
                    assert_eq!(re, vec![1, 2]);
                    first_resend[i] = Some(now);
                    break;
                }
            }
        }
        // Independent discrete-event oracle: last progress 7, period 100, stagger id*10.
        assert_eq!(first_resend, [Some(7 + 100 + 10), Some(7 + 100 + 20)]);
        assert!(first_resend[1].unwrap() >= 7 + 120);
    }

    #[test]
    fn timing_validation() {
        assert!(TimingConfig::new(64, 4, 1100, 4, 22).is_ok());
        assert!(TimingConfig::new(64, 1, 1100, 4, 22).is_err());
        assert!(TimingConfig::new(64, 4, 20, 4, 22).is_err());
        assert_eq!(TimingConfig::new(64, 4, 1100, 4, 22).unwrap().heartbeat_interval, 16);
    }
}
