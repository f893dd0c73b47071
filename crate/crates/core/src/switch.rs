//! The aggregation switch: sums gradient packets from `N` workers, fans out
//! parameter packets and gradient heartbeats, and min-aggregates parameter
//! heartbeats.
//!
//! The switch is a pure per-packet event handler. It keeps integer state only.

use crate::wire::{Packet, PacketKind, OPTIMIZER_ID};
use thiserror::Error;

pub const DEFAULT_WINDOW: u32 = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SwitchError {
    #[error("invalid switch config: {0}")]
    InvalidConfig(&'static str),
    #[error("seq {seq} from worker {worker} outside admissible window (emitted high {emitted_high})")]
    WindowViolation { seq: u32, worker: u8, emitted_high: i64 },
    #[error("worker id {0} out of range")]
    UnknownWorker(u8),
    #[error("seq {seq}: payload length {got} disagrees with {expected}")]
    PayloadMismatch { seq: u32, got: usize, expected: usize },
    #[error("unexpected {0:?} packet at switch")]
    UnexpectedKind(PacketKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchConfig {
    pub num_workers: u32,
    pub window: u32,
    pub leader_worker: u32,
}

impl SwitchConfig {
    pub fn new(num_workers: u32, window: u32, leader_worker: u32) -> Result<Self, SwitchError> {
        if num_workers == 0 {
            return Err(SwitchError::InvalidConfig("num_workers must be >= 1"));
        }
        if num_workers > 64 {
            return Err(SwitchError::InvalidConfig("num_workers must be <= 64"));
        }
        if window == 0 {
            return Err(SwitchError::InvalidConfig("window must be >= 1"));
        }
        if leader_worker >= num_workers {
            return Err(SwitchError::InvalidConfig("leader_worker must be < num_workers"));
        }
        Ok(SwitchConfig { num_workers, window, leader_worker })
    }
}

/// Where an emitted packet goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Port {
    Worker(u8),
    Optimizer,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwitchMetrics {
    pub grad_packets_in: u64,
    pub aggregates_emitted: u64,
    pub shadow_reemissions: u64,
    pub duplicates_absorbed: u64,
    pub param_packets_in: u64,
    pub heartbeats_in: u64,
    pub heartbeats_out: u64,
}

#[derive(Debug, Clone)]
struct PoolEntry {
    seq: Option<u32>,
    data: Vec<i32>,
    len: usize,
    bitmap: u64,
    /// Aggregate kept after emission so duplicates can be answered.
    shadow: Option<Vec<i32>>,
}

impl PoolEntry {
    fn empty() -> Self {
        PoolEntry { seq: None, data: Vec::new(), len: 0, bitmap: 0, shadow: None }
    }
}

/// Two pools of `W` slots. A packet for seq `s` uses slot `s mod W` in pool
/// `(s / W) mod 2`; the pool entry is recycled by seq `s + 2W`.
#[derive(Debug, Clone)]
pub struct GradTable {
    pools: [Vec<PoolEntry>; 2],
    window: u32,
}

impl GradTable {
    fn new(window: u32) -> Self {
        let pool = vec![PoolEntry::empty(); window as usize];
        GradTable { pools: [pool.clone(), pool], window }
    }

    fn entry(&mut self, seq: u32) -> &mut PoolEntry {
        let w = self.window;
        &mut self.pools[((seq / w) % 2) as usize][(seq % w) as usize]
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct HeartbeatEntry {
    ack: u32,
    credit: u32,
    seen: bool,
}

#[derive(Debug, Clone)]
pub struct HeartbeatTable {
    entries: Vec<HeartbeatEntry>,
}

impl HeartbeatTable {
    /// `(min ack, min credit)` once every worker has reported.
    pub fn aggregate(&self) -> Option<(u32, u32)> {
        if !self.entries.iter().all(|e| e.seen) {
            return None;
        }
        let ack = self.entries.iter().map(|e| e.ack).min()?;
        let credit = self.entries.iter().map(|e| e.credit).min()?;
        Some((ack, credit))
    }
}

#[derive(Debug, Clone)]
pub struct Switch {
    cfg: SwitchConfig,
    full_mask: u64,
    grads: GradTable,
    heartbeats: HeartbeatTable,
    emitted_high: i64,
    metrics: SwitchMetrics,
}

impl Switch {
    pub fn new(cfg: SwitchConfig) -> Self {
        let full_mask = if cfg.num_workers == 64 { u64::MAX } else { (1u64 << cfg.num_workers) - 1 };
        Switch {
            cfg,
            full_mask,
            grads: GradTable::new(cfg.window),
            heartbeats: HeartbeatTable { entries: vec![HeartbeatEntry::default(); cfg.num_workers as usize] },
            emitted_high: -1,
            metrics: SwitchMetrics::default(),
        }
    }

    pub fn config(&self) -> &SwitchConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> &SwitchMetrics {
        &self.metrics
    }

    pub fn heartbeat_table(&self) -> &HeartbeatTable {
        &self.heartbeats
    }

    /// Dispatches one inbound packet by kind.
    pub fn handle(&mut self, pkt: Packet) -> Result<Vec<(Port, Packet)>, SwitchError> {
        match pkt.kind {
            PacketKind::GradData if pkt.worker_id != OPTIMIZER_ID => {
                Ok(self.on_grad_packet(pkt)?.map(|p| (Port::Optimizer, p)).into_iter().collect())
            }
            PacketKind::ParamData if pkt.worker_id == OPTIMIZER_ID => Ok(self.on_param_packet(pkt)),
            PacketKind::ParamHeartbeat if pkt.worker_id != OPTIMIZER_ID => {
                Ok(self.on_param_heartbeat(pkt)?.map(|p| (Port::Optimizer, p)).into_iter().collect())
            }
            PacketKind::GradHeartbeat if pkt.worker_id == OPTIMIZER_ID => Ok(self.on_grad_heartbeat(pkt)),
            kind => Err(SwitchError::UnexpectedKind(kind)),
        }
    }

    pub fn on_grad_packet(&mut self, pkt: Packet) -> Result<Option<Packet>, SwitchError> {
        let worker = pkt.worker_id;
        if worker as u32 >= self.cfg.num_workers {
            return Err(SwitchError::UnknownWorker(worker));
        }
        let values = pkt.values().ok_or(SwitchError::UnexpectedKind(pkt.kind))?;
        let seq = pkt.seq_num;
        let w = self.cfg.window as i64;
        let s = seq as i64;
        let violation = SwitchError::WindowViolation { seq, worker, emitted_high: self.emitted_high };
        if s > self.emitted_high + w || s < self.emitted_high + 1 - 2 * w {
            return Err(violation);
        }
        self.metrics.grad_packets_in += 1;

        let bit = 1u64 << worker;
        let full_mask = self.full_mask;
        let entry = self.grads.entry(seq);
        match entry.seq {
            Some(owner) if owner > seq => return Err(violation),
            Some(owner) if owner == seq => {}
            previous => {
                // Recycling a slot whose aggregate never completed would lose data.
                if previous.is_some() && entry.bitmap != 0 {
                    return Err(violation);
                }
                entry.seq = Some(seq);
                entry.data.clear();
                entry.data.resize(values.len(), 0);
                entry.len = values.len();
                entry.bitmap = 0;
                entry.shadow = None;
            }
        }

        if let Some(shadow) = &entry.shadow {
            // Already emitted: answer the retransmission with the same aggregate.
            let out = Packet::data(PacketKind::GradData, OPTIMIZER_ID, seq, shadow.clone());
            self.metrics.duplicates_absorbed += 1;
            self.metrics.shadow_reemissions += 1;
            return Ok(Some(out));
        }
        if entry.bitmap & bit != 0 {
            self.metrics.duplicates_absorbed += 1;
            return Ok(None);
        }
        if values.len() != entry.len {
            return Err(SwitchError::PayloadMismatch { seq, got: values.len(), expected: entry.len });
        }
        for (a, v) in entry.data.iter_mut().zip(values) {
            *a = a.wrapping_add(*v);
        }
        entry.bitmap |= bit;
        if entry.bitmap != full_mask {
            return Ok(None);
        }

        let aggregate = entry.data.clone();
        entry.data.iter_mut().for_each(|a| *a = 0);
        entry.bitmap = 0;
        entry.shadow = Some(aggregate.clone());
        self.emitted_high = self.emitted_high.max(s);
        self.metrics.aggregates_emitted += 1;
        Ok(Some(Packet::data(PacketKind::GradData, OPTIMIZER_ID, seq, aggregate)))
    }

    pub fn on_param_packet(&mut self, pkt: Packet) -> Vec<(Port, Packet)> {
        self.metrics.param_packets_in += 1;
        self.fan_out(pkt)
    }

    pub fn on_param_heartbeat(&mut self, pkt: Packet) -> Result<Option<Packet>, SwitchError> {
        let worker = pkt.worker_id;
        if worker as u32 >= self.cfg.num_workers {
            return Err(SwitchError::UnknownWorker(worker));
        }
        let hb = pkt.heartbeat_payload().ok_or(SwitchError::UnexpectedKind(pkt.kind))?;
        self.metrics.heartbeats_in += 1;
        // Keep the highest values reported so a reordered stale heartbeat cannot
        // pull the aggregate backwards.
        let entry = &mut self.heartbeats.entries[worker as usize];
        if entry.seen {
            entry.ack = entry.ack.max(hb.ack);
            entry.credit = entry.credit.max(hb.credit);
        } else {
            *entry = HeartbeatEntry { ack: hb.ack, credit: hb.credit, seen: true };
        }
        if worker as u32 != self.cfg.leader_worker {
            return Ok(None);
        }
        Ok(self.heartbeats.aggregate().map(|(ack, credit)| {
            self.metrics.heartbeats_out += 1;
            Packet::heartbeat(PacketKind::ParamHeartbeat, OPTIMIZER_ID, ack, credit)
        }))
    }

    pub fn on_grad_heartbeat(&mut self, pkt: Packet) -> Vec<(Port, Packet)> {
        self.metrics.heartbeats_in += 1;
        self.metrics.heartbeats_out += self.cfg.num_workers as u64;
        self.fan_out(pkt)
    }

    fn fan_out(&self, pkt: Packet) -> Vec<(Port, Packet)> {
        (0..self.cfg.num_workers).map(|w| (Port::Worker(w as u8), pkt.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn switch(n: u32) -> Switch {
        Switch::new(SwitchConfig::new(n, 8, 0).unwrap())
    }

    fn grad(worker: u8, seq: u32, values: Vec<i32>) -> Packet {
        Packet::data(PacketKind::GradData, worker, seq, values)
    }

    fn hb(worker: u8, ack: u32, credit: u32) -> Packet {
        Packet::heartbeat(PacketKind::ParamHeartbeat, worker, ack, credit)
    }

    #[test]
    fn single_worker_passes_through() {
        let mut sw = switch(1);
        for seq in 0..20 {
            let out = sw.on_grad_packet(grad(0, seq, vec![seq as i32, -1])).unwrap().unwrap();
            assert_eq!(out.values().unwrap(), &[seq as i32, -1]);
            assert_eq!(out.seq_num, seq);
        }
    }

    #[test]
    fn two_workers_sum() {
        let mut sw = switch(2);
        assert!(sw.on_grad_packet(grad(0, 0, vec![3])).unwrap().is_none());
        let out = sw.on_grad_packet(grad(1, 0, vec![5])).unwrap().unwrap();
        assert_eq!(out.values().unwrap(), &[8]);
    }

    #[test]
    fn duplicate_before_completion_is_absorbed() {
        let mut sw = switch(2);
        let trace = [grad(0, 0, vec![3]), grad(0, 0, vec![3]), grad(1, 0, vec![5])];
        let emitted: Vec<Packet> = trace.into_iter().filter_map(|p| sw.on_grad_packet(p).unwrap()).collect();
        assert_eq!(emitted.len(), 1);
        assert_eq!(emitted[0].values().unwrap(), &[8]);
        assert_eq!(sw.metrics().duplicates_absorbed, 1);
    }

    #[test]
    fn duplicate_after_emission_reemits_shadow() {
        let mut sw = switch(2);
        sw.on_grad_packet(grad(0, 0, vec![3])).unwrap();
        let first = sw.on_grad_packet(grad(1, 0, vec![5])).unwrap().unwrap();
        let again = sw.on_grad_packet(grad(1, 0, vec![5])).unwrap().unwrap();
        assert_eq!(first.encode().unwrap(), again.encode().unwrap());
    }

    #[test]
    fn window_violation_is_reported() {
        let mut sw = switch(1);
        // W = 8: nothing emitted yet, so seq 8 is beyond emitted_high + W.
        assert!(matches!(sw.on_grad_packet(grad(0, 8, vec![1])), Err(SwitchError::WindowViolation { .. })));
        for seq in 0..40 {
            sw.on_grad_packet(grad(0, seq, vec![1])).unwrap();
        }
        // emitted_high = 39, admissible floor = 39 + 1 - 16 = 24.
        assert!(sw.on_grad_packet(grad(0, 24, vec![1])).unwrap().is_some());
        assert!(matches!(sw.on_grad_packet(grad(0, 23, vec![1])), Err(SwitchError::WindowViolation { .. })));
    }

    #[test]
    fn recycling_incomplete_slot_is_a_violation() {
        let mut sw = switch(2);
        sw.on_grad_packet(grad(0, 0, vec![1])).unwrap();
        for seq in 1..16 {
            sw.on_grad_packet(grad(0, seq, vec![1])).unwrap();
            sw.on_grad_packet(grad(1, seq, vec![1])).unwrap();
        }
        // emitted_high = 15; seq 16 maps to seq 0's pool entry which never completed.
        assert!(matches!(sw.on_grad_packet(grad(0, 16, vec![1])), Err(SwitchError::WindowViolation { .. })));
    }

    #[test]
    fn param_fan_out() {
        let mut sw = switch(3);
        let p = Packet::data(PacketKind::ParamData, OPTIMIZER_ID, 4, vec![1, 2]);
        let out = sw.on_param_packet(p.clone());
        assert_eq!(out.len(), 3);
        for (i, (port, q)) in out.iter().enumerate() {
            assert_eq!(*port, Port::Worker(i as u8));
            assert_eq!(q.encode().unwrap(), p.encode().unwrap());
        }
    }

    #[test]
    fn grad_heartbeat_fan_out() {
        let mut sw = switch(4);
        let p = Packet::heartbeat(PacketKind::GradHeartbeat, OPTIMIZER_ID, 3, 9);
        let out = sw.on_grad_heartbeat(p.clone());
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|(_, q)| *q == p));
    }

    #[test]
    fn zero_workers_rejected() {
        assert!(SwitchConfig::new(0, 8, 0).is_err());
        assert!(SwitchConfig::new(2, 0, 0).is_err());
        assert!(SwitchConfig::new(2, 8, 2).is_err());
    }

    #[test]
    fn heartbeat_min_aggregation() {
        let mut sw = switch(3);
        assert!(sw.on_param_heartbeat(hb(1, 5, 64)).unwrap().is_none());
        assert!(sw.on_param_heartbeat(hb(2, 5, 64)).unwrap().is_none());
        let out = sw.on_param_heartbeat(hb(0, 5, 64)).unwrap().unwrap();
        assert_eq!(out.heartbeat_payload().unwrap().ack, 5);
        assert_eq!(out.heartbeat_payload().unwrap().credit, 64);

        let mut sw = switch(3);
        sw.on_param_heartbeat(hb(1, 7, 80)).unwrap();
        sw.on_param_heartbeat(hb(2, 6, 90)).unwrap();
        let out = sw.on_param_heartbeat(hb(0, 5, 100)).unwrap().unwrap();
        let agg = out.heartbeat_payload().unwrap();
        assert_eq!((agg.ack, agg.credit), (5, 80));
    }

    #[test]
    fn leader_waits_for_full_table() {
        let mut sw = switch(2);
        assert!(sw.on_param_heartbeat(hb(0, 1, 10)).unwrap().is_none());
        sw.on_param_heartbeat(hb(1, 1, 10)).unwrap();
        assert!(sw.on_param_heartbeat(hb(0, 1, 10)).unwrap().is_some());
    }

    #[test]
    fn seeded_heartbeat_interleavings_match_table_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4u8;
        let mut sw = switch(n as u32);
        let mut latest = vec![None::<(u32, u32)>; n as usize];
        let mut state = vec![(0u32, 63u32); n as usize];
        let mut last_ack = 0;
        for _ in 0..10_000 {
            let w = rng.gen_range(0..n) as usize;
            // Per-worker heartbeats are non-decreasing in generation order.
            state[w].0 += rng.gen_range(0..3);
            state[w].1 = state[w].1.max(state[w].0 + 63 - rng.gen_range(0..5));
            latest[w] = Some(state[w]);
            let out = sw.on_param_heartbeat(hb(w as u8, state[w].0, state[w].1)).unwrap();
            let expect = if w == 0 && latest.iter().all(Option::is_some) {
                let ack = latest.iter().map(|e| e.unwrap().0).min().unwrap();
                let credit = latest.iter().map(|e| e.unwrap().1).min().unwrap();
                Some((ack, credit))
            } else {
                None
            };
            let got = out.map(|p| {
                let h = p.heartbeat_payload().unwrap();
                (h.ack, h.credit)
            });
            assert_eq!(got, expect);
            if let Some((ack, _)) = got {
                assert!(ack >= last_ack);
                last_ack = ack;
            }
        }
    }

    #[test]
    fn seeded_lossless_aggregation_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 4usize;
        let packets = 256u32;
        let mut sw = Switch::new(SwitchConfig::new(n as u32, 64, 0).unwrap());
        let payloads: Vec<Vec<Vec<i32>>> = (0..n)
            .map(|_| (0..packets).map(|_| (0..16).map(|_| rng.gen_range(-1000..1000)).collect()).collect())
            .collect();
        // Interleave workers randomly while each worker stays in order and
        // within the switch window of the slowest worker.
        let mut next = vec![0u32; n];
        let mut emitted = Vec::new();
        while next.iter().any(|&s| s < packets) {
            let floor = *next.iter().min().unwrap();
            let mut ready: Vec<usize> = (0..n).filter(|&w| next[w] < packets && next[w] < floor + 32).collect();
            ready.shuffle(&mut rng);
            let w = ready[0];
            let seq = next[w];
            next[w] += 1;
            if let Some(p) = sw.on_grad_packet(grad(w as u8, seq, payloads[w][seq as usize].clone())).unwrap() {
                emitted.push(p);
            }
        }
        assert_eq!(emitted.len(), packets as usize);
        for p in emitted {
            let s = p.seq_num as usize;
            let mut oracle = vec![0i32; 16];
            for pw in &payloads[..n] {
                for (o, v) in oracle.iter_mut().zip(&pw[s]) {
                    *o += v;
                }
            }
            assert_eq!(p.values().unwrap(), oracle.as_slice());
        }
    }

    #[test]
    fn seeded_param_stream_fans_out_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sw = switch(4);
        let input: Vec<Packet> = (0..100)
            .map(|s| Packet::data(PacketKind::ParamData, OPTIMIZER_ID, s, (0..8).map(|_| rng.gen()).collect()))
            .collect();
        let mut links: Vec<Vec<Packet>> = vec![Vec::new(); 4];
        for p in &input {
            for (port, q) in sw.on_param_packet(p.clone()) {
                let Port::Worker(w) = port else { panic!("param sent to optimizer") };
                links[w as usize].push(q);
            }
        }
        for link in links {
            assert_eq!(link, input);
        }
    }
}
