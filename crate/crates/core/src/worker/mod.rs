//! Data-parallel worker. Per round it pulls each block's parameters in
//! forward order, then pulls them again in reverse order to recompute and
//! push gradients. Parameters are dropped as soon as a block is done.

pub mod model;

use crate::access::{
    AccessBuffer, AccessConfig, AccessModule, AccessRequest, Completion, CompletionStatus, RealBuffer,
    RequestKind,
};
use crate::fabric::{Addr, Emit, Node, NodeError};
use crate::quant::QuantConfig;
use crate::transport::{EndpointRole, Tick, TimingConfig, TransportEndpoint};
use model::{block_backward, block_forward, loss_and_grad, to_f32, Dataset, MlpShape};
use std::any::Any;
use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub id: u8,
    pub num_workers: u32,
    pub rounds: u64,
    pub shape: MlpShape,
    pub batch_per_worker: usize,
    pub fwd_ticks: Tick,
    pub bwd_ticks: Tick,
    /// Let a gradient push run while the next block is computed.
    pub overlap: bool,
    pub frac_bits: u32,
    pub access: AccessConfig,
    pub timing: TimingConfig,
    pub tx_capacity: usize,
    pub rx_capacity: usize,
    pub peer_rx_capacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Start,
    FwdPull(usize),
    FwdCompute(usize),
    BwdPull(usize),
    BwdCompute(usize),
    PushWait(usize),
    Finished,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerRound {
    pub round: u64,
    pub loss: f64,
    pub start: Tick,
    pub fwd_end: Tick,
    pub end: Tick,
}

pub struct WorkerNode {
    cfg: WorkerConfig,
    data: Arc<Dataset>,
    ep: TransportEndpoint,
    access: AccessModule,
    phase: Phase,
    round: u64,
    busy_until: Tick,
    targets: Vec<f64>,
    /// Input of each block, kept from forward for the backward pass.
    acts: Vec<Vec<f64>>,
    current: Vec<f64>,
    dy: Vec<f64>,
    grads: Option<Vec<f32>>,
    pull: Option<(RealBuffer, Arc<Completion>)>,
    pushes: VecDeque<Arc<Completion>>,
    round_start: Tick,
    fwd_end: Tick,
    loss: f64,
    rounds_log: Vec<WorkerRound>,
    pushed: Option<Vec<(u64, usize, Vec<f32>)>>,
    progress: u64,
}

impl WorkerNode {
    pub fn new(cfg: WorkerConfig, data: Arc<Dataset>) -> Result<Self, NodeError> {
        let bad = |m: String| NodeError::Protocol(m);
        let quant = QuantConfig::new(cfg.frac_bits, cfg.num_workers).map_err(|e| bad(e.to_string()))?;
        let ep = TransportEndpoint::new(
            EndpointRole::Worker(cfg.id),
            cfg.timing,
            cfg.tx_capacity,
            cfg.rx_capacity,
            cfg.peer_rx_capacity,
        )
        .map_err(|e| bad(e.to_string()))?;
        Ok(WorkerNode {
            access: AccessModule::new(cfg.access, quant),
            cfg,
            data,
            ep,
            phase: Phase::Start,
            round: 0,
            busy_until: 0,
            targets: Vec::new(),
            acts: Vec::new(),
            current: Vec::new(),
            dy: Vec::new(),
            grads: None,
            pull: None,
            pushes: VecDeque::new(),
            round_start: 0,
            fwd_end: 0,
            loss: 0.0,
            rounds_log: Vec::new(),
            pushed: None,
            progress: 0,
        })
    }

    /// Keeps a copy of every pushed gradient as `(round, layer, values)`.
    pub fn record_pushes(&mut self) {
        self.pushed = Some(Vec::new());
    }

    pub fn pushed(&self) -> &[(u64, usize, Vec<f32>)] {
        self.pushed.as_deref().unwrap_or(&[])
    }

    pub fn rounds(&self) -> &[WorkerRound] {
        &self.rounds_log
    }

    pub fn endpoint(&self) -> &TransportEndpoint {
        &self.ep
    }

    pub fn access(&self) -> &AccessModule {
        &self.access
    }

    /// Request trace as `(kind, len)` for lockstep comparison.
    pub fn request_trace(&self) -> &[(RequestKind, usize)] {
        self.access.trace()
    }

    /// Parameter bytes the worker currently holds or has requested.
    pub fn held_param_bytes(&self) -> usize {
        self.pull.as_ref().map_or(0, |(b, _)| 4 * b.lock().unwrap().len())
    }

    fn submit_pull(&mut self, layer: usize) -> Result<(), NodeError> {
        debug_assert!(layer < self.cfg.shape.layers);
        let n = self.cfg.shape.block_params();
        let buf = Arc::new(Mutex::new(vec![0.0f32; n]));
        let req = AccessRequest::pull(buf.clone(), n);
        let done = req.completion.clone();
        self.access.submit(req)?;
        self.pull = Some((buf, done));
        Ok(())
    }

    /// Parameters of the outstanding pull once it has completed.
    fn take_pulled(&mut self) -> Result<Option<Vec<f32>>, NodeError> {
        let Some((_, done)) = &self.pull else { return Ok(None) };
        match done.status() {
            CompletionStatus::Pending => Ok(None),
            CompletionStatus::Failed(r) => Err(NodeError::Protocol(format!("parameter pull failed: {r}"))),
            CompletionStatus::Ok { .. } => {
                let (buf, _) = self.pull.take().unwrap();
                let params = std::mem::take(&mut *buf.lock().unwrap());
                Ok(Some(params))
            }
        }
    }

    fn reap_pushes(&mut self) -> Result<bool, NodeError> {
        let mut changed = false;
        while let Some(c) = self.pushes.front() {
            match c.status() {
                CompletionStatus::Pending => break,
                CompletionStatus::Failed(r) => return Err(NodeError::Protocol(format!("gradient push failed: {r}"))),
                CompletionStatus::Ok { .. } => {
                    self.pushes.pop_front();
                    changed = true;
                }
            }
        }
        Ok(changed)
    }

    fn after_push(&mut self, layer: usize, now: Tick) -> Result<(), NodeError> {
        if layer > 0 {
            self.submit_pull(layer - 1)?;
            self.phase = Phase::BwdPull(layer - 1);
        } else {
            self.rounds_log.push(WorkerRound {
                round: self.round,
                loss: self.loss,
                start: self.round_start,
                fwd_end: self.fwd_end,
                end: now,
            });
            self.acts.clear();
            self.round += 1;
            self.phase = Phase::Start;
        }
        Ok(())
    }

    fn step(&mut self, now: Tick) -> Result<bool, NodeError> {
        let h = self.cfg.shape.hidden;
        let layers = self.cfg.shape.layers;
        match self.phase {
            Phase::Start => {
                if self.round == self.cfg.rounds {
                    self.phase = Phase::Finished;
                    return Ok(true);
                }
                let (x, t) = self.data.shard(
                    self.round,
                    self.cfg.id as usize,
                    self.cfg.num_workers as usize,
                    self.cfg.batch_per_worker,
                );
                self.current = x;
                self.targets = t;
                self.round_start = now;
                self.submit_pull(0)?;
                self.phase = Phase::FwdPull(0);
            }
            Phase::FwdPull(l) => {
                let Some(params) = self.take_pulled()? else { return Ok(false) };
                let y = block_forward(&params, &self.current, h);
                self.acts.push(std::mem::replace(&mut self.current, y));
                self.busy_until = now + self.cfg.fwd_ticks;
                self.phase = Phase::FwdCompute(l);
            }
            Phase::FwdCompute(l) => {
                if now < self.busy_until {
                    return Ok(false);
                }
                if l + 1 < layers {
                    self.submit_pull(l + 1)?;
                    self.phase = Phase::FwdPull(l + 1);
                } else {
                    let global = self.cfg.num_workers as usize * self.cfg.batch_per_worker;
                    let (loss, dy) = loss_and_grad(&self.current, &self.targets, global, h);
                    self.loss = loss;
                    self.dy = dy;
                    self.fwd_end = now;
                    self.submit_pull(layers - 1)?;
                    self.phase = Phase::BwdPull(layers - 1);
                }
            }
            Phase::BwdPull(l) => {
                let Some(params) = self.take_pulled()? else { return Ok(false) };
                let (g, dx) = block_backward(&params, &self.acts[l], &self.dy, h);
                self.dy = dx;
                self.grads = Some(to_f32(&g));
                self.busy_until = now + self.cfg.bwd_ticks;
                self.phase = Phase::BwdCompute(l);
            }
            Phase::BwdCompute(l) => {
                if now < self.busy_until {
                    return Ok(false);
                }
                if self.access.pending(RequestKind::Push) >= self.cfg.access.queue_depth {
                    return Ok(false);
                }
                let grads = self.grads.take().expect("gradient computed");
                let n = grads.len();
                if let Some(log) = &mut self.pushed {
                    log.push((self.round, l, grads.clone()));
                }
                let req = AccessRequest::push(AccessBuffer::real(grads), n);
                let done = req.completion.clone();
                self.access.submit(req)?;
                self.pushes.push_back(done);
                if self.cfg.overlap {
                    self.after_push(l, now)?;
                } else {
                    self.phase = Phase::PushWait(l);
                }
            }
            Phase::PushWait(l) => {
                if !self.pushes.is_empty() {
                    return Ok(false);
                }
                self.after_push(l, now)?;
            }
            Phase::Finished => return Ok(false),
        }
        self.progress += 1;
        Ok(true)
    }

    fn drive(&mut self, now: Tick, out: &mut Vec<Emit>) -> Result<(), NodeError> {
        for o in self.ep.on_timer_tick(now) {
            out.push(Emit { to: Addr::Switch, packet: o.packet, retransmission: o.retransmission });
        }
        loop {
            let mut changed = self.access.process_push(&mut self.ep) > 0;
            changed |= self.access.process_pull(&mut self.ep, usize::MAX)? > 0;
            changed |= self.reap_pushes()?;
            changed |= self.step(now)?;
            for o in self.ep.poll_transmit(now) {
                out.push(Emit { to: Addr::Switch, packet: o.packet, retransmission: o.retransmission });
            }
            if !changed {
                return Ok(());
            }
        }
    }
}

impl Node for WorkerNode {
    fn on_packet(&mut self, now: Tick, pkt: crate::wire::Packet, out: &mut Vec<Emit>) -> Result<(), NodeError> {
        self.ep.on_packet(now, pkt);
        self.drive(now, out)
    }

    fn on_wake(&mut self, now: Tick, out: &mut Vec<Emit>) -> Result<(), NodeError> {
        self.drive(now, out)
    }

    fn next_wake(&self) -> Tick {
        let compute = match self.phase {
            Phase::FwdCompute(_) | Phase::BwdCompute(_) => self.busy_until,
            Phase::Start => 0,
            _ => Tick::MAX,
        };
        self.ep.next_deadline().min(compute)
    }

    fn is_done(&self) -> bool {
        self.phase == Phase::Finished && self.access.is_idle() && !self.ep.tx.has_outstanding()
    }

    fn progress(&self) -> u64 {
        self.progress + self.ep.tx.ack_reg() as u64 + self.ep.metrics().elems_released
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
