//! Out-of-core optimizer node.
//!
//! Each round serves parameters for the forward pass, then for the backward
//! pass, consuming aggregated gradients and updating file-backed Adam state.
//! Per layer, a task walks the stage sequence
//! `ReadParams -> PrepareParams [-> AcceptGrads -> UpdateStates -> WriteStates]`.
//! Every stage is a single FIFO server, so tasks never overtake each other
//! and pushes and pulls leave in layer order. Up to `max_inflight_layers`
//! tasks are live at once; a cap of one gives the serialized schedule.

pub mod adam;
pub mod io;
pub mod store;

use crate::access::{
    AccessBuffer, AccessConfig, AccessError, AccessModule, AccessRequest, Completion, CompletionStatus, RealBuffer,
};
use crate::fabric::{Addr, Emit, Node, NodeError};
use crate::quant::{self, QuantConfig};
use crate::transport::{EndpointRole, Tick, TimingConfig, TransportEndpoint};
use adam::{adam_update, AdamConfig};
use io::{IoCompletion, IoDispatcher, IoOp, IoQueue, TokenBucket};
use std::any::Any;
use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use store::{ModelStateStore, StateKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    ReadParams,
    PrepareParams,
    AcceptGrads,
    UpdateStates,
    WriteStates,
    Done,
}

impl Stage {
    pub const WORKING: [Stage; 5] =
        [Stage::ReadParams, Stage::PrepareParams, Stage::AcceptGrads, Stage::UpdateStates, Stage::WriteStates];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::ReadParams => "read_params",
            Stage::PrepareParams => "prepare_params",
            Stage::AcceptGrads => "accept_grads",
            Stage::UpdateStates => "update_states",
            Stage::WriteStates => "write_states",
            Stage::Done => "done",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Fwd,
    Bwd,
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub rounds: u64,
    pub num_workers: u32,
    pub frac_bits: u32,
    pub adam: AdamConfig,
    pub max_inflight_layers: usize,
    pub update_ticks: Tick,
    pub rate_limit_bytes_per_sec: u64,
    pub access: AccessConfig,
    pub timing: TimingConfig,
    pub tx_capacity: usize,
    pub rx_capacity: usize,
    pub peer_rx_capacity: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundStats {
    pub round: u64,
    pub start: Tick,
    pub fwd_end: Tick,
    pub end: Tick,
    pub param_clamps: u64,
    pub grad_elems: u64,
}

impl RoundStats {
    pub fn fwd_ticks(&self) -> Tick {
        self.fwd_end - self.start
    }

    pub fn bwd_ticks(&self) -> Tick {
        self.end - self.fwd_end
    }

    pub fn ticks(&self) -> Tick {
        self.end - self.start
    }
}

#[derive(Debug)]
struct Task {
    layer: usize,
    phase: Phase,
    stage: Stage,
    active: bool,
    started_at: Tick,
    io: Option<u64>,
    param_buf: Option<Vec<f32>>,
    push: Option<Arc<Completion>>,
    grad_buf: Option<RealBuffer>,
    pull: Option<Arc<Completion>>,
    state_buf: Option<Vec<Vec<f32>>>,
    busy_until: Tick,
}

impl Task {
    fn new(layer: usize, phase: Phase) -> Self {
        Task {
            layer,
            phase,
            stage: Stage::ReadParams,
            active: false,
            started_at: 0,
            io: None,
            param_buf: None,
            push: None,
            grad_buf: None,
            pull: None,
            state_buf: None,
            busy_until: 0,
        }
    }

    fn next_stage(&self) -> Stage {
        match (self.stage, self.phase) {
            (Stage::ReadParams, _) => Stage::PrepareParams,
            (Stage::PrepareParams, Phase::Fwd) => Stage::Done,
            (Stage::PrepareParams, Phase::Bwd) => Stage::AcceptGrads,
            (Stage::AcceptGrads, _) => Stage::UpdateStates,
            (Stage::UpdateStates, _) => Stage::WriteStates,
            (Stage::WriteStates, _) | (Stage::Done, _) => Stage::Done,
        }
    }
}

pub struct OptimizerNode {
    cfg: OptimizerConfig,
    store: ModelStateStore,
    io: IoDispatcher,
    ep: TransportEndpoint,
    access: AccessModule,
    param_quant: QuantConfig,
    round: u64,
    phase: Phase,
    admitted: usize,
    tasks: VecDeque<Task>,
    io_done: HashMap<u64, IoCompletion>,
    stage_busy: [Tick; 5],
    current: RoundStats,
    stats: Vec<RoundStats>,
    finished: bool,
    progress: u64,
    received_grads: Option<Vec<(u64, usize, Vec<f32>)>>,
}

impl OptimizerNode {
    pub fn new(cfg: OptimizerConfig, store: ModelStateStore) -> Result<Self, NodeError> {
        let bad = |m: &str| NodeError::Protocol(m.to_string());
        if cfg.max_inflight_layers == 0 {
            return Err(bad("max_inflight_layers must be >= 1"));
        }
        let grad_quant = QuantConfig::new(cfg.frac_bits, cfg.num_workers).map_err(|e| bad(&e.to_string()))?;
        let param_quant = QuantConfig::new(cfg.frac_bits, 1).map_err(|e| bad(&e.to_string()))?;
        let ep = TransportEndpoint::new(
            EndpointRole::Optimizer,
            cfg.timing,
            cfg.tx_capacity,
            cfg.rx_capacity,
            cfg.peer_rx_capacity,
        )
        .map_err(|e| bad(&e.to_string()))?;
        let finished = cfg.rounds == 0 || store.layout().num_layers() == 0;
        Ok(OptimizerNode {
            io: IoDispatcher::new(TokenBucket::new(cfg.rate_limit_bytes_per_sec, 0)),
            access: AccessModule::new(cfg.access, grad_quant),
            current: RoundStats::default(),
            cfg,
            store,
            ep,
            param_quant,
            round: 0,
            phase: Phase::Fwd,
            admitted: 0,
            tasks: VecDeque::new(),
            io_done: HashMap::new(),
            stage_busy: [0; 5],
            stats: Vec::new(),
            finished,
            progress: 0,
            received_grads: None,
        })
    }

    /// Keeps a copy of every aggregated gradient as `(round, layer, values)`.
    pub fn record_grads(&mut self) {
        self.received_grads = Some(Vec::new());
    }

    pub fn received_grads(&self) -> &[(u64, usize, Vec<f32>)] {
        self.received_grads.as_deref().unwrap_or(&[])
    }

    pub fn record_io_dequeues(&mut self) {
        self.io.record_dequeues(true);
    }

    pub fn io(&self) -> &IoDispatcher {
        &self.io
    }

    pub fn endpoint(&self) -> &TransportEndpoint {
        &self.ep
    }

    pub fn access(&self) -> &AccessModule {
        &self.access
    }

    pub fn store(&self) -> &ModelStateStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ModelStateStore {
        &mut self.store
    }

    pub fn rounds_done(&self) -> u64 {
        self.stats.len() as u64
    }

    pub fn round_stats(&self) -> &[RoundStats] {
        &self.stats
    }

    /// Total ticks each working stage held its server, in [`Stage::WORKING`] order.
    pub fn stage_busy(&self) -> [Tick; 5] {
        self.stage_busy
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    fn layers(&self) -> usize {
        self.store.layout().num_layers()
    }

    fn drive(&mut self, now: Tick, out: &mut Vec<Emit>) -> Result<(), NodeError> {
        for o in self.ep.on_timer_tick(now) {
            out.push(Emit { to: Addr::Switch, packet: o.packet, retransmission: o.retransmission });
        }
        loop {
            let mut changed = false;
            for c in self.io.poll(now, &mut self.store)? {
                self.io_done.insert(c.id, c);
                changed = true;
            }
            changed |= self.advance_tasks(now)?;
            changed |= self.access.process_push(&mut self.ep) > 0;
            changed |= self.access.process_pull(&mut self.ep, usize::MAX)? > 0;
            changed |= self.advance_phase(now)?;
            for o in self.ep.poll_transmit(now) {
                out.push(Emit { to: Addr::Switch, packet: o.packet, retransmission: o.retransmission });
            }
            if !changed {
                return Ok(());
            }
        }
    }

    fn advance_phase(&mut self, now: Tick) -> Result<bool, NodeError> {
        if self.finished {
            return Ok(false);
        }
        let layers = self.layers();
        let mut changed = false;
        while self.admitted < layers && self.tasks.len() < self.cfg.max_inflight_layers {
            let layer = match self.phase {
                Phase::Fwd => self.admitted,
                Phase::Bwd => layers - 1 - self.admitted,
            };
            self.tasks.push_back(Task::new(layer, self.phase));
            self.admitted += 1;
            changed = true;
        }
        if changed {
            // Newly admitted tasks may start right away.
            self.advance_tasks(now)?;
        }
        if self.admitted < layers || !self.tasks.is_empty() {
            return Ok(changed);
        }
        match self.phase {
            Phase::Fwd => {
                self.phase = Phase::Bwd;
                self.current.fwd_end = now;
            }
            Phase::Bwd => {
                self.current.round = self.round;
                self.current.end = now;
                self.stats.push(std::mem::take(&mut self.current));
                self.round += 1;
                self.store.set_step(self.store.step() + 1)?;
                self.store.flush()?;
                self.phase = Phase::Fwd;
                self.current.start = now;
                if self.round == self.cfg.rounds {
                    self.finished = true;
                }
            }
        }
        self.admitted = 0;
        self.progress += 1;
        Ok(true)
    }

    fn advance_tasks(&mut self, now: Tick) -> Result<bool, NodeError> {
        let mut changed = false;
        let mut busy = [false; 5];
        for t in &self.tasks {
            if t.active {
                busy[t.stage.index()] = true;
            }
        }
        for i in 0..self.tasks.len() {
            if self.tasks[i].active && self.stage_finished(i, now)? {
                let t = &mut self.tasks[i];
                self.stage_busy[t.stage.index()] += now - t.started_at;
                busy[t.stage.index()] = false;
                t.stage = t.next_stage();
                t.active = false;
                self.progress += 1;
                changed = true;
            }
            let stage = self.tasks[i].stage;
            if !self.tasks[i].active && stage != Stage::Done && !busy[stage.index()] && self.start_stage(i, now)? {
                busy[stage.index()] = true;
                changed = true;
            }
        }
        while self.tasks.front().is_some_and(|t| t.stage == Stage::Done) {
            self.tasks.pop_front();
            changed = true;
        }
        debug_assert!(self.tasks.iter().all(|t| t.stage != Stage::Done), "tasks finish in order");
        Ok(changed)
    }

    fn start_stage(&mut self, i: usize, now: Tick) -> Result<bool, NodeError> {
        let step = self.store.step() + 1;
        let t = &mut self.tasks[i];
        let layer = t.layer;
        match t.stage {
            Stage::ReadParams => {
                t.io = Some(self.io.submit(IoQueue::ReadParams, layer, IoOp::Read(vec![StateKind::Params])));
            }
            Stage::PrepareParams => {
                let params = t.param_buf.as_ref().expect("params read");
                let (fixed, clamps) = quant::to_fixed(params, &self.param_quant);
                let req = AccessRequest::push(AccessBuffer::Fixed(Arc::new(fixed)), params.len());
                let done = req.completion.clone();
                match self.access.submit(req) {
                    Ok(_) => {}
                    Err(AccessError::QueueFull(_)) => return Ok(false),
                    Err(e) => return Err(e.into()),
                }
                self.current.param_clamps += clamps as u64;
                t.push = Some(done);
            }
            Stage::AcceptGrads => {
                let n = self.store.layout().layer(layer)?.param_count;
                let buf = Arc::new(Mutex::new(vec![0.0f32; n]));
                let req = AccessRequest::pull(buf.clone(), n);
                let done = req.completion.clone();
                match self.access.submit(req) {
                    Ok(_) => {}
                    Err(AccessError::QueueFull(_)) => return Ok(false),
                    Err(e) => return Err(e.into()),
                }
                t.grad_buf = Some(buf);
                t.pull = Some(done);
                t.io = Some(self.io.submit(
                    IoQueue::ReadStates,
                    layer,
                    IoOp::Read(vec![StateKind::Params, StateKind::M, StateKind::V]),
                ));
            }
            Stage::UpdateStates => {
                let grads = t.grad_buf.take().expect("grads pulled");
                let grads = Arc::try_unwrap(grads).map(|m| m.into_inner().unwrap()).unwrap_or_else(|a| a.lock().unwrap().clone());
                let state = t.state_buf.as_mut().expect("states read");
                let [p, m, v] = &mut state[..] else { unreachable!("three state vectors") };
                adam_update(p, m, v, &grads, &self.cfg.adam, step);
                self.current.grad_elems += grads.len() as u64;
                if let Some(log) = &mut self.received_grads {
                    log.push((self.round, layer, grads));
                }
                t.busy_until = now + self.cfg.update_ticks;
            }
            Stage::WriteStates => {
                let state = t.state_buf.take().expect("states updated");
                let items = StateKind::ALL.into_iter().zip(state).collect();
                t.io = Some(self.io.submit(IoQueue::WriteStates, layer, IoOp::Write(items)));
            }
            Stage::Done => unreachable!(),
        }
        t.active = true;
        t.started_at = now;
        Ok(true)
    }

    fn take_io(&mut self, i: usize) -> Option<IoCompletion> {
        let id = self.tasks[i].io?;
        let c = self.io_done.remove(&id)?;
        self.tasks[i].io = None;
        Some(c)
    }

    fn completion_ok(c: &Option<Arc<Completion>>) -> Result<bool, NodeError> {
        match c.as_ref().map(|c| c.status()) {
            Some(CompletionStatus::Ok { .. }) => Ok(true),
            Some(CompletionStatus::Failed(reason)) => Err(NodeError::Protocol(format!("request failed: {reason}"))),
            _ => Ok(false),
        }
    }

    fn stage_finished(&mut self, i: usize, now: Tick) -> Result<bool, NodeError> {
        match self.tasks[i].stage {
            Stage::ReadParams => Ok(match self.take_io(i) {
                Some(mut c) => {
                    self.tasks[i].param_buf = Some(c.data.remove(0));
                    true
                }
                None => false,
            }),
            Stage::PrepareParams => {
                let done = Self::completion_ok(&self.tasks[i].push)?;
                if done {
                    let t = &mut self.tasks[i];
                    t.param_buf = None;
                    t.push = None;
                }
                Ok(done)
            }
            Stage::AcceptGrads => {
                if self.tasks[i].state_buf.is_none() {
                    if let Some(c) = self.take_io(i) {
                        self.tasks[i].state_buf = Some(c.data);
                    }
                }
                let pulled = Self::completion_ok(&self.tasks[i].pull)?;
                Ok(pulled && self.tasks[i].state_buf.is_some())
            }
            Stage::UpdateStates => Ok(now >= self.tasks[i].busy_until),
            Stage::WriteStates => Ok(self.take_io(i).is_some()),
            Stage::Done => Ok(false),
        }
    }
}

impl Node for OptimizerNode {
    fn on_packet(&mut self, now: Tick, pkt: crate::wire::Packet, out: &mut Vec<Emit>) -> Result<(), NodeError> {
        let before = self.ep.metrics().elems_released;
        self.ep.on_packet(now, pkt);
        self.drive(now, out)?;
        self.progress += self.ep.metrics().elems_released - before;
        Ok(())
    }

    fn on_wake(&mut self, now: Tick, out: &mut Vec<Emit>) -> Result<(), NodeError> {
        self.drive(now, out)
    }

    fn next_wake(&self) -> Tick {
        let update = self
            .tasks
            .iter()
            .filter(|t| t.active && t.stage == Stage::UpdateStates)
            .map(|t| t.busy_until)
            .min()
            .unwrap_or(Tick::MAX);
        self.ep.next_deadline().min(self.io.next_event().unwrap_or(Tick::MAX)).min(update)
    }

    fn is_done(&self) -> bool {
        self.finished && !self.ep.tx.has_outstanding()
    }

    fn progress(&self) -> u64 {
        self.progress + self.ep.tx.ack_reg() as u64
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
