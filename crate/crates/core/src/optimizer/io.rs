//! Strict-priority IO dispatcher over the state store, with a token bucket
//! modelling device bandwidth. Simulated time: one tick is one microsecond.

use super::store::{ModelStateStore, StateKind, StoreError};
use crate::transport::Tick;
use std::collections::VecDeque;

pub const TICKS_PER_SEC: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IoQueue {
    ReadParams = 0,
    ReadStates = 1,
    WriteStates = 2,
}

impl IoQueue {
    pub const ALL: [IoQueue; 3] = [IoQueue::ReadParams, IoQueue::ReadStates, IoQueue::WriteStates];
}

#[derive(Debug, Clone, PartialEq)]
pub enum IoOp {
    Read(Vec<StateKind>),
    Write(Vec<(StateKind, Vec<f32>)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoRequest {
    pub id: u64,
    pub queue: IoQueue,
    pub layer: usize,
    pub op: IoOp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoCompletion {
    pub id: u64,
    pub queue: IoQueue,
    pub layer: usize,
    /// One vector per requested kind for reads; empty for writes.
    pub data: Vec<Vec<f32>>,
    pub finished_at: Tick,
}

/// Byte-rate limiter. Token amounts are kept in byte-ticks so that integer
/// arithmetic stays exact at any rate.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: u128,
    burst: u128,
    tokens: u128,
    last: Tick,
}

impl TokenBucket {
    /// `rate_bytes_per_sec == 0` disables limiting. `burst_bytes` caps the
    /// credit accumulated while idle.
    pub fn new(rate_bytes_per_sec: u64, burst_bytes: u64) -> Self {
        TokenBucket {
            rate: rate_bytes_per_sec as u128,
            burst: burst_bytes as u128 * TICKS_PER_SEC,
            tokens: 0,
            last: 0,
        }
    }

    pub fn is_limited(&self) -> bool {
        self.rate > 0
    }

    /// Tick at which `bytes` requested at `now` have been admitted.
    pub fn reserve(&mut self, now: Tick, bytes: u64) -> Tick {
        if self.rate == 0 {
            return now;
        }
        if now > self.last {
            self.tokens = (self.tokens + (now - self.last) as u128 * self.rate).min(self.burst);
            self.last = now;
        }
        let start = self.last.max(now);
        let cost = bytes as u128 * TICKS_PER_SEC;
        if self.tokens >= cost {
            self.tokens -= cost;
            return start;
        }
        let wait = (cost - self.tokens).div_ceil(self.rate);
        self.tokens = wait * self.rate + self.tokens - cost;
        self.last = start + wait as Tick;
        self.last
    }
}

/// A single-server dispatcher: at most one request is in service, chosen from
/// the highest-priority non-empty queue.
#[derive(Debug)]
pub struct IoDispatcher {
    queues: [VecDeque<IoRequest>; 3],
    active: Option<(IoCompletion, Tick)>,
    bucket: TokenBucket,
    next_id: u64,
    busy_ticks: Tick,
    bytes_moved: u64,
    dequeues: Vec<(Tick, IoQueue)>,
    record_dequeues: bool,
}

impl IoDispatcher {
    pub fn new(bucket: TokenBucket) -> Self {
        IoDispatcher {
            queues: Default::default(),
            active: None,
            bucket,
            next_id: 0,
            busy_ticks: 0,
            bytes_moved: 0,
            dequeues: Vec::new(),
            record_dequeues: false,
        }
    }

    /// Keeps a `(tick, queue)` log of every dequeue.
    pub fn record_dequeues(&mut self, on: bool) {
        self.record_dequeues = on;
    }

    pub fn dequeues(&self) -> &[(Tick, IoQueue)] {
        &self.dequeues
    }

    pub fn busy_ticks(&self) -> Tick {
        self.busy_ticks
    }

    pub fn bytes_moved(&self) -> u64 {
        self.bytes_moved
    }

    pub fn queue_len(&self, q: IoQueue) -> usize {
        self.queues[q as usize].len()
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_none() && self.queues.iter().all(VecDeque::is_empty)
    }

    pub fn submit(&mut self, queue: IoQueue, layer: usize, op: IoOp) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.queues[queue as usize].push_back(IoRequest { id, queue, layer, op });
        id
    }

    /// Tick at which the in-service request finishes.
    pub fn next_event(&self) -> Option<Tick> {
        self.active.as_ref().map(|(_, t)| *t)
    }

    /// Finishes due requests and starts new ones. File access happens when a
    /// request enters service.
    pub fn poll(&mut self, now: Tick, store: &mut ModelStateStore) -> Result<Vec<IoCompletion>, StoreError> {
        let mut done = Vec::new();
        loop {
            if let Some((_, finish)) = &self.active {
                if *finish > now {
                    break;
                }
                done.push(self.active.take().unwrap().0);
                continue;
            }
            let Some(qi) = self.queues.iter().position(|q| !q.is_empty()) else { break };
            debug_assert!(self.queues[..qi].iter().all(VecDeque::is_empty), "priority inversion");
            let req = self.queues[qi].pop_front().unwrap();
            if self.record_dequeues {
                self.dequeues.push((now, req.queue));
            }
            let (data, bytes) = match req.op {
                IoOp::Read(kinds) => {
                    let data = kinds.iter().map(|&k| store.read(k, req.layer)).collect::<Result<Vec<_>, _>>()?;
                    let bytes = data.iter().map(|d| 4 * d.len() as u64).sum();
                    (data, bytes)
                }
                IoOp::Write(items) => {
                    let mut bytes = 0;
                    for (k, d) in &items {
                        store.write(*k, req.layer, d)?;
                        bytes += 4 * d.len() as u64;
                    }
                    (Vec::new(), bytes)
                }
            };
            let finish = self.bucket.reserve(now, bytes);
            self.busy_ticks += finish - now;
            self.bytes_moved += bytes;
            let completion = IoCompletion { id: req.id, queue: req.queue, layer: req.layer, data, finished_at: finish };
            self.active = Some((completion, finish));
        }
        Ok(done)
    }
}
