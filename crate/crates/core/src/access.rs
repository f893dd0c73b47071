//! Push/pull request queues between application buffers and a transport
//! endpoint.
//!
//! A request names a buffer, an element count and a completion cell. Requests
//! are served FIFO per kind. Pushes are chunked into packet payloads and
//! offered to TX; pulls drain in-order payloads from RX. Each request maps to
//! a contiguous run of sequence numbers, so both ends must issue requests of
//! identical sizes in identical order.

use crate::quant::{self, QuantConfig};
use crate::transport::TransportEndpoint;
use crate::wire::ELEMS_PER_PACKET;
use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use thiserror::Error;

pub const DEFAULT_QUEUE_DEPTH: usize = 64;
pub const DEFAULT_MAX_MESSAGE_ELEMS: usize = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AccessError {
    #[error("{0:?} queue full")]
    QueueFull(RequestKind),
    #[error("invalid request length {len} (max {max})")]
    InvalidLength { len: usize, max: usize },
    #[error("buffer holds {have} elements, request needs {need}")]
    BufferTooSmall { have: usize, need: usize },
    #[error("pull requests need a real-valued buffer")]
    PullIntoFixed,
    #[error("request {ticket} failed: {reason}")]
    Failed { ticket: u64, reason: FailReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RequestKind {
    Push,
    Pull,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailReason {
    TransportClosed,
    LengthMismatch { expected: usize, got: usize },
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailReason::TransportClosed => write!(f, "transport closed"),
            FailReason::LengthMismatch { expected, got } => {
                write!(f, "stream framing mismatch: expected chunk of {expected}, got {got}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompletionStatus {
    Pending,
    Ok { bytes_moved: u64 },
    Failed(FailReason),
}

const PENDING: u8 = 0;
const OK: u8 = 1;
const FAILED: u8 = 2;

/// Written once by the access module, readable from any thread.
#[derive(Debug, Default)]
pub struct Completion {
    state: AtomicU8,
    bytes_moved: AtomicU64,
    reason: OnceLock<FailReason>,
}

impl Completion {
    pub fn new() -> Arc<Self> {
        Arc::new(Completion::default())
    }

    pub fn status(&self) -> CompletionStatus {
        match self.state.load(Ordering::Acquire) {
            PENDING => CompletionStatus::Pending,
            OK => CompletionStatus::Ok { bytes_moved: self.bytes_moved.load(Ordering::Relaxed) },
            _ => CompletionStatus::Failed(self.reason.get().cloned().unwrap_or(FailReason::TransportClosed)),
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.load(Ordering::Acquire) != PENDING
    }

    fn finish_ok(&self, bytes: u64) {
        assert_eq!(self.state.load(Ordering::Relaxed), PENDING, "completion written twice");
        self.bytes_moved.store(bytes, Ordering::Relaxed);
        self.state.store(OK, Ordering::Release);
    }

    fn finish_failed(&self, reason: FailReason) {
        assert_eq!(self.state.load(Ordering::Relaxed), PENDING, "completion written twice");
        let _ = self.reason.set(reason);
        self.state.store(FAILED, Ordering::Release);
    }
}

pub type RealBuffer = Arc<Mutex<Vec<f32>>>;

/// Application-owned region a request reads from or writes into.
#[derive(Debug, Clone)]
pub enum AccessBuffer {
    /// Floating-point data; pushes are converted to fixed point on the way out.
    Real(RealBuffer),
    /// Data already in fixed point; pushed verbatim.
    Fixed(Arc<Vec<i32>>),
}

impl AccessBuffer {
    pub fn real(v: Vec<f32>) -> Self {
        AccessBuffer::Real(Arc::new(Mutex::new(v)))
    }

    fn len(&self) -> usize {
        match self {
            AccessBuffer::Real(b) => b.lock().unwrap().len(),
            AccessBuffer::Fixed(b) => b.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AccessRequest {
    pub kind: RequestKind,
    pub buffer: AccessBuffer,
    pub len: usize,
    pub completion: Arc<Completion>,
}

impl AccessRequest {
    pub fn push(buffer: AccessBuffer, len: usize) -> Self {
        AccessRequest { kind: RequestKind::Push, buffer, len, completion: Completion::new() }
    }

    pub fn pull(buffer: RealBuffer, len: usize) -> Self {
        AccessRequest { kind: RequestKind::Pull, buffer: AccessBuffer::Real(buffer), len, completion: Completion::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ticket(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessConfig {
    pub queue_depth: usize,
    pub max_message_elems: usize,
}

impl Default for AccessConfig {
    fn default() -> Self {
        AccessConfig { queue_depth: DEFAULT_QUEUE_DEPTH, max_message_elems: DEFAULT_MAX_MESSAGE_ELEMS }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessMetrics {
    pub pushes_completed: u64,
    pub pulls_completed: u64,
    pub bytes_pushed: u64,
    pub bytes_pulled: u64,
    pub clamp_count: u64,
}

#[derive(Debug)]
struct Active {
    ticket: u64,
    req: AccessRequest,
    offset: usize,
    pending_chunk: Option<Vec<i32>>,
}

/// Number of packets a message of `len` elements occupies.
pub fn packets_for(len: usize) -> usize {
    len.div_ceil(ELEMS_PER_PACKET)
}

#[derive(Debug)]
pub struct AccessModule {
    cfg: AccessConfig,
    quant: QuantConfig,
    push_q: VecDeque<Active>,
    pull_q: VecDeque<Active>,
    next_ticket: u64,
    trace: Vec<(RequestKind, usize)>,
    metrics: AccessMetrics,
}

impl AccessModule {
    /// `quant` converts real-valued pushes and every pull.
    pub fn new(cfg: AccessConfig, quant: QuantConfig) -> Self {
        AccessModule {
            cfg,
            quant,
            push_q: VecDeque::new(),
            pull_q: VecDeque::new(),
            next_ticket: 0,
            trace: Vec::new(),
            metrics: AccessMetrics::default(),
        }
    }

    pub fn metrics(&self) -> &AccessMetrics {
        &self.metrics
    }

    /// Every submitted request as `(kind, len)`, in submission order.
    pub fn trace(&self) -> &[(RequestKind, usize)] {
        &self.trace
    }

    pub fn pending(&self, kind: RequestKind) -> usize {
        match kind {
            RequestKind::Push => self.push_q.len(),
            RequestKind::Pull => self.pull_q.len(),
        }
    }

    pub fn is_idle(&self) -> bool {
        self.push_q.is_empty() && self.pull_q.is_empty()
    }

    pub fn submit(&mut self, req: AccessRequest) -> Result<Ticket, AccessError> {
        if req.len == 0 || req.len > self.cfg.max_message_elems {
            return Err(AccessError::InvalidLength { len: req.len, max: self.cfg.max_message_elems });
        }
        let have = req.buffer.len();
        if have < req.len {
            return Err(AccessError::BufferTooSmall { have, need: req.len });
        }
        if req.kind == RequestKind::Pull && matches!(req.buffer, AccessBuffer::Fixed(_)) {
            return Err(AccessError::PullIntoFixed);
        }
        let queue = match req.kind {
            RequestKind::Push => &self.push_q,
            RequestKind::Pull => &self.pull_q,
        };
        if queue.len() >= self.cfg.queue_depth {
            return Err(AccessError::QueueFull(req.kind));
        }
        debug_assert!(!self.overlaps(&req), "push and pull requests share a buffer");

        let ticket = self.next_ticket;
        self.next_ticket += 1;
        self.trace.push((req.kind, req.len));
        let active = Active { ticket, req, offset: 0, pending_chunk: None };
        match active.req.kind {
            RequestKind::Push => self.push_q.push_back(active),
            RequestKind::Pull => self.pull_q.push_back(active),
        }
        Ok(Ticket(ticket))
    }

    fn overlaps(&self, req: &AccessRequest) -> bool {
        let AccessBuffer::Real(buf) = &req.buffer else { return false };
        let other = match req.kind {
            RequestKind::Push => &self.pull_q,
            RequestKind::Pull => &self.push_q,
        };
        other.iter().any(|a| matches!(&a.req.buffer, AccessBuffer::Real(b) if Arc::ptr_eq(b, buf)))
    }

    /// Chunks queued pushes into TX until TX applies backpressure. Returns the
    /// number of push requests completed.
    pub fn process_push(&mut self, ep: &mut TransportEndpoint) -> usize {
        let mut completed = 0;
        while let Some(head) = self.push_q.front_mut() {
            while head.offset < head.req.len || head.pending_chunk.is_some() {
                let chunk = match head.pending_chunk.take() {
                    Some(c) => c,
                    None => {
                        let end = (head.offset + ELEMS_PER_PACKET).min(head.req.len);
                        let chunk = match &head.req.buffer {
                            AccessBuffer::Real(buf) => {
                                let buf = buf.lock().unwrap();
                                let mut out = Vec::with_capacity(end - head.offset);
                                self.metrics.clamp_count +=
                                    quant::to_fixed_into(&buf[head.offset..end], &self.quant, &mut out) as u64;
                                out
                            }
                            AccessBuffer::Fixed(buf) => buf[head.offset..end].to_vec(),
                        };
                        head.offset = end;
                        chunk
                    }
                };
                if !ep.tx_offer(chunk.clone()) {
                    head.pending_chunk = Some(chunk);
                    return completed;
                }
            }
            let done = self.push_q.pop_front().unwrap();
            let bytes = 4 * done.req.len as u64;
            done.req.completion.finish_ok(bytes);
            self.metrics.pushes_completed += 1;
            self.metrics.bytes_pushed += bytes;
            completed += 1;
        }
        completed
    }

    /// Drains in-order RX payloads into queued pulls, consuming at most
    /// `budget` payloads. Returns the number of pull requests completed.
    pub fn process_pull(&mut self, ep: &mut TransportEndpoint, budget: usize) -> Result<usize, AccessError> {
        let mut completed = 0;
        let mut budget = budget;
        while let Some(head) = self.pull_q.front_mut() {
            while head.offset < head.req.len {
                if budget == 0 {
                    return Ok(completed);
                }
                let Some(chunk_len) = ep.rx.peek().map(<[i32]>::len) else { return Ok(completed) };
                let expected = (head.req.len - head.offset).min(ELEMS_PER_PACKET);
                if chunk_len != expected {
                    let failed = self.pull_q.pop_front().unwrap();
                    let reason = FailReason::LengthMismatch { expected, got: chunk_len };
                    failed.req.completion.finish_failed(reason.clone());
                    return Err(AccessError::Failed { ticket: failed.ticket, reason });
                }
                let chunk = ep.rx_consume().expect("peeked payload");
                budget -= 1;
                let AccessBuffer::Real(buf) = &head.req.buffer else { unreachable!("checked at submit") };
                let mut buf = buf.lock().unwrap();
                let scale = self.quant.scale();
                for (dst, v) in buf[head.offset..head.offset + chunk_len].iter_mut().zip(&chunk) {
                    *dst = (*v as f64 / scale) as f32;
                }
                head.offset += chunk_len;
            }
            let done = self.pull_q.pop_front().unwrap();
            let bytes = 4 * done.req.len as u64;
            done.req.completion.finish_ok(bytes);
            self.metrics.pulls_completed += 1;
            self.metrics.bytes_pulled += bytes;
            completed += 1;
        }
        Ok(completed)
    }

    /// Fails every queued request.
    pub fn close(&mut self) {
        for a in self.push_q.drain(..).chain(self.pull_q.drain(..)) {
            a.req.completion.finish_failed(FailReason::TransportClosed);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::to_fixed;
    use crate::transport::{EndpointRole, TimingConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn timing() -> TimingConfig {
        TimingConfig { heartbeat_interval: 16, loss_detect_period: 1000, resend_stagger_unit: 4 }
    }

    fn endpoint(role: EndpointRole, window: usize) -> TransportEndpoint {
        TransportEndpoint::new(role, timing(), window, window, window).unwrap()
    }

    fn quant() -> QuantConfig {
        QuantConfig::new(20, 1).unwrap()
    }

    /// Moves everything the sender can transmit into the receiver and acks it.
    fn loopback(tx: &mut TransportEndpoint, rx: &mut TransportEndpoint, now: u64) {
        for o in tx.poll_transmit(now) {
            rx.on_packet(now, o.packet);
        }
        tx.on_heartbeat(now, rx.rx.ack(), rx.rx.credit());
    }

    #[test]
    fn chunking_lengths() {
        let mut ep = endpoint(EndpointRole::Worker(0), 64);
        let mut m = AccessModule::new(AccessConfig::default(), quant());
        m.submit(AccessRequest::push(AccessBuffer::real(vec![0.5; 130]), 130)).unwrap();
        assert_eq!(m.process_push(&mut ep), 1);
        let lens: Vec<usize> = ep.poll_transmit(0).iter().map(|o| o.packet.elems()).collect();
        assert_eq!(lens, vec![64, 64, 2]);

        let mut ep = endpoint(EndpointRole::Worker(0), 64);
        m.submit(AccessRequest::push(AccessBuffer::real(vec![0.5; 64]), 64)).unwrap();
        m.process_push(&mut ep);
        assert_eq!(ep.poll_transmit(0).len(), 1);
    }

    #[test]
    fn push_reports_bytes_and_respects_backpressure() {
        let mut ep = endpoint(EndpointRole::Worker(0), 4);
        let mut m = AccessModule::new(AccessConfig::default(), quant());
        let req = AccessRequest::push(AccessBuffer::real(vec![1.0; 1024]), 1024);
        let done = req.completion.clone();
        m.submit(req).unwrap();
        m.process_push(&mut ep);
        assert_eq!(done.status(), CompletionStatus::Pending);
        let mut rx = endpoint(EndpointRole::Optimizer, 4);
        for now in 0..100 {
            loopback(&mut ep, &mut rx, now);
            while rx.rx_consume().is_some() {}
            m.process_push(&mut ep);
        }
        assert_eq!(done.status(), CompletionStatus::Ok { bytes_moved: 4096 });
    }

    #[test]
    fn completions_in_submission_order() {
        let mut ep = endpoint(EndpointRole::Worker(0), 2);
        let mut rx = endpoint(EndpointRole::Optimizer, 2);
        let mut m = AccessModule::new(AccessConfig::default(), quant());
        let a = AccessRequest::push(AccessBuffer::real(vec![1.0; 100]), 100);
        let b = AccessRequest::push(AccessBuffer::real(vec![2.0; 100]), 100);
        let (ca, cb) = (a.completion.clone(), b.completion.clone());
        m.submit(a).unwrap();
        m.submit(b).unwrap();
        let mut order = Vec::new();
        for now in 0..50 {
            m.process_push(&mut ep);
            if ca.is_done() && !order.contains(&'a') {
                order.push('a');
            }
            if cb.is_done() && !order.contains(&'b') {
                assert!(ca.is_done(), "second push completed first");
                order.push('b');
            }
            loopback(&mut ep, &mut rx, now);
            while rx.rx_consume().is_some() {}
        }
        assert_eq!(order, vec!['a', 'b']);
    }

    #[test]
    fn submit_errors() {
        let cfg = AccessConfig { queue_depth: 1, max_message_elems: 10 };
        let mut m = AccessModule::new(cfg, quant());
        assert!(matches!(
            m.submit(AccessRequest::push(AccessBuffer::real(vec![]), 0)),
            Err(AccessError::InvalidLength { .. })
        ));
        assert!(matches!(
            m.submit(AccessRequest::push(AccessBuffer::real(vec![0.0; 11]), 11)),
            Err(AccessError::InvalidLength { .. })
        ));
        m.submit(AccessRequest::push(AccessBuffer::real(vec![0.0; 4]), 4)).unwrap();
        assert_eq!(
            m.submit(AccessRequest::push(AccessBuffer::real(vec![0.0; 4]), 4)).unwrap_err(),
            AccessError::QueueFull(RequestKind::Push)
        );
        // The pull queue is separate.
        m.submit(AccessRequest::pull(Arc::new(Mutex::new(vec![0.0; 4])), 4)).unwrap();
    }

    #[test]
    fn pull_round_trips_through_quantization() {
        let mut tx = endpoint(EndpointRole::Optimizer, 64);
        let mut rx = endpoint(EndpointRole::Worker(0), 64);
        let mut sender = AccessModule::new(AccessConfig::default(), quant());
        let mut receiver = AccessModule::new(AccessConfig::default(), quant());
        let original: Vec<f32> = (0..64).map(|i| i as f32 * 0.013 - 0.3).collect();
        sender.submit(AccessRequest::push(AccessBuffer::real(original.clone()), 64)).unwrap();
        let out = Arc::new(Mutex::new(vec![0.0; 64]));
        let req = AccessRequest::pull(out.clone(), 64);
        let done = req.completion.clone();
        receiver.submit(req).unwrap();
        sender.process_push(&mut tx);
        loopback(&mut tx, &mut rx, 0);
        receiver.process_pull(&mut rx, usize::MAX).unwrap();
        assert_eq!(done.status(), CompletionStatus::Ok { bytes_moved: 256 });
        let expect = quant::from_fixed(&to_fixed(&original, &quant()).0, &quant());
        assert_eq!(*out.lock().unwrap(), expect);
    }

    #[test]
    fn pull_stays_pending_mid_stream() {
        let mut tx = endpoint(EndpointRole::Optimizer, 64);
        let mut rx = endpoint(EndpointRole::Worker(0), 64);
        let mut sender = AccessModule::new(AccessConfig::default(), quant());
        let mut receiver = AccessModule::new(AccessConfig::default(), quant());
        sender.submit(AccessRequest::push(AccessBuffer::real(vec![1.0; 200]), 200)).unwrap();
        let req = AccessRequest::pull(Arc::new(Mutex::new(vec![0.0; 200])), 200);
        let done = req.completion.clone();
        receiver.submit(req).unwrap();
        sender.process_push(&mut tx);
        let mut packets = tx.poll_transmit(0);
        let last = packets.pop().unwrap();
        for o in packets {
            rx.on_packet(0, o.packet);
        }
        receiver.process_pull(&mut rx, usize::MAX).unwrap();
        assert_eq!(done.status(), CompletionStatus::Pending);
        rx.on_packet(1, last.packet);
        receiver.process_pull(&mut rx, usize::MAX).unwrap();
        assert!(matches!(done.status(), CompletionStatus::Ok { .. }));
    }

    #[test]
    fn framing_mismatch_fails_pull() {
        let mut tx = endpoint(EndpointRole::Optimizer, 64);
        let mut rx = endpoint(EndpointRole::Worker(0), 64);
        let mut sender = AccessModule::new(AccessConfig::default(), quant());
        let mut receiver = AccessModule::new(AccessConfig::default(), quant());
        sender.submit(AccessRequest::push(AccessBuffer::real(vec![1.0; 10]), 10)).unwrap();
        let req = AccessRequest::pull(Arc::new(Mutex::new(vec![0.0; 20])), 20);
        let done = req.completion.clone();
        receiver.submit(req).unwrap();
        sender.process_push(&mut tx);
        loopback(&mut tx, &mut rx, 0);
        assert!(receiver.process_pull(&mut rx, usize::MAX).is_err());
        assert_eq!(
            done.status(),
            CompletionStatus::Failed(FailReason::LengthMismatch { expected: 20, got: 10 })
        );
    }

    #[test]
    fn close_fails_pending() {
        let mut m = AccessModule::new(AccessConfig::default(), quant());
        let req = AccessRequest::push(AccessBuffer::real(vec![1.0; 4]), 4);
        let done = req.completion.clone();
        m.submit(req).unwrap();
        m.close();
        assert_eq!(done.status(), CompletionStatus::Failed(FailReason::TransportClosed));
    }

    #[test]
    fn random_lengths_reassemble() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = QuantConfig::new(20, 1).unwrap();
        for _ in 0..20 {
            let len = rng.gen_range(1..=100_000);
            let data: Vec<f32> = (0..len).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let mut ep = endpoint(EndpointRole::Worker(0), 4096);
            let mut m = AccessModule::new(AccessConfig::default(), q);
            m.submit(AccessRequest::push(AccessBuffer::real(data.clone()), len)).unwrap();
            let mut wire = Vec::new();
            let mut rx = endpoint(EndpointRole::Optimizer, 4096);
            let mut now = 0;
            while !m.is_idle() || wire.len() < len {
                m.process_push(&mut ep);
                for o in ep.poll_transmit(now) {
                    wire.extend_from_slice(o.packet.values().unwrap());
                    rx.on_packet(now, o.packet);
                }
                while rx.rx_consume().is_some() {}
                ep.on_heartbeat(now, rx.rx.ack(), rx.rx.credit());
                now += 1;
            }
            assert_eq!(wire, to_fixed(&data, &q).0);
        }
    }

    #[test]
    fn interleaved_requests_account_all_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let q = quant();
        let mut a_ep = endpoint(EndpointRole::Worker(0), 32);
        let mut b_ep = endpoint(EndpointRole::Optimizer, 32);
        let mut a = AccessModule::new(AccessConfig::default(), q);
        let mut b = AccessModule::new(AccessConfig::default(), q);
        let mut completions = Vec::new();
        let mut oracle_bytes = 0u64;
        // Worker pushes, optimizer pulls the matching sizes in the same order.
        for _ in 0..50 {
            let len = rng.gen_range(1..500);
            oracle_bytes += 4 * len as u64;
            let push = AccessRequest::push(AccessBuffer::real(vec![0.25; len]), len);
            let pull = AccessRequest::pull(Arc::new(Mutex::new(vec![0.0; len])), len);
            completions.push(push.completion.clone());
            completions.push(pull.completion.clone());
            a.submit(push).unwrap();
            b.submit(pull).unwrap();
        }
        for now in 0..100_000 {
            a.process_push(&mut a_ep);
            for o in a_ep.poll_transmit(now) {
                b_ep.on_packet(now, o.packet);
            }
            b.process_pull(&mut b_ep, usize::MAX).unwrap();
            a_ep.on_heartbeat(now, b_ep.rx.ack(), b_ep.rx.credit());
            if a.is_idle() && b.is_idle() {
                break;
            }
        }
        assert!(completions.iter().all(|c| matches!(c.status(), CompletionStatus::Ok { .. })));
        let total: u64 = completions
            .iter()
            .map(|c| match c.status() {
                CompletionStatus::Ok { bytes_moved } => bytes_moved,
                _ => 0,
            })
            .sum();
        assert_eq!(total, 2 * oracle_bytes);
        assert_eq!(a.metrics().bytes_pushed, oracle_bytes);
        assert_eq!(b.metrics().bytes_pulled, oracle_bytes);
    }
}
