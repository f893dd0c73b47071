//! Run configuration: a flat `key = value` file, overridable from the command
//! line. Unknown keys are rejected and the effective configuration can be
//! rendered back in the same format.

use crate::access::{AccessConfig, DEFAULT_MAX_MESSAGE_ELEMS, DEFAULT_QUEUE_DEPTH};
use crate::fabric::FabricConfig;
use crate::optimizer::adam::AdamConfig;
use crate::optimizer::store::StoreInit;
use crate::quant::{QuantConfig, DEFAULT_FRAC_BITS};
use crate::switch::{SwitchConfig, DEFAULT_WINDOW as SWITCH_WINDOW};
use crate::transport::{Tick, TimingConfig, DEFAULT_HEARTBEAT_DIVISOR, DEFAULT_WINDOW};
use crate::worker::model::MlpShape;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: `{value}` ({msg})")]
    BadValue { key: String, value: String, msg: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {msg}")]
    Read { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sim,
    Udp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    AllInOne,
    Worker,
    Switch,
    Optimizer,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Zeros,
    SeededRandom,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),* })
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($ty::$variant),)*
                    _ => Err(format!("expected one of: {}", [$($text),*].join(", "))),
                }
            }
        }
    };
}

text_enum!(Mode { Sim => "sim", Udp => "udp" });
text_enum!(Role { AllInOne => "all-in-one", Worker => "worker", Switch => "switch", Optimizer => "optimizer", Oracle => "oracle" });
text_enum!(InitKind { Zeros => "zeros", SeededRandom => "seeded-random" });

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: u32,
    pub rounds: u64,
    pub role: Role,
    pub mode: Mode,

    pub frac_bits: u32,

    pub transport_window: usize,
    pub heartbeat_divisor: u64,
    /// Zero derives the period from the fabric timing.
    pub loss_detect_period: Tick,
    pub resend_stagger_unit: Tick,

    pub switch_window: u32,
    pub switch_leader: u32,

    pub queue_depth: usize,
    pub max_message_elems: usize,

    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub pipeline: bool,
    pub max_inflight_layers: usize,
    pub update_ticks: Tick,

    /// Empty means `<out>/final_state`.
    pub store_dir: String,
    pub rate_limit_bytes_per_sec: u64,
    pub store_init: InitKind,

    pub layers: usize,
    pub hidden: usize,

    pub data_seed: u64,
    pub batch_per_worker: usize,
    pub samples: usize,
    pub teacher_scale: f64,

    pub loss_prob: f64,
    pub dup_prob: f64,
    pub latency: Tick,
    pub jitter: Tick,
    pub trace: bool,
    pub stall_limit: Tick,

    pub fwd_ticks: Tick,
    pub bwd_ticks: Tick,
    pub overlap: bool,

    pub udp_manifest: String,
    pub tick_us: u64,
    pub worker_id: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            workers: 2,
            rounds: 10,
            role: Role::AllInOne,
            mode: Mode::Sim,
            frac_bits: DEFAULT_FRAC_BITS,
            transport_window: DEFAULT_WINDOW,
            heartbeat_divisor: DEFAULT_HEARTBEAT_DIVISOR,
            loss_detect_period: 0,
            resend_stagger_unit: 4,
            switch_window: SWITCH_WINDOW,
            switch_leader: 0,
            queue_depth: DEFAULT_QUEUE_DEPTH,
            max_message_elems: DEFAULT_MAX_MESSAGE_ELEMS,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            pipeline: true,
            max_inflight_layers: 4,
            update_ticks: 20,
            store_dir: String::new(),
            rate_limit_bytes_per_sec: 0,
            store_init: InitKind::SeededRandom,
            layers: 4,
            hidden: 32,
            data_seed: 7,
            batch_per_worker: 8,
            samples: 1024,
            teacher_scale: 0.8,
            loss_prob: 0.0,
            dup_prob: 0.0,
            latency: 10,
            jitter: 0,
            trace: false,
            stall_limit: 2_000_000,
            fwd_ticks: 20,
            bwd_ticks: 40,
            overlap: true,
            udp_manifest: String::new(),
            tick_us: 10,
            worker_id: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "run.seed",
    "run.workers",
    "run.rounds",
    "run.role",
    "run.mode",
    "quant.frac_bits",
    "transport.window",
    "transport.heartbeat_divisor",
    "transport.loss_detect_period",
    "transport.resend_stagger_unit",
    "switch.window",
    "switch.leader",
    "access.queue_depth",
    "access.max_message_elems",
    "opt.lr",
    "opt.beta1",
    "opt.beta2",
    "opt.eps",
    "opt.pipeline",
    "opt.max_inflight_layers",
    "opt.update_ticks",
    "store.dir",
    "store.rate_limit_bytes_per_sec",
    "store.init",
    "model.layers",
    "model.hidden",
    "data.seed",
    "data.batch_per_worker",
    "data.samples",
    "data.teacher_scale",
    "fabric.loss_prob",
    "fabric.dup_prob",
    "fabric.latency",
    "fabric.jitter",
    "fabric.trace",
    "fabric.stall_limit",
    "worker.fwd_ticks",
    "worker.bwd_ticks",
    "worker.overlap",
    "udp.manifest",
    "udp.tick_us",
    "udp.worker_id",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), value: value.into(), msg: e.to_string() })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "run.workers" => self.workers = parse(key, v)?,
            "run.rounds" | "train.rounds" => self.rounds = parse(key, v)?,
            "run.role" => self.role = parse(key, v)?,
            "run.mode" => self.mode = parse(key, v)?,
            "quant.frac_bits" => self.frac_bits = parse(key, v)?,
            "transport.window" => self.transport_window = parse(key, v)?,
            "transport.heartbeat_divisor" => self.heartbeat_divisor = parse(key, v)?,
            "transport.loss_detect_period" => self.loss_detect_period = parse(key, v)?,
            "transport.resend_stagger_unit" => self.resend_stagger_unit = parse(key, v)?,
            "switch.window" => self.switch_window = parse(key, v)?,
            "switch.leader" => self.switch_leader = parse(key, v)?,
            "access.queue_depth" => self.queue_depth = parse(key, v)?,
            "access.max_message_elems" => self.max_message_elems = parse(key, v)?,
            "opt.lr" => self.lr = parse(key, v)?,
            "opt.beta1" => self.beta1 = parse(key, v)?,
            "opt.beta2" => self.beta2 = parse(key, v)?,
            "opt.eps" => self.eps = parse(key, v)?,
            "opt.pipeline" => self.pipeline = parse(key, v)?,
            "opt.max_inflight_layers" => self.max_inflight_layers = parse(key, v)?,
            "opt.update_ticks" => self.update_ticks = parse(key, v)?,
            "store.dir" => self.store_dir = v.to_string(),
            "store.rate_limit_bytes_per_sec" => self.rate_limit_bytes_per_sec = parse(key, v)?,
            "store.init" => self.store_init = parse(key, v)?,
            "model.layers" => self.layers = parse(key, v)?,
            "model.hidden" => self.hidden = parse(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.batch_per_worker" => self.batch_per_worker = parse(key, v)?,
            "data.samples" => self.samples = parse(key, v)?,
            "data.teacher_scale" => self.teacher_scale = parse(key, v)?,
            "fabric.loss_prob" => self.loss_prob = parse(key, v)?,
            "fabric.dup_prob" => self.dup_prob = parse(key, v)?,
            "fabric.latency" => self.latency = parse(key, v)?,
            "fabric.jitter" => self.jitter = parse(key, v)?,
            "fabric.trace" => self.trace = parse(key, v)?,
            "fabric.stall_limit" => self.stall_limit = parse(key, v)?,
            "worker.fwd_ticks" => self.fwd_ticks = parse(key, v)?,
            "worker.bwd_ticks" => self.bwd_ticks = parse(key, v)?,
            "worker.overlap" => self.overlap = parse(key, v)?,
            "udp.manifest" => self.udp_manifest = v.to_string(),
            "udp.tick_us" => self.tick_us = parse(key, v)?,
            "udp.worker_id" => self.worker_id = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "run.seed" => self.seed.to_string(),
            "run.workers" => self.workers.to_string(),
            "run.rounds" | "train.rounds" => self.rounds.to_string(),
            "run.role" => self.role.to_string(),
            "run.mode" => self.mode.to_string(),
            "quant.frac_bits" => self.frac_bits.to_string(),
            "transport.window" => self.transport_window.to_string(),
            "transport.heartbeat_divisor" => self.heartbeat_divisor.to_string(),
            "transport.loss_detect_period" => self.loss_detect_period.to_string(),
            "transport.resend_stagger_unit" => self.resend_stagger_unit.to_string(),
            "switch.window" => self.switch_window.to_string(),
            "switch.leader" => self.switch_leader.to_string(),
            "access.queue_depth" => self.queue_depth.to_string(),
            "access.max_message_elems" => self.max_message_elems.to_string(),
            "opt.lr" => self.lr.to_string(),
            "opt.beta1" => self.beta1.to_string(),
            "opt.beta2" => self.beta2.to_string(),
            "opt.eps" => self.eps.to_string(),
            "opt.pipeline" => self.pipeline.to_string(),
            "opt.max_inflight_layers" => self.max_inflight_layers.to_string(),
            "opt.update_ticks" => self.update_ticks.to_string(),
            "store.dir" => self.store_dir.clone(),
            "store.rate_limit_bytes_per_sec" => self.rate_limit_bytes_per_sec.to_string(),
            "store.init" => self.store_init.to_string(),
            "model.layers" => self.layers.to_string(),
            "model.hidden" => self.hidden.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "data.batch_per_worker" => self.batch_per_worker.to_string(),
            "data.samples" => self.samples.to_string(),
            "data.teacher_scale" => self.teacher_scale.to_string(),
            "fabric.loss_prob" => self.loss_prob.to_string(),
            "fabric.dup_prob" => self.dup_prob.to_string(),
            "fabric.latency" => self.latency.to_string(),
            "fabric.jitter" => self.jitter.to_string(),
            "fabric.trace" => self.trace.to_string(),
            "fabric.stall_limit" => self.stall_limit.to_string(),
            "worker.fwd_ticks" => self.fwd_ticks.to_string(),
            "worker.bwd_ticks" => self.bwd_ticks.to_string(),
            "worker.overlap" => self.overlap.to_string(),
            "udp.manifest" => self.udp_manifest.clone(),
            "udp.tick_us" => self.tick_us.to_string(),
            "udp.worker_id" => self.worker_id.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), msg: e.to_string() })?;
        Self::from_text(&text)
    }

    /// Every key with its effective value, one per line.
    pub fn render(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).unwrap())).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.workers == 0 || self.workers > 64 {
            return bad(format!("run.workers must be in 1..=64, got {}", self.workers));
        }
        if self.layers == 0 || self.hidden == 0 {
            return bad("model.layers and model.hidden must be positive".into());
        }
        if self.batch_per_worker == 0 || self.samples == 0 {
            return bad("data.batch_per_worker and data.samples must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.loss_prob) || !(0.0..=1.0).contains(&self.dup_prob) {
            return bad("fabric probabilities must lie in [0, 1]".into());
        }
        if self.loss_prob >= 1.0 {
            return bad("fabric.loss_prob = 1 can never deliver".into());
        }
        if self.transport_window == 0 || self.transport_window as u64 > self.switch_window as u64 {
            return bad(format!(
                "transport.window {} must be in 1..=switch.window {}",
                self.transport_window, self.switch_window
            ));
        }
        if self.max_inflight_layers == 0 {
            return bad("opt.max_inflight_layers must be >= 1".into());
        }
        if self.queue_depth == 0 {
            return bad("access.queue_depth must be >= 1".into());
        }
        if self.mode == Mode::Sim && !matches!(self.role, Role::AllInOne | Role::Oracle) {
            return bad(format!("role {} needs --mode udp", self.role));
        }
        if self.tick_us == 0 {
            return bad("udp.tick_us must be >= 1".into());
        }
        if self.worker_id >= self.workers && self.role == Role::Worker {
            return bad(format!("udp.worker_id {} out of range for {} workers", self.worker_id, self.workers));
        }
        let block = self.hidden * self.hidden + self.hidden;
        if block > self.max_message_elems {
            return bad(format!("a block of {block} elements exceeds access.max_message_elems"));
        }
        QuantConfig::new(self.frac_bits, self.workers).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.adam().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.switch_config()?;
        self.timing()?;
        Ok(())
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape { layers: self.layers, hidden: self.hidden }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn access(&self) -> AccessConfig {
        AccessConfig { queue_depth: self.queue_depth, max_message_elems: self.max_message_elems }
    }

    pub fn switch_config(&self) -> Result<SwitchConfig, ConfigError> {
        SwitchConfig::new(self.workers, self.switch_window, self.switch_leader).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn store_init(&self) -> StoreInit {
        match self.store_init {
            InitKind::Zeros => StoreInit::Zeros,
            InitKind::SeededRandom => StoreInit::SeededRandom { seed: self.seed, scale: 1.0 / (self.hidden as f32).sqrt() },
        }
    }

    /// Endpoint to switch and back, worst case.
    pub fn link_round_trip(&self) -> Tick {
        2 * (self.latency + self.jitter + 1)
    }

    pub fn timing(&self) -> Result<TimingConfig, ConfigError> {
        let t_send = self.transport_window as Tick;
        let rtt = 2 * self.link_round_trip();
        let loss = if self.loss_detect_period == 0 {
            50 * self.link_round_trip()
        } else {
            self.loss_detect_period
        };
        TimingConfig::new(t_send, self.heartbeat_divisor, loss, self.resend_stagger_unit, rtt)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn fabric(&self) -> FabricConfig {
        FabricConfig {
            seed: self.seed,
            latency: self.latency,
            jitter: self.jitter,
            loss_prob: self.loss_prob,
            dup_prob: self.dup_prob,
            trace: self.trace,
            stall_limit: self.stall_limit,
        }
    }

    pub fn inflight(&self) -> usize {
        if self.pipeline {
            self.max_inflight_layers
        } else {
            1
        }
    }
}
