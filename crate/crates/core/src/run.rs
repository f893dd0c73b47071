//! Training runs: the distributed run on the simulated fabric, the
//! single-process reference, and the metrics files both produce.

use crate::config::{ConfigError, RunConfig};
use crate::fabric::{traffic_report, Addr, Sim, SimError, SwitchNode, TrafficCounters, TrafficReport};
use crate::fabric::NodeError;
use crate::optimizer::adam::adam_update;
use crate::optimizer::store::{write_store, ModelStateStore, StoreError};
use crate::optimizer::{OptimizerConfig, OptimizerNode};
use crate::quant::{self, QuantConfig};
use crate::switch::Switch;
use crate::transport::Tick;
use crate::worker::model::{shard_pass, to_f32, Dataset};
use crate::worker::{WorkerConfig, WorkerNode};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{0}")]
    Other(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub loss: f64,
    pub start_tick: Tick,
    pub end_tick: Tick,
    pub fwd_ticks: Tick,
    pub bwd_ticks: Tick,
    pub data_bytes: u64,
    pub heartbeat_bytes: u64,
    pub retransmit_bytes: u64,
    pub retransmissions: u64,
    pub packets_lost: u64,
    pub packets_dup: u64,
    pub param_clamps: u64,
    pub grad_clamps: u64,
}

pub const METRICS_HEADER: [&str; 15] = [
    "round",
    "loss",
    "start_tick",
    "end_tick",
    "wall_ticks",
    "fwd_ticks",
    "bwd_ticks",
    "data_bytes",
    "heartbeat_bytes",
    "retransmit_bytes",
    "retransmissions",
    "packets_lost",
    "packets_dup",
    "param_clamps",
    "grad_clamps",
];

impl RoundRecord {
    pub fn wall_ticks(&self) -> Tick {
        self.end_tick - self.start_tick
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.round.to_string(),
            self.loss.to_string(),
            self.start_tick.to_string(),
            self.end_tick.to_string(),
            self.wall_ticks().to_string(),
            self.fwd_ticks.to_string(),
            self.bwd_ticks.to_string(),
            self.data_bytes.to_string(),
            self.heartbeat_bytes.to_string(),
            self.retransmit_bytes.to_string(),
            self.retransmissions.to_string(),
            self.packets_lost.to_string(),
            self.packets_dup.to_string(),
            self.param_clamps.to_string(),
            self.grad_clamps.to_string(),
        ]
    }
}

pub fn write_metrics(path: &Path, records: &[RoundRecord]) -> Result<(), RunError> {
    let csv_err = |source| RunError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a metrics file as `(header, rows)`. Works for training and reference
/// output alike since only the header is assumed.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), RunError> {
    let csv_err = |source| RunError::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(csv_err)?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

/// `store.dir`, or `<out>/final_state` when unset.
pub fn store_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    if cfg.store_dir.is_empty() {
        out.join("final_state")
    } else {
        PathBuf::from(&cfg.store_dir)
    }
}

pub fn dataset(cfg: &RunConfig) -> Arc<Dataset> {
    Arc::new(Dataset::generate(cfg.data_seed, cfg.samples, cfg.hidden, cfg.teacher_scale))
}

pub fn initial_params(cfg: &RunConfig) -> Vec<f32> {
    cfg.store_init().initial_params(cfg.shape().total_params())
}

pub fn make_switch(cfg: &RunConfig) -> Result<SwitchNode, RunError> {
    Ok(SwitchNode::new(Switch::new(cfg.switch_config()?)))
}

pub fn make_worker(cfg: &RunConfig, id: u8, data: Arc<Dataset>) -> Result<WorkerNode, RunError> {
    let w = cfg.transport_window;
    let wc = WorkerConfig {
        id,
        num_workers: cfg.workers,
        rounds: cfg.rounds,
        shape: cfg.shape(),
        batch_per_worker: cfg.batch_per_worker,
        fwd_ticks: cfg.fwd_ticks,
        bwd_ticks: cfg.bwd_ticks,
        overlap: cfg.overlap,
        frac_bits: cfg.frac_bits,
        access: cfg.access(),
        timing: cfg.timing()?,
        tx_capacity: w,
        rx_capacity: w,
        peer_rx_capacity: w,
    };
    Ok(WorkerNode::new(wc, data)?)
}

/// Creates the store at `dir` with initial parameters and wraps it in an
/// optimizer node.
pub fn make_optimizer(cfg: &RunConfig, dir: &Path) -> Result<OptimizerNode, RunError> {
    let store = ModelStateStore::create(dir, cfg.shape().layout(), &initial_params(cfg))?;
    let w = cfg.transport_window;
    let oc = OptimizerConfig {
        rounds: cfg.rounds,
        num_workers: cfg.workers,
        frac_bits: cfg.frac_bits,
        adam: cfg.adam(),
        max_inflight_layers: cfg.inflight(),
        update_ticks: cfg.update_ticks,
        rate_limit_bytes_per_sec: cfg.rate_limit_bytes_per_sec,
        access: cfg.access(),
        timing: cfg.timing()?,
        tx_capacity: w,
        rx_capacity: w,
        peer_rx_capacity: w,
    };
    Ok(OptimizerNode::new(oc, store)?)
}

/// Every role of a run wired onto one simulated fabric.
pub fn build_sim(cfg: &RunConfig, store: &Path) -> Result<Sim, RunError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg.fabric());
    let data = dataset(cfg);
    sim.add_node(Addr::Switch, Box::new(make_switch(cfg)?));
    sim.add_node(Addr::Optimizer, Box::new(make_optimizer(cfg, store)?));
    for i in 0..cfg.workers {
        sim.add_node(Addr::Worker(i as u8), Box::new(make_worker(cfg, i as u8, data.clone())?));
    }
    Ok(sim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<RoundRecord>,
    pub traffic: TrafficReport,
    pub total_ticks: Tick,
    /// Busy ticks of each optimizer stage, in `Stage::WORKING` order.
    pub stage_busy: [Tick; 5],
    pub io_busy: Tick,
    pub store_dir: PathBuf,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

#[derive(Default)]
struct Snapshot {
    traffic: TrafficCounters,
    retransmissions: u64,
    grad_clamps: u64,
}

fn snapshot(sim: &Sim, workers: u32) -> Snapshot {
    let mut s = Snapshot::default();
    for c in sim.all_counters().values() {
        s.traffic.add(c);
    }
    for i in 0..workers {
        let w = sim.node::<WorkerNode>(Addr::Worker(i as u8)).expect("worker node");
        s.retransmissions += w.endpoint().metrics().retransmissions;
        s.grad_clamps += w.access().metrics().clamp_count;
    }
    let o = sim.node::<OptimizerNode>(Addr::Optimizer).expect("optimizer node");
    s.retransmissions += o.endpoint().metrics().retransmissions;
    s
}

/// Runs the whole cluster on the simulated fabric. Writes `metrics.csv` and
/// `config.txt` into `out` and the model state into [`store_dir`].
pub fn train_sim(cfg: &RunConfig, out: &Path) -> Result<TrainReport, RunError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let store = store_dir(cfg, out);
    let mut sim = build_sim(cfg, &store)?;
    let mut snaps = vec![snapshot(&sim, cfg.workers)];
    for r in 0..cfg.rounds {
        sim.run_until(|s| s.node::<OptimizerNode>(Addr::Optimizer).is_some_and(|o| o.rounds_done() > r))?;
        snaps.push(snapshot(&sim, cfg.workers));
    }
    sim.run()?;
    let report = collect(cfg, &sim, &snaps, store)?;
    write_metrics(&out.join("metrics.csv"), &report.records)?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.render()).map_err(io_err(&cfg_path))?;
    if cfg.trace {
        let p = out.join("trace.txt");
        fs::write(&p, sim.trace().join("\n") + "\n").map_err(io_err(&p))?;
    }
    Ok(report)
}

fn collect(cfg: &RunConfig, sim: &Sim, snaps: &[Snapshot], store: PathBuf) -> Result<TrainReport, RunError> {
    let opt = sim.node::<OptimizerNode>(Addr::Optimizer).expect("optimizer node");
    let workers: Vec<&WorkerNode> =
        (0..cfg.workers).map(|i| sim.node::<WorkerNode>(Addr::Worker(i as u8)).expect("worker node")).collect();
    let mut records = Vec::new();
    for (r, stats) in opt.round_stats().iter().enumerate() {
        let d = snaps[r + 1].traffic.delta(&snaps[r].traffic);
        let loss = workers.iter().map(|w| w.rounds()[r].loss).sum();
        records.push(RoundRecord {
            round: stats.round,
            loss,
            start_tick: stats.start,
            end_tick: stats.end,
            fwd_ticks: stats.fwd_ticks(),
            bwd_ticks: stats.bwd_ticks(),
            data_bytes: d.data_bytes_tx,
            heartbeat_bytes: d.heartbeat_bytes_tx,
            retransmit_bytes: d.retransmit_bytes,
            retransmissions: snaps[r + 1].retransmissions - snaps[r].retransmissions,
            packets_lost: d.packets_lost_injected,
            packets_dup: d.packets_dup_injected,
            param_clamps: stats.param_clamps,
            grad_clamps: snaps[r + 1].grad_clamps - snaps[r].grad_clamps,
        });
    }
    let pushed: Vec<u64> = workers.iter().map(|w| w.endpoint().metrics().elems_first_sent).collect();
    let pulled: Vec<u64> = workers.iter().map(|w| w.endpoint().metrics().elems_released).collect();
    let traffic = traffic_report(cfg.shape().total_params() as u64, &pushed, cfg.rounds, &pulled, 2 * cfg.rounds);
    Ok(TrainReport {
        records,
        traffic,
        total_ticks: sim.now(),
        stage_busy: opt.stage_busy(),
        io_busy: opt.io().busy_ticks(),
        store_dir: store,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub losses: Vec<f64>,
    pub store_dir: PathBuf,
}

/// Single-process reference: the same data, quantization and update rule
/// without any network. Writes `metrics.csv` (round and loss) and the model
/// state.
pub fn oracle(cfg: &RunConfig, out: &Path) -> Result<OracleReport, RunError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let shape = cfg.shape();
    let layout = shape.layout();
    let n = cfg.workers as usize;
    let global = n * cfg.batch_per_worker;
    let param_q = QuantConfig::new(cfg.frac_bits, 1).map_err(|e| RunError::Other(e.to_string()))?;
    let grad_q = QuantConfig::new(cfg.frac_bits, cfg.workers).map_err(|e| RunError::Other(e.to_string()))?;
    let data = dataset(cfg);
    let adam = cfg.adam();
    let total = shape.total_params();
    let mut p = initial_params(cfg);
    let mut m = vec![0.0f32; total];
    let mut v = vec![0.0f32; total];
    let mut losses = Vec::new();
    for round in 0..cfg.rounds {
        let served = quant::from_fixed(&quant::to_fixed(&p, &param_q).0, &param_q);
        let blocks = shape.blocks(&served);
        let mut loss = 0.0;
        let mut fixed: Vec<Vec<Vec<i32>>> = Vec::with_capacity(n);
        for w in 0..n {
            let (x, t) = data.shard(round, w, n, cfg.batch_per_worker);
            let (l, grads) = shard_pass(&shape, &blocks, &x, &t, global);
            loss += l;
            fixed.push(grads.iter().map(|g| quant::to_fixed(&to_f32(g), &grad_q).0).collect());
        }
        losses.push(loss);
        let step = round + 1;
        for spec in layout.layers() {
            let sum = quant::sum_fixed(fixed.iter().map(|g| &g[spec.layer_id][..]), spec.param_count);
            let g = quant::from_fixed(&sum, &grad_q);
            let r = spec.offset..spec.offset + spec.param_count;
            adam_update(&mut p[r.clone()], &mut m[r.clone()], &mut v[r], &g, &adam, step);
        }
    }
    let store = store_dir(cfg, out);
    write_store(&store, &layout, cfg.rounds, &p, &m, &v)?;
    let path = out.join("metrics.csv");
    let csv_err = |source| RunError::Csv { path: path.clone(), source };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["round", "loss"]).map_err(csv_err)?;
    for (r, l) in losses.iter().enumerate() {
        w.write_record([r.to_string(), l.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(OracleReport { losses, store_dir: store })
}

/// Files that differ between two model-state directories, by name.
pub fn diff_dirs(a: &Path, b: &Path) -> Result<Vec<String>, RunError> {
    let names = |d: &Path| -> Result<Vec<String>, RunError> {
        let mut v: Vec<String> = fs::read_dir(d)
            .map_err(io_err(d))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        Ok(v)
    };
    let (na, nb) = (names(a)?, names(b)?);
    let mut diff: Vec<String> = na.iter().filter(|x| !nb.contains(x)).chain(nb.iter().filter(|x| !na.contains(x))).cloned().collect();
    for name in na.iter().filter(|x| nb.contains(x)) {
        let (pa, pb) = (a.join(name), b.join(name));
        if fs::read(&pa).map_err(io_err(&pa))? != fs::read(&pb).map_err(io_err(&pb))? {
            diff.push(name.clone());
        }
    }
    diff.sort();
    Ok(diff)
}

/// Merges the loss columns of several metrics files into one plot-ready
/// table, `round,<label>...`, and a per-file summary.
pub fn report(inputs: &[(String, PathBuf)]) -> Result<(String, String), RunError> {
    let mut columns = Vec::new();
    let mut summary = String::from("run,rounds,final_loss,total_wall_ticks,retransmissions,grad_clamps\n");
    for (label, path) in inputs {
        let (header, rows) = read_csv(path)?;
        let col = |name: &str| header.iter().position(|h| h == name);
        let loss_col = col("loss").ok_or_else(|| RunError::Other(format!("{}: no loss column", path.display())))?;
        let sum = |name: &str| -> u64 {
            col(name).map_or(0, |c| rows.iter().filter_map(|r| r[c].parse::<u64>().ok()).sum())
        };
        let losses: Vec<String> = rows.iter().map(|r| r[loss_col].clone()).collect();
        summary.push_str(&format!(
            "{label},{},{},{},{},{}\n",
            rows.len(),
            losses.last().map_or("", String::as_str),
            sum("wall_ticks"),
            sum("retransmissions"),
            sum("grad_clamps"),
        ));
        columns.push((label.clone(), losses));
    }
    let rounds = columns.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let mut table = String::from("round");
    for (label, _) in &columns {
        table.push_str(&format!(",{label}"));
    }
    table.push('\n');
    for r in 0..rounds {
        table.push_str(&r.to_string());
        for (_, c) in &columns {
            table.push(',');
            table.push_str(c.get(r).map_or("", String::as_str));
        }
        table.push('\n');
    }
    Ok((table, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig::from_text("run.workers = 2\nrun.rounds = 3\nmodel.layers = 2\nmodel.hidden = 4\n").unwrap()
    }

    #[test]
    fn train_matches_reference_on_a_small_model() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        let t = train_sim(&cfg, &dir.path().join("train")).unwrap();
        let o = oracle(&cfg, &dir.path().join("ref")).unwrap();
        assert_eq!(diff_dirs(&t.store_dir, &o.store_dir).unwrap(), Vec::<String>::new());
        assert_eq!(t.losses(), o.losses);
        assert_eq!(t.records.len(), 3);
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = RoundRecord { round: 2, loss: 0.125, start_tick: 5, end_tick: 17, ..Default::default() };
        let p = dir.path().join("m.csv");
        write_metrics(&p, std::slice::from_ref(&rec)).unwrap();
        let (h, rows) = read_csv(&p).unwrap();
        assert_eq!(h, METRICS_HEADER);
        assert_eq!(rows[0][0], "2");
        assert_eq!(rows[0][1], "0.125");
        assert_eq!(rows[0][4], "12");
    }

    #[test]
    fn report_merges_loss_columns() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        fs::write(&a, "round,loss\n0,1.5\n1,1.0\n").unwrap();
        fs::write(&b, "round,loss,wall_ticks\n0,1.5,10\n").unwrap();
        let (table, summary) = report(&[("a".into(), a), ("b".into(), b)]).unwrap();
        assert_eq!(table, "round,a,b\n0,1.5,1.5\n1,1.0,\n");
        assert!(summary.contains("b,1,1.5,10,0,0"));
    }
}
