//! Multi-process deployment over UDP: one process per role, wired by a
//! cluster manifest. The launcher picks loopback ports, spawns the roles and
//! merges their per-role metrics into `metrics.csv`.

use crate::config::{Mode, Role, RunConfig};
use crate::fabric::udp::{free_loopback_addrs, run_node, Manifest, UdpOptions};
use crate::fabric::{Addr, Node, TrafficCounters};
use crate::optimizer::OptimizerNode;
use crate::run::{self, io_err, read_csv, write_metrics, RoundRecord, RunError, METRICS_HEADER};
use crate::transport::Tick;
use crate::worker::WorkerNode;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

fn role_addr(cfg: &RunConfig) -> Result<Addr, RunError> {
    Ok(match cfg.role {
        Role::Switch => Addr::Switch,
        Role::Optimizer => Addr::Optimizer,
        Role::Worker => Addr::Worker(cfg.worker_id as u8),
        r => return Err(RunError::Other(format!("role {r} does not run as a UDP node"))),
    })
}

fn role_csv(out: &Path, addr: Addr) -> PathBuf {
    out.join(format!("{addr}.csv"))
}

fn options(cfg: &RunConfig, addr: Addr) -> UdpOptions {
    let base = UdpOptions {
        tick_us: cfg.tick_us,
        loss_prob: cfg.loss_prob,
        dup_prob: cfg.dup_prob,
        seed: cfg.seed ^ (0x9e37_79b9 * (1 + addr_index(addr))),
        ..UdpOptions::default()
    };
    match addr {
        Addr::Switch => UdpOptions { linger: Duration::ZERO, idle_exit: Some(Duration::from_secs(3)), ..base },
        _ => base,
    }
}

fn addr_index(addr: Addr) -> u64 {
    match addr {
        Addr::Switch => 0,
        Addr::Optimizer => 1,
        Addr::Worker(i) => 2 + i as u64,
    }
}

/// Per-round bookkeeping for one endpoint role.
#[derive(Default)]
struct Recorder {
    records: Vec<RoundRecord>,
    traffic: TrafficCounters,
    retransmissions: u64,
    clamps: u64,
}

impl Recorder {
    fn close_round(&mut self, mut rec: RoundRecord, traffic: &TrafficCounters, retransmissions: u64, clamps: u64) {
        let d = traffic.delta(&self.traffic);
        rec.data_bytes = d.data_bytes_tx;
        rec.heartbeat_bytes = d.heartbeat_bytes_tx;
        rec.retransmit_bytes = d.retransmit_bytes;
        rec.packets_lost = d.packets_lost_injected;
        rec.packets_dup = d.packets_dup_injected;
        rec.retransmissions = retransmissions - self.retransmissions;
        self.traffic = traffic.clone();
        self.retransmissions = retransmissions;
        rec.grad_clamps = clamps - self.clamps;
        self.clamps = clamps;
        self.records.push(rec);
    }

    fn observe(&mut self, node: &dyn Node, traffic: &TrafficCounters, _now: Tick) {
        let any = node.as_any();
        if let Some(w) = any.downcast_ref::<WorkerNode>() {
            while let Some(r) = w.rounds().get(self.records.len()) {
                let rec = RoundRecord {
                    round: r.round,
                    loss: r.loss,
                    start_tick: r.start,
                    end_tick: r.end,
                    fwd_ticks: r.fwd_end - r.start,
                    bwd_ticks: r.end - r.fwd_end,
                    ..RoundRecord::default()
                };
                self.close_round(rec, traffic, w.endpoint().metrics().retransmissions, w.access().metrics().clamp_count);
            }
        } else if let Some(o) = any.downcast_ref::<OptimizerNode>() {
            while let Some(s) = o.round_stats().get(self.records.len()) {
                let rec = RoundRecord {
                    round: s.round,
                    start_tick: s.start,
                    end_tick: s.end,
                    fwd_ticks: s.fwd_ticks(),
                    bwd_ticks: s.bwd_ticks(),
                    param_clamps: s.param_clamps,
                    ..RoundRecord::default()
                };
                self.close_round(rec, traffic, o.endpoint().metrics().retransmissions, 0);
            }
        }
    }
}

/// Runs the single role named by `run.role` against `udp.manifest`. Endpoint
/// roles write `<role>.csv` into `out`; the optimizer also owns the store.
pub fn run_role(cfg: &RunConfig, out: &Path) -> Result<(), RunError> {
    cfg.validate()?;
    let addr = role_addr(cfg)?;
    let mpath = Path::new(&cfg.udp_manifest);
    let text = fs::read_to_string(mpath).map_err(io_err(mpath))?;
    let manifest = Manifest::parse(&text).map_err(|e| RunError::Other(format!("{}: {e}", mpath.display())))?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut node: Box<dyn Node> = match addr {
        Addr::Switch => Box::new(run::make_switch(cfg)?),
        Addr::Optimizer => Box::new(run::make_optimizer(cfg, &run::store_dir(cfg, out))?),
        Addr::Worker(i) => Box::new(run::make_worker(cfg, i, run::dataset(cfg))?),
    };
    let mut rec = Recorder::default();
    run_node(node.as_mut(), addr, &manifest, &options(cfg, addr), |n, t, now| rec.observe(n, t, now))
        .map_err(|e| RunError::Other(e.to_string()))?;
    if addr != Addr::Switch {
        write_metrics(&role_csv(out, addr), &rec.records)?;
    }
    Ok(())
}

fn parse_record(header: &[String], row: &[String]) -> Result<RoundRecord, RunError> {
    let bad = |m: String| RunError::Other(m);
    if header != METRICS_HEADER {
        return Err(bad(format!("unexpected metrics header {header:?}")));
    }
    let n = |i: usize| row[i].parse::<u64>().map_err(|e| bad(format!("column {}: {e}", header[i])));
    Ok(RoundRecord {
        round: n(0)?,
        loss: row[1].parse().map_err(|e| bad(format!("loss: {e}")))?,
        start_tick: n(2)?,
        end_tick: n(3)?,
        fwd_ticks: n(5)?,
        bwd_ticks: n(6)?,
        data_bytes: n(7)?,
        heartbeat_bytes: n(8)?,
        retransmit_bytes: n(9)?,
        retransmissions: n(10)?,
        packets_lost: n(11)?,
        packets_dup: n(12)?,
        param_clamps: n(13)?,
        grad_clamps: n(14)?,
    })
}

fn read_records(path: &Path) -> Result<Vec<RoundRecord>, RunError> {
    let (h, rows) = read_csv(path)?;
    rows.iter().map(|r| parse_record(&h, r)).collect()
}

/// Combines per-role rows: ticks and parameter clamps from the optimizer,
/// loss summed over workers in id order, counters summed over all roles.
pub fn merge_records(optimizer: &[RoundRecord], workers: &[Vec<RoundRecord>]) -> Vec<RoundRecord> {
    optimizer
        .iter()
        .enumerate()
        .map(|(r, o)| {
            let rows: Vec<&RoundRecord> = workers.iter().filter_map(|w| w.get(r)).collect();
            let sum = |f: fn(&RoundRecord) -> u64| f(o) + rows.iter().map(|w| f(w)).sum::<u64>();
            RoundRecord {
                loss: rows.iter().map(|w| w.loss).sum(),
                data_bytes: sum(|x| x.data_bytes),
                heartbeat_bytes: sum(|x| x.heartbeat_bytes),
                retransmit_bytes: sum(|x| x.retransmit_bytes),
                retransmissions: sum(|x| x.retransmissions),
                packets_lost: sum(|x| x.packets_lost),
                packets_dup: sum(|x| x.packets_dup),
                grad_clamps: sum(|x| x.grad_clamps),
                ..o.clone()
            }
        })
        .collect()
}

struct Proc {
    addr: Addr,
    child: Child,
    log: PathBuf,
}

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn log_tail(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(20)..].join("\n")
}

/// Starts every role of `cfg` as a child process of `exe` on loopback and
/// waits for the run to finish. Writes `cluster.txt`, `config.txt`, per-role
/// logs and CSVs, and the merged `metrics.csv` into `out`.
pub fn launch_udp(cfg: &RunConfig, exe: &Path, out: &Path) -> Result<Vec<RoundRecord>, RunError> {
    cfg.validate()?;
    fs::create_dir_all(out.join("logs")).map_err(io_err(out))?;
    let out = fs::canonicalize(out).map_err(io_err(out))?;
    let n = cfg.workers as usize;
    let addrs = free_loopback_addrs(n + 2).map_err(io_err(&out))?;
    let mut manifest = Manifest::new();
    manifest.insert(Addr::Switch, addrs[0]);
    manifest.insert(Addr::Optimizer, addrs[1]);
    for i in 0..n {
        manifest.insert(Addr::Worker(i as u8), addrs[2 + i]);
    }
    let mpath = out.join("cluster.txt");
    fs::write(&mpath, manifest.render()).map_err(io_err(&mpath))?;

    let mut shared = cfg.clone();
    shared.mode = Mode::Udp;
    shared.role = Role::AllInOne;
    shared.udp_manifest = mpath.to_string_lossy().into_owned();
    if shared.store_dir.is_empty() {
        shared.store_dir = run::store_dir(cfg, &out).to_string_lossy().into_owned();
    }
    let cpath = out.join("config.txt");
    fs::write(&cpath, shared.render()).map_err(io_err(&cpath))?;

    let roles: Vec<Addr> =
        [Addr::Switch, Addr::Optimizer].into_iter().chain((0..n).map(|i| Addr::Worker(i as u8))).collect();
    let mut procs = Vec::new();
    for addr in roles {
        let (role, id) = match addr {
            Addr::Switch => ("switch", 0),
            Addr::Optimizer => ("optimizer", 0),
            Addr::Worker(i) => ("worker", i as u32),
        };
        let log = out.join("logs").join(format!("{addr}.log"));
        let file = fs::File::create(&log).map_err(io_err(&log))?;
        let err_file = file.try_clone().map_err(io_err(&log))?;
        let child = Command::new(exe)
            .arg("train")
            .arg("--config")
            .arg(&cpath)
            .arg("--out")
            .arg(&out)
            .arg("--set")
            .arg(format!("run.role={role}"))
            .arg("--set")
            .arg(format!("udp.worker_id={id}"))
            .stdout(Stdio::from(file))
            .stderr(Stdio::from(err_file))
            .spawn()
            .map_err(io_err(exe))?;
        procs.push(Proc { addr, child, log });
    }

    let deadline = Instant::now() + Duration::from_secs(180);
    let mut pending: Vec<usize> = (1..procs.len()).collect();
    while !pending.is_empty() {
        let mut still = Vec::new();
        for i in pending {
            let p = &mut procs[i];
            match p.child.try_wait().map_err(io_err(exe))? {
                Some(status) if status.success() => {}
                Some(status) => {
                    return Err(RunError::Other(format!("{} exited with {status}:\n{}", p.addr, log_tail(&p.log))));
                }
                None => still.push(i),
            }
        }
        pending = still;
        if Instant::now() > deadline {
            return Err(RunError::Other(format!("UDP run timed out; waiting on {} processes", pending.len())));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    drop(procs);

    let opt = read_records(&role_csv(&out, Addr::Optimizer))?;
    let workers: Vec<Vec<RoundRecord>> =
        (0..n).map(|i| read_records(&role_csv(&out, Addr::Worker(i as u8)))).collect::<Result<_, _>>()?;
    let merged = merge_records(&opt, &workers);
    write_metrics(&out.join("metrics.csv"), &merged)?;
    Ok(merged)
}
