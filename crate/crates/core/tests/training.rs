use innet_core::access::RequestKind;
use innet_core::config::RunConfig;
use innet_core::fabric::{Addr, Sim};
use innet_core::optimizer::OptimizerNode;
use innet_core::quant::{self, QuantConfig};
use innet_core::run;
use innet_core::worker::model::{local_grad, Dataset};
use innet_core::worker::WorkerNode;
use tempfile::TempDir;

fn cfg(text: &str) -> RunConfig {
    let c = RunConfig::from_text(text).unwrap();
    c.validate().unwrap();
    c
}

fn sim(c: &RunConfig) -> (Sim, TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let s = run::build_sim(c, &dir.path().join("state")).unwrap();
    (s, dir)
}

fn worker(s: &Sim, i: u8) -> &WorkerNode {
    s.node::<WorkerNode>(Addr::Worker(i)).unwrap()
}

fn optimizer(s: &Sim) -> &OptimizerNode {
    s.node::<OptimizerNode>(Addr::Optimizer).unwrap()
}

#[test]
fn small_layer_fits_one_packet_per_transfer() {
    let c = cfg("run.workers = 1\nrun.rounds = 1\nmodel.layers = 1\nmodel.hidden = 7\n");
    let (mut s, _d) = sim(&c);
    s.run().unwrap();
    let w = worker(&s, 0);
    assert_eq!(w.request_trace(), &[(RequestKind::Pull, 56), (RequestKind::Pull, 56), (RequestKind::Push, 56)]);
    assert_eq!(w.endpoint().metrics().packets_sent, 1);
    assert_eq!(optimizer(&s).endpoint().metrics().packets_sent, 2);
}

#[test]
fn transfers_follow_layer_order() {
    let c = cfg("run.workers = 2\nrun.rounds = 3\nmodel.layers = 5\nmodel.hidden = 6\n");
    let (mut s, _d) = sim(&c);
    for i in 0..2 {
        s.node_mut::<WorkerNode>(Addr::Worker(i)).unwrap().record_pushes();
    }
    s.node_mut::<OptimizerNode>(Addr::Optimizer).unwrap().record_grads();
    s.run().unwrap();
    let want: Vec<(u64, usize)> = (0..3).flat_map(|r| (0..5).rev().map(move |l| (r, l))).collect();
    for i in 0..2 {
        let got: Vec<(u64, usize)> = worker(&s, i).pushed().iter().map(|(r, l, _)| (*r, *l)).collect();
        assert_eq!(got, want);
    }
    let got: Vec<(u64, usize)> = optimizer(&s).received_grads().iter().map(|(r, l, _)| (*r, *l)).collect();
    assert_eq!(got, want);
}

#[test]
fn optimizer_consumes_the_fixed_point_sum_of_worker_gradients() {
    let c = cfg("run.workers = 4\nrun.rounds = 4\nmodel.layers = 3\nmodel.hidden = 8\n");
    let (mut s, _d) = sim(&c);
    for i in 0..4 {
        s.node_mut::<WorkerNode>(Addr::Worker(i)).unwrap().record_pushes();
    }
    s.node_mut::<OptimizerNode>(Addr::Optimizer).unwrap().record_grads();
    s.run().unwrap();
    let q = QuantConfig::new(c.frac_bits, 4).unwrap();
    let received = optimizer(&s).received_grads();
    assert_eq!(received.len(), 12);
    for (k, (_, _, got)) in received.iter().enumerate() {
        let fixed: Vec<Vec<i32>> = (0..4).map(|i| quant::to_fixed(&worker(&s, i).pushed()[k].2, &q).0).collect();
        let sum = quant::sum_fixed(fixed.iter().map(|v| &v[..]), got.len());
        assert_eq!(got, &quant::from_fixed(&sum, &q));
    }
}

#[test]
fn first_round_gradients_replay_from_served_parameters() {
    let c = cfg("run.workers = 4\nrun.rounds = 1\nmodel.layers = 3\nmodel.hidden = 5\ndata.batch_per_worker = 3\n");
    let (mut s, _d) = sim(&c);
    for i in 0..4 {
        s.node_mut::<WorkerNode>(Addr::Worker(i)).unwrap().record_pushes();
    }
    s.run().unwrap();
    let shape = c.shape();
    let q1 = QuantConfig::new(c.frac_bits, 1).unwrap();
    let served = quant::from_fixed(&quant::to_fixed(&run::initial_params(&c), &q1).0, &q1);
    let data = Dataset::generate(c.data_seed, c.samples, c.hidden, c.teacher_scale);
    for i in 0..4u8 {
        let (x, t) = data.shard(0, i as usize, 4, 3);
        for (_, layer, g) in worker(&s, i).pushed() {
            assert_eq!(g, &local_grad(&shape, &shape.blocks(&served), *layer, &x, &t, 12));
        }
    }
}

#[test]
fn workers_hold_no_parameters_after_the_run() {
    let c = cfg("run.workers = 3\nrun.rounds = 2\nmodel.layers = 4\nmodel.hidden = 6\n");
    let (mut s, _d) = sim(&c);
    s.run().unwrap();
    for i in 0..3 {
        assert_eq!(worker(&s, i).held_param_bytes(), 0);
        assert!(worker(&s, i).access().is_idle());
    }
    assert_eq!(optimizer(&s).rounds_done(), 2);
    assert_eq!(optimizer(&s).store().step(), 2);
}

#[test]
fn same_seed_gives_the_same_event_trace() {
    let c = cfg("run.workers = 2\nrun.rounds = 2\nmodel.layers = 2\nmodel.hidden = 6\nfabric.trace = true\nfabric.loss_prob = 0.05\nfabric.jitter = 3\n");
    let trace = |c: &RunConfig| {
        let (mut s, _d) = sim(c);
        s.run().unwrap();
        s.trace().to_vec()
    };
    let a = trace(&c);
    assert_eq!(a, trace(&c));
    assert!(a.iter().any(|l| l.contains("lost:")));
    let mut other = c.clone();
    other.seed += 1;
    assert_ne!(a, trace(&other));
}

#[test]
fn overlap_and_serial_schedules_agree_on_the_result() {
    let base = cfg("run.workers = 2\nrun.rounds = 3\nmodel.layers = 4\nmodel.hidden = 6\nstore.rate_limit_bytes_per_sec = 20000000\n");
    let dir = tempfile::tempdir().unwrap();
    let mut variants = Vec::new();
    for (pipeline, overlap) in [(true, true), (false, true), (true, false), (false, false)] {
        let mut c = base.clone();
        c.pipeline = pipeline;
        c.overlap = overlap;
        variants.push(run::train_sim(&c, &dir.path().join(format!("{pipeline}-{overlap}"))).unwrap());
    }
    for v in &variants[1..] {
        assert!(run::diff_dirs(&variants[0].store_dir, &v.store_dir).unwrap().is_empty());
        assert_eq!(v.losses(), variants[0].losses());
    }
    // The serialized optimizer holds one layer at a time, so it is never faster.
    assert!(variants[0].total_ticks <= variants[1].total_ticks);
}

#[test]
fn loss_decreases_over_training() {
    let c = cfg("run.workers = 2\nrun.rounds = 40\nmodel.layers = 2\nmodel.hidden = 8\nopt.lr = 0.01\n");
    let dir = tempfile::tempdir().unwrap();
    let r = run::oracle(&c, dir.path()).unwrap();
    assert!(r.losses.last().unwrap() < &(0.5 * r.losses[0]), "{:?}", r.losses);
}
