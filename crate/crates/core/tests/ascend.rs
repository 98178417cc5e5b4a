use std::net::TcpListener;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use mmoforge_core::ascend::stack::{run_cluster_epoch, run_worker, ClientWorker, Cluster, ServerWorker, StackConfig, Transport};
use mmoforge_core::ascend::{
    inproc_pair, serve, shard, Arg, AscendError, Envelope, LayerNode, Link, NodeOptions, Role, ShardSpec, Verb,
};
use mmoforge_core::config::{default_config, Config};
use mmoforge_core::trainer::{GradPacket, GRAD_SCALE};
use rand::{Rng, SeedableRng};

fn ints(v: &[i64]) -> Vec<Bytes> {
    v.iter().map(|x| Bytes::copy_from_slice(&x.to_le_bytes())).collect()
}

fn int(b: &[u8]) -> i64 {
    i64::from_le_bytes(b.try_into().unwrap())
}

/// Squares every element of argument 0.
fn square(args: Vec<Arg<Bytes>>) -> Result<Vec<u8>, String> {
    match &args[0] {
        Arg::Seq(v) => Ok(v.iter().flat_map(|b| (int(b) * int(b)).to_le_bytes()).collect()),
        Arg::One(_) => Err("want a sequence".into()),
    }
}

fn unpack(b: &[u8]) -> Vec<i64> {
    b.chunks(8).map(int).collect()
}

fn squarers(n: usize) -> LayerNode {
    let mut node = LayerNode::new(Role::Server);
    for _ in 0..n {
        node.spawn_local(square).unwrap();
    }
    node
}

#[test]
fn synchronize_squares_shards_in_handle_order() {
    let mut node = squarers(2);
    let hs = node.distribute(&[Arg::Seq(ints(&[1, 2, 3, 4]))], Some(&ShardSpec::at([0]))).unwrap();
    assert_eq!(hs.iter().map(|h| h.worker()).collect::<Vec<_>>(), vec![0, 1]);
    let out: Vec<Vec<i64>> = node.synchronize(&hs).into_iter().map(|r| unpack(&r.unwrap())).collect();
    assert_eq!(out, vec![vec![1, 4], vec![9, 16]]);
    assert!(node.synchronize(&[]).is_empty());
}

#[test]
fn empty_registry_gives_no_handles() {
    let mut node = LayerNode::new(Role::Cluster);
    assert!(node.distribute(&[Arg::One(Bytes::new())], None).unwrap().is_empty());
    assert!(node.step(&[], None).unwrap().is_empty());
}

#[test]
fn distribute_does_not_wait() {
    let gate = Arc::new(Barrier::new(5));
    let mut node = LayerNode::new(Role::Server);
    for _ in 0..4 {
        let g = gate.clone();
        node.spawn_local(move |a| {
            g.wait();
            square(a)
        })
        .unwrap();
    }
    let hs = node.distribute(&[Arg::Seq(ints(&[1, 2, 3, 4]))], Some(&ShardSpec::at([0]))).unwrap();
    assert_eq!(hs.len(), 4);
    // no worker can have answered: all are parked on the barrier
    assert!(hs.iter().all(|h| !node.is_resolved(h)));
    gate.wait();
    let out = node.synchronize(&hs);
    assert!(out.iter().all(|r| r.is_ok()));
}

#[test]
fn double_await_is_an_error() {
    let mut node = squarers(2);
    let hs = node.distribute(&[Arg::Seq(ints(&[5]))], Some(&ShardSpec::at([0]))).unwrap();
    let first = node.synchronize(&hs);
    assert!(first.iter().all(|r| r.is_ok()));
    let second = node.synchronize(&hs);
    assert!(second.iter().all(|r| matches!(r, Err(AscendError::Handle(_)))));
}

#[test]
fn handles_do_not_cross_nodes() {
    let mut a = squarers(1);
    let mut b = squarers(1);
    let hs = a.distribute(&[Arg::Seq(ints(&[2]))], None).unwrap();
    assert!(matches!(b.synchronize(&hs)[0], Err(AscendError::Handle(_))));
    assert!(a.synchronize(&hs)[0].is_ok());
}

#[test]
fn crashed_worker_leaves_siblings_intact() {
    let mut node = LayerNode::new(Role::Server);
    for w in 0..3 {
        node.spawn_local(move |a| {
            if w == 1 {
                panic!("injected crash");
            }
            square(a)
        })
        .unwrap();
    }
    let out = node.step(&[Arg::Seq(ints(&[1, 2, 3, 4, 5, 6]))], Some(&ShardSpec::at([0]))).unwrap();
    assert_eq!(unpack(out[0].as_ref().unwrap()), vec![1, 4]);
    assert!(matches!(out[1], Err(AscendError::Transport(_))), "{:?}", out[1]);
    assert_eq!(unpack(out[2].as_ref().unwrap()), vec![25, 36]);
    assert_eq!(node.alive(), vec![true, false, true]);
    // later calls to the dead worker fail at once, the others keep working
    let t = Instant::now();
    let again = node.step(&[Arg::Seq(ints(&[7, 8, 9]))], Some(&ShardSpec::at([0]))).unwrap();
    assert!(t.elapsed() < Duration::from_secs(5));
    assert_eq!(unpack(again[0].as_ref().unwrap()), vec![49]);
    assert!(again[1].is_err());
    assert_eq!(unpack(again[2].as_ref().unwrap()), vec![81]);
}

#[test]
fn slow_worker_times_out_alone() {
    let opts = NodeOptions { timeout: Duration::from_millis(300), ..Default::default() };
    let mut node = LayerNode::with_options(Role::Server, opts);
    for w in 0..3 {
        node.spawn_local(move |a| {
            if w == 2 {
                thread::sleep(Duration::from_millis(1200));
            }
            square(a)
        })
        .unwrap();
    }
    let t = Instant::now();
    let out = node.step(&[Arg::Seq(ints(&[1, 2, 3]))], Some(&ShardSpec::at([0]))).unwrap();
    assert!(t.elapsed() < Duration::from_millis(1000));
    assert_eq!(unpack(out[0].as_ref().unwrap()), vec![1]);
    assert_eq!(unpack(out[1].as_ref().unwrap()), vec![4]);
    assert!(matches!(out[2], Err(AscendError::Timeout(_))));
    // the late reply is discarded; the next call gets its own answer
    node.set_timeout(Duration::from_secs(10));
    let out = node.step(&[Arg::Seq(ints(&[4, 5, 6]))], Some(&ShardSpec::at([0]))).unwrap();
    assert_eq!(unpack(out[2].as_ref().unwrap()), vec![36]);
}

#[test]
fn remote_errors_are_per_entry() {
    let mut node = squarers(2);
    // argument 0 is a value, so every worker's handler refuses it
    let out = node.step(&[Arg::One(Bytes::from_static(b"x"))], None).unwrap();
    assert!(out.iter().all(|r| matches!(r, Err(AscendError::Remote(_)))));
    assert!(matches!(node.step(&[Arg::One(Bytes::new())], Some(&ShardSpec::at([0]))), Err(AscendError::NotSequence(0))));
}

#[test]
fn step_matches_distribute_then_synchronize() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut a = squarers(3);
    let mut b = squarers(3);
    for _ in 0..60 {
        let n = rng.gen_range(0..40);
        let v: Vec<i64> = (0..n).map(|_| rng.gen_range(-1000..1000)).collect();
        let args = [Arg::Seq(ints(&v))];
        let spec = if rng.gen_bool(0.5) { Some(ShardSpec::at([0])) } else { None };
        let s: Vec<_> = a.step(&args, spec.as_ref()).unwrap().into_iter().map(|r| r.unwrap()).collect();
        let hs = b.distribute(&args, spec.as_ref()).unwrap();
        let d: Vec<_> = b.synchronize(&hs).into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(s, d);
        // idempotent workers give the same answer twice
        let again: Vec<_> = a.step(&args, spec.as_ref()).unwrap().into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(s, again);
        // and the squares of the reassembled shards are the squares of the input
        if spec.is_some() {
            let flat: Vec<i64> = s.iter().flat_map(|b| unpack(b)).collect();
            assert_eq!(flat, v.iter().map(|x| x * x).collect::<Vec<_>>());
        }
    }
}

#[test]
fn sequence_numbers_increase_per_channel() {
    let mut node = squarers(3);
    for _ in 0..5 {
        node.step(&[Arg::Seq(ints(&[1, 2, 3]))], Some(&ShardSpec::at([0]))).unwrap();
    }
    let j = node.journal();
    assert_eq!(j.len(), 15);
    for w in 0..3 {
        let seqs: Vec<u64> = j.iter().filter(|h| h.worker == w).map(|h| h.seq).collect();
        assert_eq!(seqs.len(), 5);
        assert!(seqs.windows(2).all(|p| p[0] < p[1]));
    }
    // calls from a server go to the client layer and nowhere else
    assert!(j.iter().all(|h| h.layer == Role::Client.layer() && h.verb == Verb::Call));
}

#[test]
fn layer_ids_are_checked_both_ways() {
    // a worker told it is a client refuses calls from the cluster tier
    let mut node = LayerNode::new(Role::Cluster);
    let (mine, theirs) = inproc_pair();
    thread::spawn(move || serve(theirs, Role::Client.layer(), square));
    node.register(mine).unwrap();
    let out = node.step(&[Arg::Seq(ints(&[3]))], None).unwrap();
    // the refusal itself comes back stamped with the wrong layer
    assert!(matches!(&out[0], Err(AscendError::Layer(_))), "{:?}", out[0]);

    // a reply claiming to come from two layers down is rejected
    let mut node = LayerNode::new(Role::Cluster);
    let (mine, mut theirs) = inproc_pair();
    thread::spawn(move || {
        while let Ok(env) = theirs.rx.recv() {
            let reply = Envelope { verb: Verb::Return, layer: 2, worker: env.worker, seq: env.seq, payload: vec![] };
            if theirs.tx.send(&reply).is_err() {
                return;
            }
        }
    });
    node.register(mine).unwrap();
    let out = node.step(&[Arg::Seq(ints(&[3]))], None).unwrap();
    assert!(matches!(out[0], Err(AscendError::Layer(_))), "{:?}", out[0]);
}

#[test]
fn silent_worker_is_evicted_by_heartbeat() {
    let opts = NodeOptions { timeout: Duration::from_secs(20), heartbeat_every: Duration::from_millis(40), max_missed: 3 };
    let mut node = LayerNode::with_options(Role::Server, opts);
    node.spawn_local(square).unwrap();
    // reads everything and answers nothing
    let (mine, mut theirs) = inproc_pair();
    thread::spawn(move || while theirs.rx.recv().is_ok() {});
    node.register(mine).unwrap();
    let t = Instant::now();
    let out = node.step(&[Arg::Seq(ints(&[2, 3]))], Some(&ShardSpec::at([0]))).unwrap();
    assert!(t.elapsed() < Duration::from_secs(5));
    assert_eq!(unpack(out[0].as_ref().unwrap()), vec![4]);
    assert!(matches!(&out[1], Err(AscendError::Transport(m)) if m.contains("heartbeat")), "{:?}", out[1]);
    // the live worker answered heartbeats and is still registered
    assert_eq!(node.alive(), vec![true, false]);
}

#[test]
fn tcp_workers() {
    let mut node = LayerNode::new(Role::Server);
    for _ in 0..2 {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            let link = Link::accept(&listener).unwrap();
            serve(link, Role::Client.layer(), square)
        });
        node.register(Link::connect(addr).unwrap()).unwrap();
    }
    let out = node.step(&[Arg::Seq(ints(&[1, 2, 3, 4, 5]))], Some(&ShardSpec::at([0]))).unwrap();
    assert_eq!(unpack(out[0].as_ref().unwrap()), vec![1, 4, 9]);
    assert_eq!(unpack(out[1].as_ref().unwrap()), vec![16, 25]);
}

#[test]
fn replicated_arguments_share_storage() {
    let big = Bytes::from(vec![7u8; 1 << 16]);
    let s = shard(&[Arg::One(big.clone())], None, 4).unwrap();
    for w in &s {
        match &w[0] {
            Arg::One(b) => assert_eq!(b.as_ptr(), big.as_ptr()),
            Arg::Seq(_) => unreachable!(),
        }
    }
}

fn stack_config(seed: u64) -> Config {
    let mut c = default_config();
    c.map_width = 14;
    c.map_height = 14;
    c.border_thickness = 3;
    c.obs_crop = 7;
    c.spawn_cap = 12;
    c.embed_dim = 8;
    c.hidden_dim = 12;
    c.conv_channels = 3;
    c.n_populations = 2;
    c.batch_actions = 96;
    c.seed = seed;
    c
}

#[test]
fn two_by_two_reproduces_one_by_one() {
    let cfg = stack_config(3);
    let mut small = Cluster::new(&cfg, &StackConfig::local(1, 1).with_envs(2)).unwrap();
    let mut big = Cluster::new(&cfg, &StackConfig::local(2, 2).with_envs(2)).unwrap();
    assert_eq!(small.params().hash_hex(), big.params().hash_hex());
    for _ in 0..3 {
        let a = run_cluster_epoch(&mut small).unwrap();
        let b = run_cluster_epoch(&mut big).unwrap();
        assert_eq!(a.params_hash, b.params_hash);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(b.contributing, 2);
        assert!(a.metrics.actions >= cfg.batch_actions as u64);
        // every client holds exactly the cluster's parameters
        assert_eq!(a.client_hashes, vec![a.params_hash.clone()]);
        assert_eq!(b.client_hashes, vec![b.params_hash.clone(); 4]);
    }
    assert!(small.incidents().is_empty() && big.incidents().is_empty());
    assert_eq!(big.env_quota(), 48);
}

#[test]
fn parameters_move_and_stay_finite() {
    let cfg = stack_config(9);
    let mut c = Cluster::new(&cfg, &StackConfig::local(1, 2)).unwrap();
    let before = c.params().clone();
    let r = c.run_epoch().unwrap();
    assert!(c.params().is_finite());
    assert_ne!(before.hash_hex(), r.params_hash);
    // shared tables update as one block for all populations
    assert_ne!(before.shared, c.params().shared);
}

#[test]
fn packet_average_is_sum_over_contributors() {
    let a = GradPacket { shared: vec![4, -2], pops: [(0, vec![6])].into(), ..Default::default() };
    let b = GradPacket { shared: vec![2, 2], pops: [(0, vec![0]), (1, vec![8])].into(), ..Default::default() };
    let (shared, pops) = GradPacket::average(&[a, b]);
    let s = |q: f64| q / GRAD_SCALE;
    assert_eq!(shared, vec![s(3.0), s(0.0)]);
    assert_eq!(pops[&0], vec![s(3.0)]);
    assert_eq!(pops[&1], vec![s(4.0)]);
}

/// A server that works normally except that its epochs always fail.
fn failing_server(listener: TcpListener) {
    let link = Link::accept(&listener).unwrap();
    let mut inner = ServerWorker::default();
    let _ = serve(link, Role::Server.layer(), move |args| {
        if matches!(&args[0], Arg::One(b) if &b[..] == b"epoch") {
            return Err("injected epoch failure".into());
        }
        inner.handle(args)
    });
}

#[test]
fn failed_server_is_dropped_and_logged() {
    let cfg = stack_config(5);
    let mut servers = Vec::new();
    let mut clients = Vec::new();
    for s in 0..3 {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        servers.push(l.local_addr().unwrap().to_string());
        if s == 1 {
            thread::spawn(move || failing_server(l));
        } else {
            thread::spawn(move || run_worker(Role::Server, &l));
        }
        let cl = TcpListener::bind("127.0.0.1:0").unwrap();
        clients.push(vec![cl.local_addr().unwrap().to_string()]);
        thread::spawn(move || run_worker(Role::Client, &cl));
    }
    let stack = StackConfig { transport: Transport::Tcp { servers, clients }, ..StackConfig::local(3, 1) };
    let mut c = Cluster::new(&cfg, &stack).unwrap();
    let r = c.run_epoch().unwrap();
    assert_eq!(r.contributing, 2);
    assert_eq!(r.failed, vec![1]);
    assert_eq!(c.incidents().len(), 1);
    assert!(c.incidents()[0].contains("server 1"));
    // the failing server still receives the broadcast
    assert_eq!(r.client_hashes, vec![r.params_hash.clone(); 3]);
}

#[test]
fn client_worker_rejects_calls_before_init() {
    let mut w = ClientWorker::default();
    assert!(w.handle(vec![Arg::One(Bytes::from_static(b"act")), Arg::Seq(vec![])]).is_err());
    assert!(w.handle(vec![Arg::One(Bytes::from_static(b"dance"))]).is_err());
}
