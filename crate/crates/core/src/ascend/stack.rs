//! Cluster, server and client tiers for training.
//!
//! Servers own environments. Each tick a server shards the pending
//! observations of its environments across its clients, which run the policy
//! and send back decisions. When every environment has finished its quota of
//! actions the server shards the finished trajectories for gradients and
//! returns the summed packet. The cluster merges packets, steps the
//! optimizer and broadcasts the new parameters to every client.

use std::net::TcpListener;
use std::sync::Arc;
use std::time::Instant;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::{Arg, AscendError, LayerNode, Link, NodeOptions, Role, ShardSpec};
use crate::config::Config;
use crate::neural::{NetSpec, Policy, PolicyParams};
use crate::obsio::{build_schema, Schema, WireObservation};
use crate::trainer::{
    compute_packet, train_step, AdamHyper, Decision, GradPacket, OptimState, RolloutEnv, StepMetrics, TrainError,
    Trajectory,
};

#[derive(Debug, thiserror::Error)]
pub enum StackError {
    #[error(transparent)]
    Ascend(#[from] AscendError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("codec: {0}")]
    Codec(String),
    #[error("stack: {0}")]
    Setup(String),
    #[error("every server failed: {0}")]
    AllFailed(String),
}

fn enc<T: Serialize>(v: &T) -> Bytes {
    Bytes::from(bincode::serialize(v).expect("in-memory serialization"))
}

fn dec<T: for<'de> Deserialize<'de>>(b: &[u8]) -> Result<T, String> {
    bincode::deserialize(b).map_err(|e| format!("decode: {e}"))
}

fn tag(name: &str) -> Arg<Bytes> {
    Arg::One(Bytes::copy_from_slice(name.as_bytes()))
}

fn one(args: &[Arg<Bytes>], i: usize) -> Result<&Bytes, String> {
    match args.get(i) {
        Some(Arg::One(b)) => Ok(b),
        _ => Err(format!("argument {i} missing or not a value")),
    }
}

/// A value, or a one-element sequence (a value that went through `shard`).
fn single(args: &[Arg<Bytes>], i: usize) -> Result<&Bytes, String> {
    match args.get(i) {
        Some(Arg::One(b)) => Ok(b),
        Some(Arg::Seq(v)) if v.len() == 1 => Ok(&v[0]),
        _ => Err(format!("argument {i} is not a single value")),
    }
}

fn seq(args: &[Arg<Bytes>], i: usize) -> Result<&[Bytes], String> {
    match args.get(i) {
        Some(Arg::Seq(v)) => Ok(v),
        _ => Err(format!("argument {i} missing or not a sequence")),
    }
}

/// Collects successful returns or the first failure.
fn all_ok(results: Vec<Result<Bytes, AscendError>>, what: &str) -> Result<Vec<Bytes>, String> {
    results
        .into_iter()
        .enumerate()
        .map(|(w, r)| r.map_err(|e| format!("{what}: worker {w}: {e}")))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActRequest {
    pub wire: WireObservation,
    pub uniforms: [f64; 3],
}

/// Flat parameter buffers as they travel.
#[derive(Serialize, Deserialize)]
struct ParamBlob {
    shared: Vec<f32>,
    pops: Vec<Vec<f32>>,
}

fn params_to_bytes(p: &PolicyParams<f32>) -> Bytes {
    enc(&ParamBlob { shared: p.shared.clone(), pops: p.pops.clone() })
}

fn params_from_bytes(spec: &Arc<NetSpec>, b: &[u8]) -> Result<PolicyParams<f32>, String> {
    let blob: ParamBlob = dec(b)?;
    if blob.shared.len() != spec.shared_layout.len
        || blob.pops.len() != spec.n_populations
        || blob.pops.iter().any(|p| p.len() != spec.pop_layout.len)
    {
        return Err("parameter blob does not match the network".into());
    }
    Ok(PolicyParams { spec: spec.clone(), shared: blob.shared, pops: blob.pops })
}

struct ClientCtx {
    cfg: Config,
    spec: Arc<NetSpec>,
    schema: Schema,
    policy: Option<Policy<f32>>,
}

/// State of one client worker; feed it calls with [`ClientWorker::handle`].
#[derive(Default)]
pub struct ClientWorker {
    ctx: Option<ClientCtx>,
}

impl ClientWorker {
    pub fn handle(&mut self, args: Vec<Arg<Bytes>>) -> Result<Vec<u8>, String> {
        let verb = one(&args, 0)?.clone();
        match &verb[..] {
            b"init" => {
                let cfg = Config::from_json_str(std::str::from_utf8(one(&args, 1)?).map_err(|e| e.to_string())?)
                    .map_err(|e| e.to_string())?;
                self.ctx = Some(ClientCtx { spec: Arc::new(NetSpec::new(&cfg)), schema: build_schema(&cfg), cfg, policy: None });
                Ok(Vec::new())
            }
            b"params" => {
                let ctx = self.ctx.as_mut().ok_or("client not initialised")?;
                let p = params_from_bytes(&ctx.spec, one(&args, 1)?)?;
                let hash = p.hash_hex();
                ctx.policy = Some(Policy::new(Arc::new(p)));
                Ok(hash.into_bytes())
            }
            b"act" => {
                let ctx = self.ctx.as_mut().ok_or("client not initialised")?;
                let policy = ctx.policy.as_mut().ok_or("no parameters yet")?;
                let mut out = Vec::new();
                for b in seq(&args, 1)? {
                    let req: ActRequest = dec(b)?;
                    let obs = req.wire.decode(&ctx.schema).map_err(|e| e.to_string())?;
                    out.push(Decision::from_policy(policy, &obs, req.uniforms).map_err(|e| e.to_string())?);
                }
                Ok(enc(&out).to_vec())
            }
            b"grad" => {
                let ctx = self.ctx.as_mut().ok_or("client not initialised")?;
                let policy = ctx.policy.as_mut().ok_or("no parameters yet")?;
                let trajs = seq(&args, 1)?.iter().map(|b| dec::<Trajectory>(b)).collect::<Result<Vec<_>, _>>()?;
                let packet = compute_packet(policy, &trajs, &ctx.cfg, &ctx.schema).map_err(|e| e.to_string())?;
                Ok(enc(&packet).to_vec())
            }
            other => Err(format!("unknown client call {:?}", String::from_utf8_lossy(other))),
        }
    }
}

/// How a server finds its clients.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClientPlan {
    /// Spawn this many client threads.
    Local(usize),
    /// Connect to client workers at these addresses.
    Remote(Vec<String>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ServerInit {
    config: String,
    envs: Vec<u32>,
    clients: ClientPlan,
    timeout_ms: u64,
}

struct ServerCtx {
    clients: LayerNode,
    envs: Vec<RolloutEnv>,
    bench: Vec<Bytes>,
}

/// State of one server worker.
#[derive(Default)]
pub struct ServerWorker {
    ctx: Option<ServerCtx>,
}

fn shard1() -> ShardSpec {
    ShardSpec::at([1])
}

impl ServerCtx {
    fn act(&mut self, reqs: Vec<Bytes>) -> Result<Vec<Decision>, String> {
        let results = self.clients.step(&[tag("act"), Arg::Seq(reqs)], Some(&shard1())).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        for b in all_ok(results, "act")? {
            out.extend(dec::<Vec<Decision>>(&b)?);
        }
        Ok(out)
    }

    fn epoch(&mut self, quota: usize) -> Result<GradPacket, String> {
        loop {
            let active: Vec<usize> = (0..self.envs.len()).filter(|&i| self.envs[i].finished_actions() < quota).collect();
            if active.is_empty() {
                break;
            }
            let mut pending = Vec::new();
            let mut reqs = Vec::new();
            for &i in &active {
                let p = self.envs[i].pending().map_err(|e| e.to_string())?;
                reqs.extend(p.iter().map(|a| enc(&ActRequest { wire: a.wire.clone(), uniforms: a.uniforms })));
                pending.push(p);
            }
            let decisions = self.act(reqs)?;
            let mut at = 0;
            for (&i, p) in active.iter().zip(pending) {
                let n = p.len();
                self.envs[i].apply(p, &decisions[at..at + n]).map_err(|e| e.to_string())?;
                at += n;
            }
        }
        let trajs: Vec<Bytes> = self.envs.iter_mut().flat_map(|e| e.take_finished()).map(|t| enc(&t)).collect();
        let results = self.clients.step(&[tag("grad"), Arg::Seq(trajs)], Some(&shard1())).map_err(|e| e.to_string())?;
        let packets = all_ok(results, "grad")?.iter().map(|b| dec::<GradPacket>(b)).collect::<Result<Vec<_>, _>>()?;
        Ok(GradPacket::sum(&packets))
    }

    /// Observations for a benchmark batch, taken from the first environment
    /// as it runs with default actions.
    fn bench_prep(&mut self, decisions: usize) -> Result<(), String> {
        let env = self.envs.first_mut().ok_or("server has no environment")?;
        let mut reqs = Vec::with_capacity(decisions);
        while reqs.len() < decisions {
            let p = env.pending().map_err(|e| e.to_string())?;
            reqs.extend(p.iter().take(decisions - reqs.len()).map(|a| enc(&ActRequest { wire: a.wire.clone(), uniforms: a.uniforms })));
            env.state.step(&Default::default());
        }
        self.bench = reqs;
        Ok(())
    }
}

impl ServerWorker {
    pub fn handle(&mut self, args: Vec<Arg<Bytes>>) -> Result<Vec<u8>, String> {
        let verb = one(&args, 0)?.clone();
        if &verb[..] == b"init" {
            let init: ServerInit = serde_json::from_slice(single(&args, 1)?).map_err(|e| e.to_string())?;
            let cfg = Config::from_json_str(&init.config).map_err(|e| e.to_string())?;
            let opts = NodeOptions { timeout: std::time::Duration::from_millis(init.timeout_ms), ..Default::default() };
            let mut clients = LayerNode::with_options(Role::Server, opts);
            match &init.clients {
                ClientPlan::Local(n) => {
                    for _ in 0..*n {
                        let mut w = ClientWorker::default();
                        clients.spawn_local(move |a| w.handle(a)).map_err(|e| e.to_string())?;
                    }
                }
                ClientPlan::Remote(addrs) => {
                    for a in addrs {
                        clients.register(Link::connect(a.as_str()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
                    }
                }
            }
            if clients.n_workers() == 0 {
                return Err("a server needs at least one client".into());
            }
            all_ok(
                clients.step(&[tag("init"), Arg::One(Bytes::from(init.config.clone()))], None).map_err(|e| e.to_string())?,
                "init",
            )?;
            let envs = init.envs.iter().map(|&i| RolloutEnv::new(&cfg, i)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
            self.ctx = Some(ServerCtx { clients, envs, bench: Vec::new() });
            return Ok(Vec::new());
        }
        let ctx = self.ctx.as_mut().ok_or("server not initialised")?;
        match &verb[..] {
            b"params" => {
                let res = ctx.clients.step(&[tag("params"), Arg::One(one(&args, 1)?.clone())], None).map_err(|e| e.to_string())?;
                let hashes: Vec<String> = all_ok(res, "params")?.iter().map(|b| String::from_utf8_lossy(b).into_owned()).collect();
                Ok(enc(&hashes).to_vec())
            }
            b"epoch" => {
                let quota: u64 = dec(one(&args, 1)?)?;
                Ok(enc(&ctx.epoch(quota as usize)?).to_vec())
            }
            b"bench_prep" => {
                let n: u64 = dec(one(&args, 1)?)?;
                ctx.bench_prep(n as usize)?;
                Ok(Vec::new())
            }
            b"bench" => {
                let reqs = ctx.bench.clone();
                let t = Instant::now();
                let decisions = ctx.act(reqs)?;
                let secs = t.elapsed().as_secs_f64();
                if decisions.len() != ctx.bench.len() {
                    return Err("benchmark lost decisions".into());
                }
                Ok(enc(&secs).to_vec())
            }
            other => Err(format!("unknown server call {:?}", String::from_utf8_lossy(other))),
        }
    }
}

/// Accepts one connection on `listener` and serves it as a `role` worker.
pub fn run_worker(role: Role, listener: &TcpListener) -> Result<(), StackError> {
    let link = Link::accept(listener)?;
    match role {
        Role::Server => {
            let mut w = ServerWorker::default();
            super::serve(link, role.layer(), move |a| w.handle(a))?;
        }
        Role::Client => {
            let mut w = ClientWorker::default();
            super::serve(link, role.layer(), move |a| w.handle(a))?;
        }
        Role::Cluster => return Err(StackError::Setup("the cluster is not a worker".into())),
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transport {
    /// Servers and clients as threads of this process.
    InProcess,
    /// Servers at `servers`; server `i` uses the clients at `clients[i]`.
    Tcp { servers: Vec<String>, clients: Vec<Vec<String>> },
}

#[derive(Clone, Debug)]
pub struct StackConfig {
    pub n_servers: usize,
    pub clients_per_server: usize,
    /// Total environments, split contiguously over servers.
    pub n_envs: usize,
    pub transport: Transport,
    pub options: NodeOptions,
}

impl StackConfig {
    pub fn local(n_servers: usize, clients_per_server: usize) -> Self {
        Self {
            n_servers,
            clients_per_server,
            n_envs: n_servers,
            transport: Transport::InProcess,
            options: NodeOptions::default(),
        }
    }

    pub fn with_envs(mut self, n_envs: usize) -> Self {
        self.n_envs = n_envs;
        self
    }
}

/// What one training cycle produced.
#[derive(Clone, Debug)]
pub struct EpochReport {
    pub metrics: StepMetrics,
    pub contributing: usize,
    pub failed: Vec<usize>,
    pub params_hash: String,
    /// Parameter hash reported by every client after the broadcast.
    pub client_hashes: Vec<String>,
}

/// The top tier: owns parameters and optimizer state.
pub struct Cluster {
    cfg: Config,
    node: LayerNode,
    params: PolicyParams<f32>,
    optim: OptimState,
    quota: usize,
    incidents: Vec<String>,
    epochs: u64,
}

impl Cluster {
    /// Assembles the stack, initialises every worker and broadcasts the
    /// initial parameters.
    pub fn new(cfg: &Config, stack: &StackConfig) -> Result<Self, StackError> {
        Self::with_params(cfg, stack, PolicyParams::init(cfg))
    }

    pub fn with_params(cfg: &Config, stack: &StackConfig, params: PolicyParams<f32>) -> Result<Self, StackError> {
        cfg.validate().map_err(|e| StackError::Setup(e.to_string()))?;
        if stack.n_servers == 0 || stack.n_envs < stack.n_servers {
            return Err(StackError::Setup(format!("{} environments cannot fill {} servers", stack.n_envs, stack.n_servers)));
        }
        params.check_compatible(&NetSpec::new(cfg)).map_err(|e| StackError::Setup(e.to_string()))?;
        let mut node = LayerNode::with_options(Role::Cluster, stack.options);
        let plans: Vec<ClientPlan> = match &stack.transport {
            Transport::InProcess => {
                if stack.clients_per_server == 0 {
                    return Err(StackError::Setup("a server needs at least one client".into()));
                }
                for _ in 0..stack.n_servers {
                    let mut w = ServerWorker::default();
                    node.spawn_local(move |a| w.handle(a))?;
                }
                vec![ClientPlan::Local(stack.clients_per_server); stack.n_servers]
            }
            Transport::Tcp { servers, clients } => {
                if servers.len() != stack.n_servers || clients.len() != stack.n_servers {
                    return Err(StackError::Setup("address lists do not match the server count".into()));
                }
                for a in servers {
                    node.register(Link::connect(a.as_str())?)?;
                }
                clients.iter().cloned().map(ClientPlan::Remote).collect()
            }
        };
        let config = cfg.to_json();
        let inits: Vec<Bytes> = (0..stack.n_servers)
            .map(|s| {
                let envs = server_envs(stack.n_envs, stack.n_servers, s);
                let init = ServerInit {
                    config: config.clone(),
                    envs,
                    clients: plans[s].clone(),
                    timeout_ms: stack.options.timeout.as_millis() as u64,
                };
                Bytes::from(serde_json::to_vec(&init).expect("init message"))
            })
            .collect();
        let results = node.step(&[tag("init"), Arg::Seq(inits)], Some(&shard1()))?;
        all_ok(results, "init").map_err(StackError::Setup)?;
        let optim = OptimState::new(&params, AdamHyper::from_config(cfg));
        let mut c = Self {
            cfg: cfg.clone(),
            node,
            params,
            optim,
            quota: cfg.batch_actions.div_ceil(stack.n_envs),
            incidents: Vec::new(),
            epochs: 0,
        };
        c.broadcast()?;
        Ok(c)
    }

    pub fn params(&self) -> &PolicyParams<f32> {
        &self.params
    }

    pub fn optimizer(&self) -> &OptimState {
        &self.optim
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    /// Actions each environment must finish per epoch.
    pub fn env_quota(&self) -> usize {
        self.quota
    }

    pub fn incidents(&self) -> &[String] {
        &self.incidents
    }

    pub fn node_mut(&mut self) -> &mut LayerNode {
        &mut self.node
    }

    fn incident(&mut self, msg: String) {
        log::warn!("{msg}");
        self.incidents.push(msg);
    }

    /// Sends the current parameters to every client; returns their hashes
    /// in server-major order. Servers that fail are logged and skipped.
    pub fn broadcast(&mut self) -> Result<Vec<String>, StackError> {
        let blob = params_to_bytes(&self.params);
        let results = self.node.step(&[tag("params"), Arg::One(blob)], None)?;
        let mut hashes = Vec::new();
        let mut ok = 0;
        for (s, r) in results.into_iter().enumerate() {
            match r.map_err(|e| e.to_string()).and_then(|b| dec::<Vec<String>>(&b)) {
                Ok(h) => {
                    ok += 1;
                    hashes.extend(h);
                }
                Err(e) => self.incident(format!("broadcast to server {s} failed: {e}")),
            }
        }
        if ok == 0 {
            return Err(StackError::AllFailed("broadcast".into()));
        }
        Ok(hashes)
    }

    /// One rollout, aggregation, optimizer step and broadcast.
    ///
    /// Packets are integer sums, so merging is exact and order free; the
    /// optimizer divides the sum by the total action count, which is the
    /// action-weighted mean of the per-server gradients.
    pub fn run_epoch(&mut self) -> Result<EpochReport, StackError> {
        let results = self.node.step(&[tag("epoch"), Arg::One(enc(&(self.quota as u64)))], None)?;
        let mut packets = Vec::new();
        let mut failed = Vec::new();
        for (s, r) in results.into_iter().enumerate() {
            match r.map_err(|e| e.to_string()).and_then(|b| dec::<GradPacket>(&b)) {
                Ok(p) => packets.push(p),
                Err(e) => {
                    failed.push(s);
                    self.incident(format!("epoch {}: server {s} dropped: {e}", self.epochs));
                }
            }
        }
        if packets.is_empty() {
            return Err(StackError::AllFailed(format!("epoch {}", self.epochs)));
        }
        let total = GradPacket::sum(&packets);
        let metrics = train_step(&mut self.params, &mut self.optim, &total)?;
        self.epochs += 1;
        let client_hashes = self.broadcast()?;
        Ok(EpochReport { metrics, contributing: packets.len(), failed, params_hash: self.params.hash_hex(), client_hashes })
    }

    /// Has every server stage `decisions` observations for [`Cluster::bench_round`].
    pub fn bench_prepare(&mut self, decisions: usize) -> Result<(), StackError> {
        let res = self.node.step(&[tag("bench_prep"), Arg::One(enc(&(decisions as u64)))], None)?;
        all_ok(res, "bench_prep").map_err(StackError::Setup)?;
        Ok(())
    }

    /// One benchmark round: every server evaluates its staged batch on its
    /// clients. Returns the cluster's synchronize time and each server's
    /// time for its client step, in seconds.
    pub fn bench_round(&mut self) -> Result<(f64, Vec<f64>), StackError> {
        let t = Instant::now();
        let handles = self.node.distribute(&[tag("bench")], None)?;
        let results = self.node.synchronize(&handles);
        let wall = t.elapsed().as_secs_f64();
        let inner = all_ok(results, "bench").map_err(StackError::Setup)?;
        let inner = inner.iter().map(|b| dec::<f64>(b)).collect::<Result<Vec<_>, _>>().map_err(StackError::Codec)?;
        Ok((wall, inner))
    }
}

/// One full training cycle; see [`Cluster::run_epoch`].
pub fn run_cluster_epoch(cluster: &mut Cluster) -> Result<EpochReport, StackError> {
    cluster.run_epoch()
}

/// Environment indices hosted by server `s`.
pub fn server_envs(n_envs: usize, n_servers: usize, s: usize) -> Vec<u32> {
    super::chunk_range(n_envs, n_servers, s).map(|e| e as u32).collect()
}
