use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::envelope::{Envelope, Verb};
use super::transport::{inproc_pair, FrameTx, Link};
use super::{shard, Arg, AscendError, ShardSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Cluster,
    Server,
    Client,
}

impl Role {
    pub fn layer(self) -> u16 {
        match self {
            Role::Cluster => 0,
            Role::Server => 1,
            Role::Client => 2,
        }
    }

    /// The role of this node's workers.
    pub fn below(self) -> Option<Role> {
        match self {
            Role::Cluster => Some(Role::Server),
            Role::Server => Some(Role::Client),
            Role::Client => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NodeOptions {
    pub timeout: Duration,
    pub heartbeat_every: Duration,
    /// Unanswered heartbeats before a worker is evicted.
    pub max_missed: u32,
}

impl Default for NodeOptions {
    fn default() -> Self {
        Self { timeout: Duration::from_secs(60), heartbeat_every: Duration::from_secs(5), max_missed: 3 }
    }
}

/// An in-flight call. Awaitable once through [`LayerNode::synchronize`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AsyncHandle {
    node: u64,
    worker: u32,
    seq: u64,
}

impl AsyncHandle {
    pub fn worker(&self) -> usize {
        self.worker as usize
    }
}

/// Header of an envelope this node sent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SentHeader {
    pub verb: Verb,
    pub layer: u16,
    pub worker: u32,
    pub seq: u64,
}

const JOURNAL_CAP: usize = 4096;

enum Inbound {
    Frame(u32, Envelope),
    Closed(u32, AscendError),
}

struct Slot {
    tx: Box<dyn FrameTx>,
    next_seq: u64,
    alive: bool,
    /// Seq of the unanswered heartbeat, if any.
    ping: Option<u64>,
    missed: u32,
}

static NODE_IDS: AtomicU64 = AtomicU64::new(1);

/// One tier of the stack, holding links to its workers in the tier below.
pub struct LayerNode {
    role: Role,
    id: u64,
    opts: NodeOptions,
    slots: Vec<Slot>,
    inbox_tx: Sender<Inbound>,
    inbox: Receiver<Inbound>,
    /// Calls sent and not yet answered, failed or timed out.
    outstanding: HashSet<(u32, u64)>,
    resolved: HashMap<(u32, u64), Result<Bytes, AscendError>>,
    /// Handles given out and not yet awaited.
    issued: HashSet<(u32, u64)>,
    journal: VecDeque<SentHeader>,
    last_beat: Instant,
    threads: Vec<thread::JoinHandle<()>>,
}

impl LayerNode {
    pub fn new(role: Role) -> Self {
        Self::with_options(role, NodeOptions::default())
    }

    pub fn with_options(role: Role, opts: NodeOptions) -> Self {
        let (inbox_tx, inbox) = unbounded();
        Self {
            role,
            id: NODE_IDS.fetch_add(1, Ordering::Relaxed),
            opts,
            slots: Vec::new(),
            inbox_tx,
            inbox,
            outstanding: HashSet::new(),
            resolved: HashMap::new(),
            issued: HashSet::new(),
            journal: VecDeque::new(),
            last_beat: Instant::now(),
            threads: Vec::new(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn options(&self) -> NodeOptions {
        self.opts
    }

    pub fn set_timeout(&mut self, t: Duration) {
        self.opts.timeout = t;
    }

    fn worker_layer(&self) -> u16 {
        self.role.layer() + 1
    }

    /// Adds a worker; its index is its position in the registry.
    pub fn register(&mut self, link: Link) -> Result<usize, AscendError> {
        if self.role.below().is_none() {
            return Err(AscendError::Layer("client nodes have no workers".into()));
        }
        let idx = self.slots.len() as u32;
        let Link { tx, mut rx } = link;
        let inbox = self.inbox_tx.clone();
        let reader = thread::Builder::new().name(format!("ascend-rx-{}-{idx}", self.role.layer())).spawn(move || loop {
            match rx.recv() {
                Ok(env) => {
                    if inbox.send(Inbound::Frame(idx, env)).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    let _ = inbox.send(Inbound::Closed(idx, e));
                    return;
                }
            }
        })?;
        self.threads.push(reader);
        self.slots.push(Slot { tx, next_seq: 1, alive: true, ping: None, missed: 0 });
        Ok(idx as usize)
    }

    pub fn n_workers(&self) -> usize {
        self.slots.len()
    }

    pub fn alive(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.alive).collect()
    }

    /// Most recent headers sent, oldest first.
    pub fn journal(&self) -> Vec<SentHeader> {
        self.journal.iter().copied().collect()
    }

    fn send(&mut self, worker: u32, verb: Verb, payload: Vec<u8>) -> (u64, Result<(), AscendError>) {
        let layer = self.worker_layer();
        let slot = &mut self.slots[worker as usize];
        let seq = slot.next_seq;
        slot.next_seq += 1;
        if !slot.alive {
            return (seq, Err(AscendError::Transport(format!("worker {worker} is not alive"))));
        }
        let env = Envelope { verb, layer, worker, seq, payload };
        let res = slot.tx.send(&env);
        if self.journal.len() == JOURNAL_CAP {
            self.journal.pop_front();
        }
        self.journal.push_back(SentHeader { verb, layer, worker, seq });
        (seq, res.map_err(|e| AscendError::Transport(format!("send to worker {worker}: {e}"))))
    }

    /// Sends one call per worker without waiting. Handles follow registry order.
    pub fn distribute(&mut self, args: &[Arg<Bytes>], spec: Option<&ShardSpec>) -> Result<Vec<AsyncHandle>, AscendError> {
        let n = self.slots.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let shards = shard(args, spec, n)?;
        let mut handles = Vec::with_capacity(n);
        for (w, sh) in shards.into_iter().enumerate() {
            let payload = bincode::serialize(&sh).map_err(|e| AscendError::Codec(e.to_string()))?;
            let (seq, res) = self.send(w as u32, Verb::Call, payload);
            let key = (w as u32, seq);
            match res {
                Ok(()) => {
                    self.outstanding.insert(key);
                }
                Err(e) => {
                    self.resolved.insert(key, Err(e));
                }
            }
            self.issued.insert(key);
            handles.push(AsyncHandle { node: self.id, worker: w as u32, seq });
        }
        Ok(handles)
    }

    /// Whether a handle's result has arrived; never blocks.
    pub fn is_resolved(&mut self, h: &AsyncHandle) -> bool {
        while let Ok(m) = self.inbox.try_recv() {
            self.absorb(m);
        }
        self.resolved.contains_key(&(h.worker, h.seq))
    }

    fn absorb(&mut self, m: Inbound) {
        match m {
            Inbound::Frame(w, env) => {
                let key = (w, env.seq);
                let expected = self.worker_layer();
                match env.verb {
                    Verb::Heartbeat => {
                        let slot = &mut self.slots[w as usize];
                        if slot.ping == Some(env.seq) {
                            slot.ping = None;
                            slot.missed = 0;
                        }
                    }
                    Verb::Return | Verb::Error if self.outstanding.remove(&key) => {
                        let r = if env.layer != expected || env.worker != w {
                            Err(AscendError::Layer(format!(
                                "reply from layer {} worker {} on channel of layer {expected} worker {w}",
                                env.layer, env.worker
                            )))
                        } else if env.verb == Verb::Return {
                            Ok(Bytes::from(env.payload))
                        } else {
                            Err(AscendError::Remote(String::from_utf8_lossy(&env.payload).into_owned()))
                        };
                        self.resolved.insert(key, r);
                    }
                    // late reply to a timed-out call, or a stray frame
                    _ => log::debug!("dropping {:?} seq {} from worker {w}", env.verb, env.seq),
                }
            }
            Inbound::Closed(w, e) => {
                self.kill(w, &format!("worker {w} disconnected: {e}"));
            }
        }
    }

    fn kill(&mut self, w: u32, why: &str) {
        let slot = &mut self.slots[w as usize];
        if slot.alive {
            log::warn!("{why}");
        }
        slot.alive = false;
        let dead: Vec<_> = self.outstanding.iter().filter(|k| k.0 == w).copied().collect();
        for k in dead {
            self.outstanding.remove(&k);
            self.resolved.insert(k, Err(AscendError::Transport(why.to_string())));
        }
    }

    fn beat(&mut self) {
        self.last_beat = Instant::now();
        for w in 0..self.slots.len() as u32 {
            let s = &mut self.slots[w as usize];
            if !s.alive {
                continue;
            }
            if s.ping.is_some() {
                s.missed += 1;
                if s.missed >= self.opts.max_missed {
                    self.kill(w, &format!("worker {w} evicted after {} missed heartbeats", self.opts.max_missed));
                    continue;
                }
            }
            let (seq, res) = self.send(w, Verb::Heartbeat, Vec::new());
            match res {
                Ok(()) => self.slots[w as usize].ping = Some(seq),
                Err(e) => self.kill(w, &e.to_string()),
            }
        }
    }

    /// Waits for every handle and returns results in handle order. Failures
    /// are per entry; successful entries are kept.
    pub fn synchronize(&mut self, handles: &[AsyncHandle]) -> Vec<Result<Bytes, AscendError>> {
        let mut out: Vec<Option<Result<Bytes, AscendError>>> = vec![None; handles.len()];
        let mut wanted = Vec::new();
        for (i, h) in handles.iter().enumerate() {
            let key = (h.worker, h.seq);
            if h.node != self.id {
                out[i] = Some(Err(AscendError::Handle("handle belongs to another node".into())));
            } else if !self.issued.remove(&key) {
                out[i] = Some(Err(AscendError::Handle(format!("worker {} seq {} already awaited", h.worker, h.seq))));
            } else {
                wanted.push((i, key));
            }
        }
        let deadline = Instant::now() + self.opts.timeout;
        loop {
            for &(i, key) in &wanted {
                if out[i].is_none() {
                    if let Some(r) = self.resolved.remove(&key) {
                        out[i] = Some(r);
                    }
                }
            }
            if wanted.iter().all(|&(i, _)| out[i].is_some()) {
                break;
            }
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            let next_beat = self.last_beat + self.opts.heartbeat_every;
            if now >= next_beat {
                self.beat();
                continue;
            }
            match self.inbox.recv_timeout(deadline.min(next_beat) - now) {
                Ok(m) => {
                    self.absorb(m);
                    while let Ok(m) = self.inbox.try_recv() {
                        self.absorb(m);
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        for &(i, key) in &wanted {
            if out[i].is_none() {
                self.outstanding.remove(&key);
                out[i] = Some(Err(AscendError::Timeout(self.opts.timeout)));
            }
        }
        out.into_iter().map(|r| r.unwrap()).collect()
    }

    /// `synchronize(distribute(args, spec))`.
    pub fn step(&mut self, args: &[Arg<Bytes>], spec: Option<&ShardSpec>) -> Result<Vec<Result<Bytes, AscendError>>, AscendError> {
        let handles = self.distribute(args, spec)?;
        Ok(self.synchronize(&handles))
    }

    /// Spawns an in-process worker thread running `handler` and registers it.
    pub fn spawn_local<H>(&mut self, handler: H) -> Result<usize, AscendError>
    where
        H: FnMut(Vec<Arg<Bytes>>) -> Result<Vec<u8>, String> + Send + 'static,
    {
        let (mine, theirs) = inproc_pair();
        let layer = self.worker_layer();
        let t = thread::Builder::new()
            .name(format!("ascend-worker-{layer}-{}", self.slots.len()))
            .spawn(move || {
                if let Err(e) = serve(theirs, layer, handler) {
                    log::warn!("worker loop ended: {e}");
                }
            })?;
        self.threads.push(t);
        self.register(mine)
    }
}

impl Drop for LayerNode {
    fn drop(&mut self) {
        // closing our senders ends the worker loops, which in turn ends the readers
        self.slots.clear();
        for t in self.threads.drain(..) {
            if t.thread().id() != thread::current().id() {
                let _ = t.join();
            }
        }
    }
}

/// The worker side: answers calls with `handler` until the caller hangs up.
///
/// Heartbeats are answered from the reader thread so a long call does not
/// look like a dead worker. A panicking handler takes the whole loop down and
/// the caller sees a disconnect.
pub fn serve<H>(link: Link, layer: u16, mut handler: H) -> Result<(), AscendError>
where
    H: FnMut(Vec<Arg<Bytes>>) -> Result<Vec<u8>, String>,
{
    let Link { tx, mut rx } = link;
    let tx = Arc::new(Mutex::new(tx));
    let weak: Weak<Mutex<Box<dyn FrameTx>>> = Arc::downgrade(&tx);
    let (calls_tx, calls) = unbounded::<Result<Envelope, AscendError>>();
    let reader = thread::spawn(move || {
        let mut last_seq = 0u64;
        loop {
            let m = rx.recv();
            let env = match m {
                Ok(env) => env,
                Err(e) => {
                    let _ = calls_tx.send(Err(e));
                    return;
                }
            };
            let bad = if env.layer != layer {
                Some(format!("call for layer {} reached layer {layer}", env.layer))
            } else if env.seq <= last_seq {
                Some(format!("sequence {} after {last_seq}", env.seq))
            } else {
                None
            };
            last_seq = last_seq.max(env.seq);
            if bad.is_some() || env.verb == Verb::Heartbeat {
                let Some(tx) = weak.upgrade() else { return };
                let reply = match bad {
                    Some(msg) => Envelope { verb: Verb::Error, layer, worker: env.worker, seq: env.seq, payload: msg.into_bytes() },
                    None => Envelope { verb: Verb::Heartbeat, layer, worker: env.worker, seq: env.seq, payload: Vec::new() },
                };
                let _ = tx.lock().unwrap().send(&reply);
                continue;
            }
            if env.verb == Verb::Call && calls_tx.send(Ok(env)).is_err() {
                return;
            }
        }
    });
    let result = loop {
        let env = match calls.recv() {
            Ok(Ok(env)) => env,
            Ok(Err(AscendError::Disconnected)) | Err(_) => break Ok(()),
            Ok(Err(e)) => break Err(e),
        };
        let reply = match bincode::deserialize::<Vec<Arg<Bytes>>>(&env.payload) {
            Err(e) => Err(format!("bad arguments: {e}")),
            Ok(args) => handler(args),
        };
        let (verb, payload) = match reply {
            Ok(p) => (Verb::Return, p),
            Err(msg) => (Verb::Error, msg.into_bytes()),
        };
        let out = Envelope { verb, layer, worker: env.worker, seq: env.seq, payload };
        if tx.lock().unwrap().send(&out).is_err() {
            break Ok(());
        }
    };
    drop(tx);
    drop(calls);
    // the reader exits when the caller closes its side; do not wait on it
    drop(reader);
    result
}
