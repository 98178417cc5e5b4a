//! Forward pass, sampling and exact reverse-mode gradients of the policy.
//!
//! Two caches keep inference cheap without changing the math:
//! attribute rows are pre-multiplied by the f projections (a discrete
//! attribute has few distinct values), and each distinct tile entity is
//! embedded and pushed through the first convolution's per-offset weights
//! once per parameter version. Backward accumulates cotangents against those
//! cached quantities and `finish` pushes them into the real parameters.

use std::sync::Arc;

use super::params::{EmbedSlot, NetSpec, PolicyParams};
use super::tensor::{affine, affine_back_input, axpy, dot, outer_acc, relu_in_place, relu_mask, softmax};
use super::tensor::{PooledAttention, Scalar};
use super::NeuralError;
use crate::config::RngStream;
use crate::engine::{ActionBundle, Attack, Move, Style, Target};
use crate::obsio::{AgentEntity, AttrValue, EntityType, Observation, TileEntity};

/// Candidate count per head: move, style, target (null included).
pub const MOVE_CHOICES: usize = 5;
pub const STYLE_CHOICES: usize = 3;
const ARG_ROWS: usize = MOVE_CHOICES + STYLE_CHOICES + 1;
const NULL_ROW: usize = ARG_ROWS - 1;

#[derive(Clone, Debug)]
enum AttrProj<T> {
    /// rows x 3d, each row `[Q y, K y, V y]`.
    Table(Vec<T>),
    /// `[Q w, K w, V w]` and `[Q b, K b, V b]`.
    Affine { slope: Vec<T>, icpt: Vec<T> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum AttrRef<T> {
    Row(usize),
    /// Normalized continuous value.
    Cont(T),
}

#[derive(Clone, Debug)]
struct TileEntry<T> {
    z: Vec<T>,
    /// 9 x C: first-layer kernel slice applied to `z`, per kernel offset.
    u: Vec<T>,
}

#[derive(Clone, Debug)]
struct PopCache<T> {
    tile: Vec<AttrProj<T>>,
    agent: Vec<AttrProj<T>>,
    /// proj_a applied to move, style and null rows; ARG_ROWS x d.
    arg_keys: Vec<T>,
    tiles: Vec<Option<TileEntry<T>>>,
}

#[derive(Clone, Debug)]
struct EntityTrace<T> {
    refs: Vec<AttrRef<T>>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    att: PooledAttention<T>,
}

/// One categorical choice.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection<T> {
    pub index: usize,
    pub log_prob: T,
    pub probs: Vec<T>,
}

impl<T: Scalar> Selection<T> {
    pub fn entropy(&self) -> T {
        -self.probs.iter().filter(|p| **p > T::zero()).map(|&p| p * p.ln()).sum::<T>()
    }
}

/// How a head picks its index.
pub enum Pick<'a> {
    Sample(&'a mut RngStream),
    /// Inverse-CDF pick with a uniform drawn elsewhere.
    Uniform(f64),
    /// Replay a known choice, e.g. when recomputing a stored step.
    Fixed(usize),
    Greedy,
}

/// Pick mode for all three heads of one forward pass.
enum Mode {
    Uniform([f64; 3]),
    Fixed([usize; 3]),
    Greedy,
}

fn head_pick(mode: &Mode, head: usize) -> Pick<'static> {
    match mode {
        Mode::Uniform(u) => Pick::Uniform(u[head]),
        Mode::Fixed(c) => Pick::Fixed(c[head]),
        Mode::Greedy => Pick::Greedy,
    }
}

/// Softmax over `query . key_k / sqrt(d)` and a pick.
pub fn select_arguments<T: Scalar>(query: &[T], keys: &[T], pick: Pick<'_>) -> Result<Selection<T>, NeuralError> {
    let d = query.len();
    let n = keys.len().checked_div(d).unwrap_or(0);
    if n == 0 {
        return Err(NeuralError::EmptyCandidates);
    }
    let scale = T::of(1.0 / (d as f64).sqrt());
    let logits: Vec<T> = (0..n).map(|k| dot(query, &keys[k * d..(k + 1) * d]) * scale).collect();
    let probs = softmax(&logits);
    let index = match pick {
        Pick::Fixed(i) if i < n => i,
        Pick::Fixed(i) => return Err(NeuralError::Mismatch(format!("choice {i} out of {n} candidates"))),
        Pick::Greedy => (0..n).fold(0, |best, k| if probs[k] > probs[best] { k } else { best }),
        Pick::Sample(rng) => inverse_cdf(&probs, rng.unit()),
        Pick::Uniform(u) => inverse_cdf(&probs, u),
    };
    // log-softmax directly, so a forced single choice is exactly 0
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<T>().ln();
    let log_prob = logits[index] - lse;
    Ok(Selection { index, log_prob, probs })
}

fn inverse_cdf<T: Scalar>(probs: &[T], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p.f64();
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Everything backward needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T = f32> {
    pub population: usize,
    agents: Vec<EntityTrace<T>>,
    /// Agent entity embeddings, m x d, observer first.
    pub agent_z: Vec<T>,
    g_qkv: [Vec<T>; 3],
    g_att: PooledAttention<T>,
    tile_keys: Vec<usize>,
    h1: Vec<T>,
    h2: Vec<T>,
    /// Concatenated agent and tile summaries.
    x: Vec<T>,
    /// Observation embedding, width hidden_dim.
    pub o: Vec<T>,
    a1: Vec<T>,
    pub hidden: Vec<T>,
    kh: Vec<T>,
    /// Null key followed by proj_a of every non-self agent.
    target_keys: Vec<T>,
    pub heads: [Selection<T>; 3],
    pub value: T,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn log_prob(&self) -> T {
        self.heads.iter().map(|h| h.log_prob).sum()
    }

    pub fn choices(&self) -> [usize; 3] {
        [self.heads[0].index, self.heads[1].index, self.heads[2].index]
    }

    pub fn entropy(&self) -> T {
        self.heads.iter().map(Selection::entropy).sum()
    }

    /// Which ReLU units are active, in a fixed order. Finite-difference checks
    /// use it to spot perturbations that cross a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.h1.iter().chain(&self.h2).chain(&self.a1).chain(&self.hidden).map(|v| *v > T::zero()).collect()
    }

    /// Raw target logits (before softmax), null first.
    pub fn target_logits(&self) -> Vec<T> {
        let d = self.kh.len();
        let scale = T::of(1.0 / (d as f64).sqrt());
        self.target_keys.chunks(d).map(|k| dot(&self.kh, k) * scale).collect()
    }
}

/// Turns head indices into an engine action for the observer of `obs`.
pub fn bundle_from_choices(obs: &Observation, choices: [usize; 3]) -> ActionBundle {
    let attack = match choices[2] {
        0 => None,
        j => Some(Attack { style: Style::ALL[choices[1]], target: Target::Agent(obs.agents[j].id) }),
    };
    ActionBundle { mv: Move::ALL[choices[0]], attack }
}

/// Derivatives of the loss with respect to one step's outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSeed<T> {
    /// dL / d(total log-probability of the taken action).
    pub d_logp: T,
    pub d_value: T,
    /// dL / d(summed head entropies).
    pub d_entropy: T,
}

/// Gradient of one population's view of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    pub population: usize,
    pub shared: Vec<T>,
    pub local: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Scatters into a full-size parameter-shaped buffer.
    pub fn add_to(&self, out: &mut PolicyParams<T>) {
        for (o, g) in out.shared.iter_mut().zip(&self.shared) {
            *o += *g;
        }
        for (o, g) in out.pops[self.population].iter_mut().zip(&self.local) {
            *o += *g;
        }
    }
}

/// Cotangents accumulated over the steps of one population's trajectories.
#[derive(Clone, Debug)]
pub struct GradSink<T> {
    pub population: usize,
    local: Vec<T>,
    tile_cot: Vec<Option<Vec<T>>>,
    tile_rows: Vec<Vec<T>>,
    agent_rows: Vec<Vec<T>>,
    arg_cot: Vec<T>,
    steps: usize,
}

impl<T: Scalar> GradSink<T> {
    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// A policy bound to a parameter snapshot, with inference caches.
pub struct Policy<T = f32> {
    params: Arc<PolicyParams<T>>,
    caches: Vec<Option<PopCache<T>>>,
}

fn split3<T>(buf: &[T], d: usize) -> (&[T], &[T], &[T]) {
    (&buf[..d], &buf[d..2 * d], &buf[2 * d..3 * d])
}

impl<T: Scalar> Policy<T> {
    pub fn new(params: Arc<PolicyParams<T>>) -> Self {
        let n = params.n_populations();
        Self { params, caches: (0..n).map(|_| None).collect() }
    }

    pub fn params(&self) -> &Arc<PolicyParams<T>> {
        &self.params
    }

    pub fn spec(&self) -> &NetSpec {
        &self.params.spec
    }

    /// Swaps in a new snapshot and drops every cache.
    pub fn set_params(&mut self, params: Arc<PolicyParams<T>>) {
        *self = Self::new(params);
    }

    pub fn sink(&self, population: usize) -> GradSink<T> {
        let spec = &self.params.spec;
        let d = spec.embed_dim;
        let rows = |slots: &[EmbedSlot]| -> Vec<Vec<T>> {
            slots
                .iter()
                .map(|s| match *s {
                    EmbedSlot::Table { rows, .. } => vec![T::zero(); rows * 3 * d],
                    EmbedSlot::Affine { .. } => vec![T::zero(); 6 * d],
                })
                .collect()
        };
        GradSink {
            population,
            local: vec![T::zero(); spec.pop_layout.len],
            tile_cot: vec![None; spec.tile_keys],
            tile_rows: rows(&spec.shared.tile),
            agent_rows: rows(&spec.shared.agent),
            arg_cot: vec![T::zero(); ARG_ROWS * d],
            steps: 0,
        }
    }

    fn check_population(&self, population: usize) -> Result<(), NeuralError> {
        if population >= self.params.n_populations() {
            return Err(NeuralError::UnknownPopulation(population));
        }
        Ok(())
    }

    fn ensure_cache(&mut self, pop: usize) {
        if self.caches[pop].is_some() {
            return;
        }
        let p = &*self.params;
        let spec = &p.spec;
        let d = spec.embed_dim;
        let w = &p.pops[pop];
        let fw = spec.pop.f.map(|o| &w[o..o + d * d]);
        let proj = |slot: &EmbedSlot| -> AttrProj<T> {
            let qkv = |y: &[T], out: &mut [T]| {
                for (i, m) in fw.iter().enumerate() {
                    affine(m, None, y, &mut out[i * d..(i + 1) * d]);
                }
            };
            match *slot {
                EmbedSlot::Table { offset, rows, .. } => {
                    let mut t = vec![T::zero(); rows * 3 * d];
                    for r in 0..rows {
                        qkv(&p.shared[offset + r * d..offset + (r + 1) * d], &mut t[r * 3 * d..(r + 1) * 3 * d]);
                    }
                    AttrProj::Table(t)
                }
                EmbedSlot::Affine { w: wo, b: bo, .. } => {
                    let mut slope = vec![T::zero(); 3 * d];
                    let mut icpt = vec![T::zero(); 3 * d];
                    qkv(&p.shared[wo..wo + d], &mut slope);
                    qkv(&p.shared[bo..bo + d], &mut icpt);
                    AttrProj::Affine { slope, icpt }
                }
            }
        };
        let tile = spec.shared.tile.iter().map(proj).collect();
        let agent = spec.shared.agent.iter().map(proj).collect();
        let mut arg_keys = vec![T::zero(); ARG_ROWS * d];
        let pa = &w[spec.pop.proj_a_w..spec.pop.proj_a_w + d * d];
        let pb = &w[spec.pop.proj_a_b..spec.pop.proj_a_b + d];
        let rows = &p.shared[spec.shared.moves..spec.shared.moves + ARG_ROWS * d];
        for r in 0..ARG_ROWS {
            affine(pa, Some(pb), &rows[r * d..(r + 1) * d], &mut arg_keys[r * d..(r + 1) * d]);
        }
        self.caches[pop] = Some(PopCache { tile, agent, arg_keys, tiles: vec![None; spec.tile_keys] });
    }

    fn tile_key(&self, t: &TileEntity) -> usize {
        let mut key = 0;
        for (v, slot) in t.0.iter().zip(&self.params.spec.shared.tile) {
            if let EmbedSlot::Table { rows, min, .. } = *slot {
                key = key * rows + (*v - min) as usize;
            }
        }
        key
    }

    fn tile_values(&self, mut key: usize) -> Vec<AttrValue> {
        let slots = &self.params.spec.shared.tile;
        let mut vals = vec![AttrValue::Discrete(0); slots.len()];
        for (i, slot) in slots.iter().enumerate().rev() {
            if let EmbedSlot::Table { rows, min, .. } = *slot {
                vals[i] = AttrValue::Discrete((key % rows) as i16 + min);
                key /= rows;
            }
        }
        vals
    }

    fn embed_attrs(&self, pop: usize, entity: EntityType, values: &[AttrValue]) -> Result<(Vec<T>, EntityTrace<T>), NeuralError> {
        let spec = &self.params.spec;
        let d = spec.embed_dim;
        let cache = self.caches[pop].as_ref().expect("cache built");
        let (slots, projs) = match entity {
            EntityType::Tile => (&spec.shared.tile, &cache.tile),
            EntityType::Agent => (&spec.shared.agent, &cache.agent),
        };
        if values.len() != slots.len() {
            return Err(NeuralError::Shape(format!("{} attributes, schema has {}", values.len(), slots.len())));
        }
        let n = values.len();
        let (mut q, mut k, mut v) = (vec![T::zero(); n * d], vec![T::zero(); n * d], vec![T::zero(); n * d]);
        let mut refs = Vec::with_capacity(n);
        for (i, ((val, slot), proj)) in values.iter().zip(slots).zip(projs).enumerate() {
            let dst = i * d..(i + 1) * d;
            match (*val, *slot, proj) {
                (AttrValue::Discrete(x), EmbedSlot::Table { rows, min, .. }, AttrProj::Table(t)) => {
                    let r = x as i64 - min as i64;
                    if r < 0 || r >= rows as i64 {
                        return Err(NeuralError::Shape(format!("attribute {i} value {x} outside table")));
                    }
                    let r = r as usize;
                    let (a, b, c) = split3(&t[r * 3 * d..(r + 1) * 3 * d], d);
                    q[dst.clone()].copy_from_slice(a);
                    k[dst.clone()].copy_from_slice(b);
                    v[dst].copy_from_slice(c);
                    refs.push(AttrRef::Row(r));
                }
                (AttrValue::Continuous(x), EmbedSlot::Affine { mean, std, .. }, AttrProj::Affine { slope, icpt }) => {
                    let xn = T::of(((x - mean) / std) as f64);
                    for (buf, part) in [(&mut q, 0), (&mut k, 1), (&mut v, 2)] {
                        for c in 0..d {
                            buf[i * d + c] = slope[part * d + c] * xn + icpt[part * d + c];
                        }
                    }
                    refs.push(AttrRef::Cont(xn));
                }
                _ => return Err(NeuralError::Shape(format!("attribute {i} has the wrong kind"))),
            }
        }
        let mut z = vec![T::zero(); d];
        let att = PooledAttention::forward(&q, &k, &v, d, &mut z);
        Ok((z, EntityTrace { refs, q, k, v, att }))
    }

    /// Entity embedding z for a list of attribute values in schema order.
    pub fn embed_entity(&mut self, population: usize, entity: EntityType, values: &[AttrValue]) -> Result<Vec<T>, NeuralError> {
        self.check_population(population)?;
        self.ensure_cache(population);
        Ok(self.embed_attrs(population, entity, values)?.0)
    }

    /// Gradient of `dz . z` for one entity embedding, with `z` from
    /// [`Policy::embed_entity`].
    pub fn embed_entity_backward(
        &mut self,
        population: usize,
        entity: EntityType,
        values: &[AttrValue],
        dz: &[T],
    ) -> Result<Gradients<T>, NeuralError> {
        self.check_population(population)?;
        self.ensure_cache(population);
        let (_, et) = self.embed_attrs(population, entity, values)?;
        let mut sink = self.sink(population);
        let rows = match entity {
            EntityType::Tile => &mut sink.tile_rows,
            EntityType::Agent => &mut sink.agent_rows,
        };
        entity_backward(&et, dz, self.params.spec.embed_dim, rows);
        self.finish(sink)
    }

    fn ensure_tile(&mut self, pop: usize, key: usize) {
        if self.caches[pop].as_ref().unwrap().tiles[key].is_some() {
            return;
        }
        let values = self.tile_values(key);
        let (z, _) = self.embed_attrs(pop, EntityType::Tile, &values).expect("tile key decodes");
        let spec = &self.params.spec;
        let (d, c) = (spec.embed_dim, spec.channels);
        let u = match spec.pop.conv {
            Some(conv) => {
                let w = &self.params.pops[pop][conv.w1..conv.w1 + 9 * c * d];
                let mut u = vec![T::zero(); 9 * c];
                for k in 0..9 {
                    affine(&w[k * c * d..(k + 1) * c * d], None, &z, &mut u[k * c..(k + 1) * c]);
                }
                u
            }
            None => Vec::new(),
        };
        self.caches[pop].as_mut().unwrap().tiles[key] = Some(TileEntry { z, u });
    }

    fn run(&mut self, obs: &Observation, mode: Mode) -> Result<ForwardTrace<T>, NeuralError> {
        if obs.agents.is_empty() {
            return Err(NeuralError::Observation("observation has no observer".into()));
        }
        obs.validate(&self.params.spec.schema).map_err(|e| NeuralError::Observation(e.to_string()))?;
        let pop = obs.observer().population();
        self.check_population(pop)?;
        self.ensure_cache(pop);
        let params = self.params.clone();
        let spec = &params.spec;
        let w = &params.pops[pop];
        let po = &spec.pop;
        let (d, hd, ch) = (spec.embed_dim, spec.hidden_dim, spec.channels);

        // agents: f then g
        let m = obs.agents.len();
        let mut agent_z = vec![T::zero(); m * d];
        let mut agents = Vec::with_capacity(m);
        for (j, a) in obs.agents.iter().enumerate() {
            let (z, tr) = self.embed_attrs(pop, EntityType::Agent, &a.attributes())?;
            agent_z[j * d..(j + 1) * d].copy_from_slice(&z);
            agents.push(tr);
        }
        let mut g_qkv: [Vec<T>; 3] = std::array::from_fn(|_| vec![T::zero(); m * d]);
        for (i, buf) in g_qkv.iter_mut().enumerate() {
            let mat = &w[po.g[i]..po.g[i] + d * d];
            for j in 0..m {
                affine(mat, None, &agent_z[j * d..(j + 1) * d], &mut buf[j * d..(j + 1) * d]);
            }
        }
        let mut agent_vec = vec![T::zero(); d];
        let g_att = PooledAttention::forward(&g_qkv[0], &g_qkv[1], &g_qkv[2], d, &mut agent_vec);

        // tiles
        let tile_keys: Vec<usize> = obs.tiles.iter().map(|t| self.tile_key(t)).collect();
        for &key in &tile_keys {
            self.ensure_tile(pop, key);
        }
        let cache = self.caches[pop].as_ref().unwrap();
        let mut tile_vec = vec![T::zero(); d];
        let (mut h1, mut h2) = (Vec::new(), Vec::new());
        match po.conv {
            Some(conv) => {
                let (crop, n1, n2) = (spec.crop, spec.n1, spec.n2);
                h1 = vec![T::zero(); n1 * n1 * ch];
                for i in 0..n1 {
                    for j in 0..n1 {
                        let out = &mut h1[(i * n1 + j) * ch..(i * n1 + j + 1) * ch];
                        out.copy_from_slice(&w[conv.b1..conv.b1 + ch]);
                        for a in 0..3 {
                            for b in 0..3 {
                                let key = tile_keys[(2 * i + a) * crop + 2 * j + b];
                                let k = a * 3 + b;
                                let u = &cache.tiles[key].as_ref().unwrap().u;
                                axpy(T::one(), &u[k * ch..(k + 1) * ch], out);
                            }
                        }
                    }
                }
                relu_in_place(&mut h1);
                h2 = vec![T::zero(); n2 * n2 * ch];
                let w2 = &w[conv.w2..conv.w2 + 9 * ch * ch];
                let mut tmp = vec![T::zero(); ch];
                for i in 0..n2 {
                    for j in 0..n2 {
                        let out = &mut h2[(i * n2 + j) * ch..(i * n2 + j + 1) * ch];
                        out.copy_from_slice(&w[conv.b2..conv.b2 + ch]);
                        for a in 0..3 {
                            for b in 0..3 {
                                let pos = (2 * i + a) * n1 + 2 * j + b;
                                let k = a * 3 + b;
                                affine(&w2[k * ch * ch..(k + 1) * ch * ch], None, &h1[pos * ch..(pos + 1) * ch], &mut tmp);
                                axpy(T::one(), &tmp, out);
                            }
                        }
                    }
                }
                relu_in_place(&mut h2);
                affine(&w[conv.fc_w..conv.fc_w + d * h2.len()], Some(&w[conv.fc_b..conv.fc_b + d]), &h2, &mut tile_vec);
            }
            None => {
                let inv = T::of(1.0 / tile_keys.len() as f64);
                for &key in &tile_keys {
                    axpy(inv, &cache.tiles[key].as_ref().unwrap().z, &mut tile_vec);
                }
            }
        }

        // hidden
        let mut x = agent_vec;
        x.extend_from_slice(&tile_vec);
        let mut o = vec![T::zero(); hd];
        affine(&w[po.in_w..po.in_w + hd * x.len()], Some(&w[po.in_b..po.in_b + hd]), &x, &mut o);
        let mut a1 = vec![T::zero(); hd];
        affine(&w[po.mlp1_w..po.mlp1_w + hd * hd], Some(&w[po.mlp1_b..po.mlp1_b + hd]), &o, &mut a1);
        relu_in_place(&mut a1);
        let mut hidden = vec![T::zero(); hd];
        affine(&w[po.mlp2_w..po.mlp2_w + hd * hd], Some(&w[po.mlp2_b..po.mlp2_b + hd]), &a1, &mut hidden);
        relu_in_place(&mut hidden);

        // heads
        let mut kh = vec![T::zero(); d];
        affine(&w[po.proj_h_w..po.proj_h_w + d * hd], Some(&w[po.proj_h_b..po.proj_h_b + d]), &hidden, &mut kh);
        let mut target_keys = vec![T::zero(); m * d];
        target_keys[..d].copy_from_slice(&cache.arg_keys[NULL_ROW * d..]);
        let (pa, pb) = (&w[po.proj_a_w..po.proj_a_w + d * d], &w[po.proj_a_b..po.proj_a_b + d]);
        for j in 1..m {
            affine(pa, Some(pb), &agent_z[j * d..(j + 1) * d], &mut target_keys[j * d..(j + 1) * d]);
        }
        let heads = [
            select_arguments(&kh, &cache.arg_keys[..MOVE_CHOICES * d], head_pick(&mode, 0))?,
            select_arguments(&kh, &cache.arg_keys[MOVE_CHOICES * d..NULL_ROW * d], head_pick(&mode, 1))?,
            select_arguments(&kh, &target_keys, head_pick(&mode, 2))?,
        ];
        let value = dot(&w[po.value_w..po.value_w + hd], &hidden) + w[po.value_b];

        Ok(ForwardTrace {
            population: pop,
            agents,
            agent_z,
            g_qkv,
            g_att,
            tile_keys,
            h1,
            h2,
            x,
            o,
            a1,
            hidden,
            kh,
            target_keys,
            heads,
            value,
        })
    }

    /// Samples an action; every head draws from `rng`.
    pub fn forward(&mut self, obs: &Observation, rng: &mut RngStream) -> Result<(ActionBundle, ForwardTrace<T>), NeuralError> {
        let u = [rng.unit(), rng.unit(), rng.unit()];
        let trace = self.run(obs, Mode::Uniform(u))?;
        Ok((bundle_from_choices(obs, trace.choices()), trace))
    }

    /// Samples with three uniforms supplied by the caller, one per head.
    pub fn forward_with(&mut self, obs: &Observation, uniforms: [f64; 3]) -> Result<(ActionBundle, ForwardTrace<T>), NeuralError> {
        let trace = self.run(obs, Mode::Uniform(uniforms))?;
        Ok((bundle_from_choices(obs, trace.choices()), trace))
    }

    /// Recomputes the trace for a stored choice triple.
    pub fn evaluate(&mut self, obs: &Observation, choices: [usize; 3]) -> Result<ForwardTrace<T>, NeuralError> {
        self.run(obs, Mode::Fixed(choices))
    }

    /// Most likely action.
    pub fn greedy(&mut self, obs: &Observation) -> Result<(ActionBundle, ForwardTrace<T>), NeuralError> {
        let trace = self.run(obs, Mode::Greedy)?;
        Ok((bundle_from_choices(obs, trace.choices()), trace))
    }

    /// `o` and the agent entity embeddings.
    pub fn embed_observation(&mut self, obs: &Observation) -> Result<(Vec<T>, Vec<Vec<T>>), NeuralError> {
        let t = self.evaluate(obs, [0, 0, 0])?;
        let d = self.params.spec.embed_dim;
        Ok((t.o.clone(), t.agent_z.chunks(d).map(<[T]>::to_vec).collect()))
    }

    /// Hard attention of a hidden state over raw argument embeddings, through
    /// the population's keying projections.
    pub fn select_arguments(
        &self,
        population: usize,
        hidden: &[T],
        candidates: &[Vec<T>],
        pick: Pick<'_>,
    ) -> Result<Selection<T>, NeuralError> {
        self.check_population(population)?;
        let spec = &self.params.spec;
        let (d, hd) = (spec.embed_dim, spec.hidden_dim);
        if hidden.len() != hd || candidates.iter().any(|c| c.len() != d) {
            return Err(NeuralError::Shape("hidden or candidate width".into()));
        }
        let w = &self.params.pops[population];
        let po = &spec.pop;
        let mut kh = vec![T::zero(); d];
        affine(&w[po.proj_h_w..po.proj_h_w + d * hd], Some(&w[po.proj_h_b..po.proj_h_b + d]), hidden, &mut kh);
        let mut keys = vec![T::zero(); candidates.len() * d];
        for (j, c) in candidates.iter().enumerate() {
            affine(&w[po.proj_a_w..po.proj_a_w + d * d], Some(&w[po.proj_a_b..po.proj_a_b + d]), c, &mut keys[j * d..(j + 1) * d]);
        }
        select_arguments(&kh, &keys, pick)
    }

    pub fn value(&mut self, obs: &Observation) -> Result<T, NeuralError> {
        Ok(self.evaluate(obs, [0, 0, 0])?.value)
    }

    /// Accumulates the gradient of one step into `sink`.
    pub fn backward(&self, trace: &ForwardTrace<T>, seed: LossSeed<T>, sink: &mut GradSink<T>) -> Result<(), NeuralError> {
        if trace.population != sink.population {
            return Err(NeuralError::Mismatch(format!(
                "trace from population {} fed to sink for {}",
                trace.population, sink.population
            )));
        }
        let params = &*self.params;
        let spec = &params.spec;
        let w = &params.pops[trace.population];
        let g = &mut sink.local;
        let po = &spec.pop;
        let (d, hd, ch) = (spec.embed_dim, spec.hidden_dim, spec.channels);
        let scale = T::of(1.0 / (d as f64).sqrt());
        let m = trace.agent_z.len() / d;
        sink.steps += 1;

        // heads
        let mut dkh = vec![T::zero(); d];
        let mut dz = vec![T::zero(); m * d];
        let key_sets: [&[T]; 3] = [
            &self.caches[trace.population].as_ref().unwrap().arg_keys[..MOVE_CHOICES * d],
            &self.caches[trace.population].as_ref().unwrap().arg_keys[MOVE_CHOICES * d..NULL_ROW * d],
            &trace.target_keys,
        ];
        let mut dkey = vec![T::zero(); d];
        for (h, (head, keys)) in trace.heads.iter().zip(key_sets).enumerate() {
            let ent = head.entropy();
            for (k, &p) in head.probs.iter().enumerate() {
                let hit = if k == head.index { T::one() } else { T::zero() };
                let mut dl = seed.d_logp * (hit - p);
                if p > T::zero() && seed.d_entropy != T::zero() {
                    dl -= seed.d_entropy * p * (p.ln() + ent);
                }
                if dl == T::zero() {
                    continue;
                }
                let key = &keys[k * d..(k + 1) * d];
                axpy(dl * scale, key, &mut dkh);
                for c in 0..d {
                    dkey[c] = dl * scale * trace.kh[c];
                }
                match (h, k) {
                    (0, _) => axpy(T::one(), &dkey, &mut sink.arg_cot[k * d..(k + 1) * d]),
                    (1, _) => axpy(T::one(), &dkey, &mut sink.arg_cot[(MOVE_CHOICES + k) * d..(MOVE_CHOICES + k + 1) * d]),
                    (_, 0) => axpy(T::one(), &dkey, &mut sink.arg_cot[NULL_ROW * d..]),
                    (_, j) => {
                        let zj = &trace.agent_z[j * d..(j + 1) * d];
                        outer_acc(&mut g[po.proj_a_w..po.proj_a_w + d * d], &dkey, zj);
                        axpy(T::one(), &dkey, &mut g[po.proj_a_b..po.proj_a_b + d]);
                        affine_back_input(&w[po.proj_a_w..po.proj_a_w + d * d], &dkey, &mut dz[j * d..(j + 1) * d]);
                    }
                }
            }
        }

        // keying, value, MLP
        let mut dhidden = vec![T::zero(); hd];
        outer_acc(&mut g[po.proj_h_w..po.proj_h_w + d * hd], &dkh, &trace.hidden);
        axpy(T::one(), &dkh, &mut g[po.proj_h_b..po.proj_h_b + d]);
        affine_back_input(&w[po.proj_h_w..po.proj_h_w + d * hd], &dkh, &mut dhidden);
        axpy(seed.d_value, &w[po.value_w..po.value_w + hd], &mut dhidden);
        axpy(seed.d_value, &trace.hidden, &mut g[po.value_w..po.value_w + hd]);
        g[po.value_b] += seed.d_value;

        relu_mask(&trace.hidden, &mut dhidden);
        outer_acc(&mut g[po.mlp2_w..po.mlp2_w + hd * hd], &dhidden, &trace.a1);
        axpy(T::one(), &dhidden, &mut g[po.mlp2_b..po.mlp2_b + hd]);
        let mut da1 = vec![T::zero(); hd];
        affine_back_input(&w[po.mlp2_w..po.mlp2_w + hd * hd], &dhidden, &mut da1);
        relu_mask(&trace.a1, &mut da1);
        outer_acc(&mut g[po.mlp1_w..po.mlp1_w + hd * hd], &da1, &trace.o);
        axpy(T::one(), &da1, &mut g[po.mlp1_b..po.mlp1_b + hd]);
        let mut d_o = vec![T::zero(); hd];
        affine_back_input(&w[po.mlp1_w..po.mlp1_w + hd * hd], &da1, &mut d_o);
        let xw = trace.x.len();
        outer_acc(&mut g[po.in_w..po.in_w + hd * xw], &d_o, &trace.x);
        axpy(T::one(), &d_o, &mut g[po.in_b..po.in_b + hd]);
        let mut dx = vec![T::zero(); xw];
        affine_back_input(&w[po.in_w..po.in_w + hd * xw], &d_o, &mut dx);
        let (dagent, dtile) = dx.split_at(d);

        // tiles
        match po.conv {
            Some(conv) => {
                let (crop, n1, n2) = (spec.crop, spec.n1, spec.n2);
                let flat = trace.h2.len();
                outer_acc(&mut g[conv.fc_w..conv.fc_w + d * flat], dtile, &trace.h2);
                axpy(T::one(), dtile, &mut g[conv.fc_b..conv.fc_b + d]);
                let mut dh2 = vec![T::zero(); flat];
                affine_back_input(&w[conv.fc_w..conv.fc_w + d * flat], dtile, &mut dh2);
                relu_mask(&trace.h2, &mut dh2);
                let mut dh1 = vec![T::zero(); trace.h1.len()];
                let w2 = &w[conv.w2..conv.w2 + 9 * ch * ch];
                for i in 0..n2 {
                    for j in 0..n2 {
                        let dout = &dh2[(i * n2 + j) * ch..(i * n2 + j + 1) * ch];
                        axpy(T::one(), dout, &mut g[conv.b2..conv.b2 + ch]);
                        for a in 0..3 {
                            for b in 0..3 {
                                let pos = (2 * i + a) * n1 + 2 * j + b;
                                let k = a * 3 + b;
                                let gw = conv.w2 + k * ch * ch;
                                outer_acc(&mut g[gw..gw + ch * ch], dout, &trace.h1[pos * ch..(pos + 1) * ch]);
                                affine_back_input(&w2[k * ch * ch..(k + 1) * ch * ch], dout, &mut dh1[pos * ch..(pos + 1) * ch]);
                            }
                        }
                    }
                }
                relu_mask(&trace.h1, &mut dh1);
                for i in 0..n1 {
                    for j in 0..n1 {
                        let dout = &dh1[(i * n1 + j) * ch..(i * n1 + j + 1) * ch];
                        if dout.iter().all(|v| *v == T::zero()) {
                            continue;
                        }
                        axpy(T::one(), dout, &mut g[conv.b1..conv.b1 + ch]);
                        for a in 0..3 {
                            for b in 0..3 {
                                let key = trace.tile_keys[(2 * i + a) * crop + 2 * j + b];
                                let k = a * 3 + b;
                                let cot = sink.tile_cot[key].get_or_insert_with(|| vec![T::zero(); 9 * ch]);
                                axpy(T::one(), dout, &mut cot[k * ch..(k + 1) * ch]);
                            }
                        }
                    }
                }
            }
            None => {
                let inv = T::of(1.0 / trace.tile_keys.len() as f64);
                for &key in &trace.tile_keys {
                    let cot = sink.tile_cot[key].get_or_insert_with(|| vec![T::zero(); d]);
                    axpy(inv, dtile, cot);
                }
            }
        }

        // agents: g then f
        let mut dg: [Vec<T>; 3] = std::array::from_fn(|_| vec![T::zero(); m * d]);
        {
            let [dq, dk, dv] = &mut dg;
            trace.g_att.backward(&trace.g_qkv[0], &trace.g_qkv[1], &trace.g_qkv[2], d, dagent, dq, dk, dv);
        }
        for (i, dbuf) in dg.iter().enumerate() {
            let off = po.g[i];
            for j in 0..m {
                outer_acc(&mut g[off..off + d * d], &dbuf[j * d..(j + 1) * d], &trace.agent_z[j * d..(j + 1) * d]);
                affine_back_input(&w[off..off + d * d], &dbuf[j * d..(j + 1) * d], &mut dz[j * d..(j + 1) * d]);
            }
        }
        for (j, et) in trace.agents.iter().enumerate() {
            entity_backward(et, &dz[j * d..(j + 1) * d], d, &mut sink.agent_rows);
        }
        Ok(())
    }

    /// Pushes accumulated cotangents through the cached projections.
    pub fn finish(&mut self, mut sink: GradSink<T>) -> Result<Gradients<T>, NeuralError> {
        let pop = sink.population;
        self.check_population(pop)?;
        self.ensure_cache(pop);
        let params = self.params.clone();
        let spec = &params.spec;
        let w = &params.pops[pop];
        let po = &spec.pop;
        let (d, ch) = (spec.embed_dim, spec.channels);
        let mut shared = vec![T::zero(); spec.shared_layout.len];

        // tile entities
        let tile_cot = std::mem::take(&mut sink.tile_cot);
        for (key, cot) in tile_cot.into_iter().enumerate() {
            let Some(cot) = cot else { continue };
            self.ensure_tile(pop, key);
            let entry = self.caches[pop].as_ref().unwrap().tiles[key].as_ref().unwrap();
            let dz = match po.conv {
                Some(conv) => {
                    let mut dz = vec![T::zero(); d];
                    for k in 0..9 {
                        let off = conv.w1 + k * ch * d;
                        outer_acc(&mut sink.local[off..off + ch * d], &cot[k * ch..(k + 1) * ch], &entry.z);
                        affine_back_input(&w[off..off + ch * d], &cot[k * ch..(k + 1) * ch], &mut dz);
                    }
                    dz
                }
                None => cot,
            };
            let values = self.tile_values(key);
            let (_, et) = self.embed_attrs(pop, EntityType::Tile, &values)?;
            entity_backward(&et, &dz, d, &mut sink.tile_rows);
        }

        // attribute rows through f
        let fw = po.f.map(|o| &w[o..o + d * d]);
        let push = |slots: &[EmbedSlot], cots: &[Vec<T>], local: &mut [T], shared: &mut [T]| {
            for (slot, cot) in slots.iter().zip(cots) {
                match *slot {
                    EmbedSlot::Table { offset, rows, .. } => {
                        for r in 0..rows {
                            let c = &cot[r * 3 * d..(r + 1) * 3 * d];
                            if c.iter().all(|v| *v == T::zero()) {
                                continue;
                            }
                            let y = &params.shared[offset + r * d..offset + (r + 1) * d];
                            for i in 0..3 {
                                let ci = &c[i * d..(i + 1) * d];
                                outer_acc(&mut local[po.f[i]..po.f[i] + d * d], ci, y);
                                affine_back_input(fw[i], ci, &mut shared[offset + r * d..offset + (r + 1) * d]);
                            }
                        }
                    }
                    EmbedSlot::Affine { w: wo, b: bo, .. } => {
                        let (sw, sb) = (&params.shared[wo..wo + d], &params.shared[bo..bo + d]);
                        for i in 0..3 {
                            let cs = &cot[i * d..(i + 1) * d];
                            let ci = &cot[(3 + i) * d..(4 + i) * d];
                            outer_acc(&mut local[po.f[i]..po.f[i] + d * d], cs, sw);
                            outer_acc(&mut local[po.f[i]..po.f[i] + d * d], ci, sb);
                            affine_back_input(fw[i], cs, &mut shared[wo..wo + d]);
                            affine_back_input(fw[i], ci, &mut shared[bo..bo + d]);
                        }
                    }
                }
            }
        };
        push(&spec.shared.tile, &sink.tile_rows, &mut sink.local, &mut shared);
        push(&spec.shared.agent, &sink.agent_rows, &mut sink.local, &mut shared);

        // argument rows through proj_a
        let base = spec.shared.moves;
        for r in 0..ARG_ROWS {
            let c = &sink.arg_cot[r * d..(r + 1) * d];
            let row = &params.shared[base + r * d..base + (r + 1) * d];
            outer_acc(&mut sink.local[po.proj_a_w..po.proj_a_w + d * d], c, row);
            axpy(T::one(), c, &mut sink.local[po.proj_a_b..po.proj_a_b + d]);
            affine_back_input(&w[po.proj_a_w..po.proj_a_w + d * d], c, &mut shared[base + r * d..base + (r + 1) * d]);
        }
        Ok(Gradients { population: pop, shared, local: sink.local })
    }
}

/// Backward through one entity's attribute attention into per-row cotangents.
fn entity_backward<T: Scalar>(et: &EntityTrace<T>, dz: &[T], d: usize, rows: &mut [Vec<T>]) {
    let n = et.refs.len();
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n * d], vec![T::zero(); n * d], vec![T::zero(); n * d]);
    et.att.backward(&et.q, &et.k, &et.v, d, dz, &mut dq, &mut dk, &mut dv);
    for (i, r) in et.refs.iter().enumerate() {
        let parts = [&dq[i * d..(i + 1) * d], &dk[i * d..(i + 1) * d], &dv[i * d..(i + 1) * d]];
        let cot = &mut rows[i];
        match *r {
            AttrRef::Row(row) => {
                for (p, src) in parts.iter().enumerate() {
                    axpy(T::one(), src, &mut cot[(row * 3 + p) * d..(row * 3 + p + 1) * d]);
                }
            }
            AttrRef::Cont(x) => {
                for (p, src) in parts.iter().enumerate() {
                    axpy(x, src, &mut cot[p * d..(p + 1) * d]);
                    axpy(T::one(), src, &mut cot[(3 + p) * d..(4 + p) * d]);
                }
            }
        }
    }
}

/// Observation of the same shape as `obs` with agent entities reordered.
pub fn permute_agents(obs: &Observation, order: &[usize]) -> Observation {
    let agents: Vec<AgentEntity> = order.iter().map(|&i| obs.agents[i]).collect();
    Observation { tiles: obs.tiles.clone(), agents }
}
