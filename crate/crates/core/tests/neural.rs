use std::sync::Arc;

use mmoforge_core::config::{default_config, Config, RngStream, StreamName};
use mmoforge_core::engine::WorldState;
use mmoforge_core::neural::{permute_agents, select_arguments, LossSeed, Pick, Policy, PolicyParams};
use mmoforge_core::obsio::{observe, AttrValue, EntityType, Observation};
use mmoforge_core::world::{Pos, Terrain, TileMap};
use rand::{Rng, SeedableRng};

fn toy_config(seed: u64) -> Config {
    let mut c = default_config();
    c.map_width = 12;
    c.map_height = 12;
    c.border_thickness = 3;
    c.obs_crop = 7;
    c.embed_dim = 8;
    c.hidden_dim = 12;
    c.conv_channels = 3;
    c.n_populations = 2;
    c.seed = seed;
    c
}

/// A mixed-terrain world with `n` agents clustered near the middle.
fn toy_world(cfg: &Config, n: usize, seed: u64) -> WorldState {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.total_width(), cfg.total_height());
    let b = cfg.border_thickness;
    let mut map = TileMap::filled(w, h, Terrain::Lava);
    let kinds = [Terrain::Grass, Terrain::Grass, Terrain::Forest, Terrain::Stone, Terrain::Water, Terrain::Scrub];
    for r in b..h - b {
        for c in b..w - b {
            let t = kinds[rng.gen_range(0..kinds.len())];
            map.set_terrain(Pos::new(r as i32, c as i32), t).unwrap();
        }
    }
    let mut state = WorldState::with_map(cfg.clone(), map);
    let mid = (h / 2) as i32;
    for i in 0..n {
        let pos = Pos::new(mid + rng.gen_range(-2..=2), mid + rng.gen_range(-2..=2));
        let id = state.insert_agent(i % cfg.n_populations, pos);
        let a = state.agents.get_mut(&id).unwrap();
        a.food = rng.gen_range(0..=10);
        a.water = rng.gen_range(0..=10);
        a.health = rng.gen_range(1..=10);
    }
    state
}

fn first_obs(state: &WorldState) -> Observation {
    observe(state, *state.agents.keys().next().unwrap()).unwrap()
}

// Direct, cache-free evaluation of the network from named tensors.
struct Oracle {
    t: std::collections::HashMap<String, Vec<f64>>,
    pop: usize,
    d: usize,
    h: usize,
    c: usize,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum()).collect()
}

impl Oracle {
    fn new(p: &PolicyParams<f64>, pop: usize) -> Self {
        let t = p.named_tensors().into_iter().map(|(n, t)| (n, t.data)).collect();
        Self { t, pop, d: p.spec.embed_dim, h: p.spec.hidden_dim, c: p.spec.channels }
    }
    fn s(&self, n: &str) -> &[f64] {
        &self.t[&format!("shared/{n}")]
    }
    fn l(&self, n: &str) -> &[f64] {
        &self.t[&format!("pop{}/{n}", self.pop)]
    }

    fn attend_pool(&self, ys: &[Vec<f64>], prefix: &str) -> Vec<f64> {
        let d = self.d;
        let q: Vec<Vec<f64>> = ys.iter().map(|y| matvec(self.l(&format!("{prefix}.q")), y, d)).collect();
        let k: Vec<Vec<f64>> = ys.iter().map(|y| matvec(self.l(&format!("{prefix}.k")), y, d)).collect();
        let v: Vec<Vec<f64>> = ys.iter().map(|y| matvec(self.l(&format!("{prefix}.v")), y, d)).collect();
        let n = ys.len();
        let mut z = vec![0.0; d];
        for i in 0..n {
            let scores: Vec<f64> =
                (0..n).map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt()).collect();
            let a = softmax(&scores);
            for j in 0..n {
                for c in 0..d {
                    z[c] += a[j] * v[j][c] / n as f64;
                }
            }
        }
        z
    }

    fn entity(&self, kind: &str, names: &[&str], vals: &[AttrValue], norms: &[(f64, f64)]) -> Vec<f64> {
        let d = self.d;
        let mut ys = Vec::new();
        let mut ci = 0;
        for (name, v) in names.iter().zip(vals) {
            match v {
                AttrValue::Discrete(x) => {
                    let table = self.s(&format!("{kind}.{name}"));
                    let min = if name.starts_with("d_") { -(((table.len() / d) / 2) as i64) } else { 0 };
                    let r = (*x as i64 - min) as usize;
                    ys.push(table[r * d..(r + 1) * d].to_vec());
                }
                AttrValue::Continuous(x) => {
                    let (mean, std) = norms[ci];
                    ci += 1;
                    let xn = ((*x as f64 - mean) / std) as f32 as f64;
                    let w = self.s(&format!("{kind}.{name}.w"));
                    let b = self.s(&format!("{kind}.{name}.b"));
                    ys.push((0..d).map(|c| w[c] * xn + b[c]).collect());
                }
            }
        }
        self.attend_pool(&ys, "f")
    }

    /// (o, value, target logits)
    fn run(&self, obs: &Observation, cfg: &Config) -> (Vec<f64>, f64, Vec<f64>) {
        let (d, h, ch) = (self.d, self.h, self.c);
        let agent_names = ["d_row", "d_col", "frozen", "is_self", "population", "same_population", "food", "water", "health", "level"];
        let norms = [
            (cfg.food_max as f64 / 2.0, cfg.food_max as f64 / 4.0),
            (cfg.water_max as f64 / 2.0, cfg.water_max as f64 / 4.0),
            (cfg.health_max as f64 / 2.0, cfg.health_max as f64 / 4.0),
            (5.0, 5.0),
        ];
        let zs: Vec<Vec<f64>> = obs.agents.iter().map(|a| self.entity("agent", &agent_names, &a.attributes(), &norms)).collect();
        let agent_vec = {
            let d = self.d;
            let q: Vec<Vec<f64>> = zs.iter().map(|y| matvec(self.l("g.q"), y, d)).collect();
            let k: Vec<Vec<f64>> = zs.iter().map(|y| matvec(self.l("g.k"), y, d)).collect();
            let v: Vec<Vec<f64>> = zs.iter().map(|y| matvec(self.l("g.v"), y, d)).collect();
            let n = zs.len();
            let mut z = vec![0.0; d];
            for i in 0..n {
                let sc: Vec<f64> = (0..n).map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt()).collect();
                let a = softmax(&sc);
                for j in 0..n {
                    for c in 0..d {
                        z[c] += a[j] * v[j][c] / n as f64;
                    }
                }
            }
            z
        };
        let tile_names = ["terrain", "has_forest_food", "d_row", "d_col"];
        let crop = obs.crop();
        let tz: Vec<Vec<f64>> = obs
            .tiles
            .iter()
            .map(|t| self.entity("tile", &tile_names, &t.0.map(AttrValue::Discrete), &[]))
            .collect();
        let n1 = (crop - 3) / 2 + 1;
        let n2 = (n1 - 3) / 2 + 1;
        let w1 = self.l("conv1.w");
        let b1 = self.l("conv1.b");
        let mut h1 = vec![vec![vec![0.0; ch]; n1]; n1];
        for i in 0..n1 {
            for j in 0..n1 {
                for c in 0..ch {
                    let mut s = b1[c];
                    for a in 0..3 {
                        for b in 0..3 {
                            let z = &tz[(2 * i + a) * crop + 2 * j + b];
                            for e in 0..d {
                                s += w1[((a * 3 + b) * ch + c) * d + e] * z[e];
                            }
                        }
                    }
                    h1[i][j][c] = s.max(0.0);
                }
            }
        }
        let w2 = self.l("conv2.w");
        let b2 = self.l("conv2.b");
        let mut flat = Vec::new();
        for i in 0..n2 {
            for j in 0..n2 {
                for c in 0..ch {
                    let mut s = b2[c];
                    for a in 0..3 {
                        for b in 0..3 {
                            for e in 0..ch {
                                s += w2[((a * 3 + b) * ch + c) * ch + e] * h1[2 * i + a][2 * j + b][e];
                            }
                        }
                    }
                    flat.push(s.max(0.0));
                }
            }
        }
        let tile_vec: Vec<f64> = matvec(self.l("tile_fc.w"), &flat, d).iter().zip(self.l("tile_fc.b")).map(|(a, b)| a + b).collect();
        let x: Vec<f64> = agent_vec.iter().chain(&tile_vec).cloned().collect();
        let o: Vec<f64> = matvec(self.l("in.w"), &x, h).iter().zip(self.l("in.b")).map(|(a, b)| a + b).collect();
        let a1: Vec<f64> = matvec(self.l("mlp1.w"), &o, h).iter().zip(self.l("mlp1.b")).map(|(a, b)| (a + b).max(0.0)).collect();
        let hid: Vec<f64> = matvec(self.l("mlp2.w"), &a1, h).iter().zip(self.l("mlp2.b")).map(|(a, b)| (a + b).max(0.0)).collect();
        let value = hid.iter().zip(self.l("value.w")).map(|(a, b)| a * b).sum::<f64>() + self.l("value.b")[0];
        let kh: Vec<f64> = matvec(self.l("proj_h.w"), &hid, d).iter().zip(self.l("proj_h.b")).map(|(a, b)| a + b).collect();
        let key = |v: &[f64]| -> Vec<f64> { matvec(self.l("proj_a.w"), v, d).iter().zip(self.l("proj_a.b")).map(|(a, b)| a + b).collect() };
        let mut cands = vec![key(self.s("arg.null_target"))];
        cands.extend(zs[1..].iter().map(|z| key(z)));
        let logits = cands.iter().map(|k| (0..d).map(|c| k[c] * kh[c]).sum::<f64>() / (d as f64).sqrt()).collect();
        (o, value, logits)
    }
}

fn perturb_value_head(p: &mut PolicyParams<f64>, seed: u64) {
    // value head starts at zero; give it something to check
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for pop in 0..p.pops.len() {
        let info = p.spec.pop_layout.get("value.w").unwrap().clone();
        for v in &mut p.pops[pop][info.range()] {
            *v = rng.gen_range(-0.3..0.3);
        }
        let b = p.spec.pop_layout.get("value.b").unwrap().offset;
        p.pops[pop][b] = 0.1;
    }
}

#[test]
fn cached_forward_matches_direct_oracle() {
    for seed in 0..5 {
        let cfg = toy_config(seed);
        let mut p: PolicyParams<f64> = PolicyParams::init(&cfg);
        perturb_value_head(&mut p, seed);
        let state = toy_world(&cfg, 4, seed);
        let obs = first_obs(&state);
        let mut policy = Policy::new(Arc::new(p.clone()));
        let trace = policy.evaluate(&obs, [0, 0, 0]).unwrap();
        let (o, v, logits) = Oracle::new(&p, obs.observer().population()).run(&obs, &cfg);
        for (a, b) in trace.o.iter().zip(&o) {
            assert!((a - b).abs() < 1e-10, "o {a} vs {b}");
        }
        assert!((trace.value - v).abs() < 1e-10);
        for (a, b) in trace.target_logits().iter().zip(&logits) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn embed_entity_gradient_of_squared_norm() {
    let cfg = toy_config(3);
    let p: PolicyParams<f64> = PolicyParams::init(&cfg);
    let tile = vec![AttrValue::Discrete(2), AttrValue::Discrete(1), AttrValue::Discrete(-1), AttrValue::Discrete(3)];
    let agent = vec![
        AttrValue::Discrete(1),
        AttrValue::Discrete(-2),
        AttrValue::Discrete(0),
        AttrValue::Discrete(0),
        AttrValue::Discrete(1),
        AttrValue::Discrete(0),
        AttrValue::Continuous(3.0),
        AttrValue::Continuous(9.0),
        AttrValue::Continuous(6.0),
        AttrValue::Continuous(2.0),
    ];
    for (kind, vals) in [(EntityType::Tile, tile), (EntityType::Agent, agent)] {
        let loss = |p: &PolicyParams<f64>| {
            let z = Policy::new(Arc::new(p.clone())).embed_entity(0, kind, &vals).unwrap();
            z.iter().map(|v| v * v).sum::<f64>()
        };
        let mut pol = Policy::new(Arc::new(p.clone()));
        let z = pol.embed_entity(0, kind, &vals).unwrap();
        assert_eq!(z.len(), cfg.embed_dim);
        assert_eq!(pol.embed_entity(0, kind, &vals).unwrap(), z);
        let dz: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
        let mut grad = p.zeros_like();
        pol.embed_entity_backward(0, kind, &vals, &dz).unwrap().add_to(&mut grad);
        let mut checked = 0;
        for i in 0..p.len() {
            let an = grad.get(i);
            let mut up = p.clone();
            *up.get_mut(i) += 1e-3;
            let mut down = p.clone();
            *down.get_mut(i) -= 1e-3;
            let fd = (loss(&up) - loss(&down)) / 2e-3;
            if fd == 0.0 && an == 0.0 {
                continue;
            }
            checked += 1;
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{kind:?} {}: fd {fd} an {an}", p.name_of(i));
        }
        assert!(checked > 0);
    }
}

/// Loss of a short trajectory with fixed choices and detached advantages.
fn traj_loss(p: &PolicyParams<f64>, steps: &[(Observation, [usize; 3], f64, f64)], ent: f64) -> f64 {
    let mut pol = Policy::new(Arc::new(p.clone()));
    steps
        .iter()
        .map(|(obs, ch, ret, adv)| {
            let t = pol.evaluate(obs, *ch).unwrap();
            -adv * t.log_prob() + 0.5 * (ret - t.value).powi(2) - ent * t.entropy()
        })
        .sum()
}

fn traj_pattern(p: &PolicyParams<f64>, steps: &[(Observation, [usize; 3], f64, f64)]) -> Vec<bool> {
    let mut pol = Policy::new(Arc::new(p.clone()));
    steps.iter().flat_map(|(obs, ch, _, _)| pol.evaluate(obs, *ch).unwrap().relu_pattern()).collect()
}

fn traj_grad(p: &PolicyParams<f64>, steps: &[(Observation, [usize; 3], f64, f64)], ent: f64) -> PolicyParams<f64> {
    let mut pol = Policy::new(Arc::new(p.clone()));
    let mut out = p.zeros_like();
    let mut sinks: Vec<_> = (0..p.pops.len()).map(|i| pol.sink(i)).collect();
    for (obs, ch, ret, adv) in steps {
        let t = pol.evaluate(obs, *ch).unwrap();
        let seed = LossSeed { d_logp: -adv, d_value: -(ret - t.value), d_entropy: -ent };
        pol.backward(&t, seed, &mut sinks[t.population]).unwrap();
    }
    for s in sinks {
        pol.finish(s).unwrap().add_to(&mut out);
    }
    out
}

fn toy_steps(cfg: &Config, p: &PolicyParams<f64>, seed: u64) -> Vec<(Observation, [usize; 3], f64, f64)> {
    let state = toy_world(cfg, 3, seed);
    let mut rng = RngStream::new(seed, StreamName::PolicySampling);
    let mut pol = Policy::new(Arc::new(p.clone()));
    let ids: Vec<u32> = state.agents.keys().cloned().collect();
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let obs = observe(&state, *id).unwrap();
            let (_, t) = pol.forward(&obs, &mut rng).unwrap();
            let ret = -(0.95f64).powi(2 - i as i32);
            (obs, t.choices(), ret, ret - t.value)
        })
        .collect()
}

#[test]
fn full_network_matches_central_differences() {
    let eps = 1e-3;
    for seed in 0..3 {
        let cfg = toy_config(seed);
        let mut p: PolicyParams<f64> = PolicyParams::init(&cfg);
        perturb_value_head(&mut p, seed);
        let steps = toy_steps(&cfg, &p, seed);
        let grad = traj_grad(&p, &steps, 0.01);
        let base = traj_pattern(&p, &steps);
        let mut worst = (0.0, String::new());
        let mut kinks = 0;
        for i in 0..p.len() {
            let mut up = p.clone();
            *up.get_mut(i) += eps;
            let mut down = p.clone();
            *down.get_mut(i) -= eps;
            let fd = (traj_loss(&up, &steps, 0.01) - traj_loss(&down, &steps, 0.01)) / (2.0 * eps);
            let an = grad.get(i);
            let kink = traj_pattern(&up, &steps) != base || traj_pattern(&down, &steps) != base;
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if kink {
                // central differences straddle a ReLU boundary here
                kinks += 1;
                continue;
            }
            if rel > worst.0 {
                worst = (rel, format!("{} fd {fd:e} an {an:e} kink {kink}", p.name_of(i)));
            }
        }
        assert!(worst.0 < 1e-3, "seed {seed}: {worst:?}");
        assert!(kinks * 20 <= p.len(), "seed {seed}: {kinks} kink crossings");
        
    }
}

#[test]
fn gradient_is_linear_in_loss_scale_and_zero_off_path() {
    let cfg = toy_config(5);
    let mut p: PolicyParams<f64> = PolicyParams::init(&cfg);
    perturb_value_head(&mut p, 5);
    let state = toy_world(&cfg, 1, 5);
    let obs = first_obs(&state);
    let mut pol = Policy::new(Arc::new(p.clone()));
    let t = pol.evaluate(&obs, [1, 2, 0]).unwrap();
    let run = |k: f64, pol: &mut Policy<f64>| {
        let mut s = pol.sink(t.population);
        pol.backward(&t, LossSeed { d_logp: 0.7 * k, d_value: -0.3 * k, d_entropy: 0.0 }, &mut s).unwrap();
        pol.finish(s).unwrap()
    };
    let g1 = run(1.0, &mut pol);
    let g2 = run(2.0, &mut pol);
    for (a, b) in g1.local.iter().zip(&g2.local).chain(g1.shared.iter().zip(&g2.shared)) {
        assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    // a lone observer has no agent targets; agent tables of unseen populations get nothing
    let pop_table = p.spec.shared_layout.get("agent.population").unwrap().clone();
    let d = cfg.embed_dim;
    let other = 1 - obs.observer().population();
    assert!(g1.shared[pop_table.offset + other * d..pop_table.offset + (other + 1) * d].iter().all(|v| *v == 0.0));
}

#[test]
fn width_fixed_for_any_agent_count() {
    let mut cfg = toy_config(1);
    cfg.map_width = 24;
    cfg.map_height = 24;
    cfg.obs_crop = 15;
    let p: PolicyParams<f32> = PolicyParams::init(&cfg);
    let mut pol = Policy::new(Arc::new(p));
    for n in [1, 32] {
        let mut state = toy_world(&cfg, 0, 2);
        let mid = (cfg.total_height() / 2) as i32;
        for i in 0..n {
            state.insert_agent(0, Pos::new(mid - 2 + (i as i32 % 6), mid - 3 + (i as i32 / 6)));
        }
        let obs = first_obs(&state);
        assert_eq!(obs.agents.len(), n);
        let (o, zs) = pol.embed_observation(&obs).unwrap();
        assert_eq!(o.len(), cfg.hidden_dim);
        assert_eq!(zs.len(), n);
    }
}

#[test]
fn permutation_invariance_and_equivariance() {
    let cfg = toy_config(4);
    let p: PolicyParams<f64> = PolicyParams::init(&cfg);
    let mut pol = Policy::new(Arc::new(p));
    let state = toy_world(&cfg, 6, 4);
    let obs = first_obs(&state);
    let m = obs.agents.len();
    assert!(m > 2);
    let mut order: Vec<usize> = (0..m).collect();
    order[1..].reverse();
    let perm = permute_agents(&obs, &order);
    let a = pol.evaluate(&obs, [0, 0, 0]).unwrap();
    let b = pol.evaluate(&perm, [0, 0, 0]).unwrap();
    // pooling sums in a content order, so the match is bitwise
    assert_eq!(a.o, b.o);
    let (la, lb) = (a.target_logits(), b.target_logits());
    assert_eq!(la[0], lb[0]);
    for (new_pos, &old) in order.iter().enumerate().skip(1) {
        assert_eq!(lb[new_pos], la[old]);
    }
}

#[test]
fn selection_laws() {
    let mut rng = RngStream::new(1, StreamName::PolicySampling);
    let s = select_arguments(&[0.3f32, -0.2], &[1.0, 2.0], Pick::Sample(&mut rng)).unwrap();
    assert_eq!((s.index, s.log_prob), (0, 0.0));
    assert!(select_arguments::<f32>(&[0.3, 0.1], &[], Pick::Greedy).is_err());
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let q: Vec<f32> = (0..4).map(|_| r.gen_range(-3.0..3.0)).collect();
        let k: Vec<f32> = (0..20).map(|_| r.gen_range(-3.0..3.0)).collect();
        let s = select_arguments(&q, &k, Pick::Greedy).unwrap();
        assert!((s.probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
    let draw = |seed| {
        let mut rng = RngStream::new(seed, StreamName::PolicySampling);
        (0..20).map(|_| select_arguments(&[1.0f32, 0.5], &[0.1, 0.2, 0.3, -0.1, 1.0, 1.0], Pick::Sample(&mut rng)).unwrap().index).collect::<Vec<_>>()
    };
    assert_eq!(draw(4), draw(4));
}

#[test]
fn sampled_actions_validate_and_logp_factorizes() {
    let cfg = toy_config(8);
    let p: PolicyParams<f32> = PolicyParams::init(&cfg);
    let mut pol = Policy::new(Arc::new(p));
    let mut rng = RngStream::new(8, StreamName::PolicySampling);
    for seed in 0..20 {
        let state = toy_world(&cfg, 5, seed);
        for id in state.agents.keys() {
            let obs = observe(&state, *id).unwrap();
            let (bundle, t) = pol.forward(&obs, &mut rng).unwrap();
            state.validate_action(*id, &bundle).unwrap();
            let sum: f32 = t.heads.iter().map(|h| h.log_prob).sum();
            assert_eq!(t.log_prob(), sum);
            assert!(t.value.is_finite());
        }
    }
}
