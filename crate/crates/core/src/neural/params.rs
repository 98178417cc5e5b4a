//! Parameter layout and storage.
//!
//! Parameters live in flat buffers: one shared block of embedding tables used
//! by every population, and one block per population for everything else.
//! Offsets are resolved once from (Schema, Config) so the hot loops index
//! slices directly.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use super::tensor::{Scalar, Tensor};
use super::NeuralError;
use crate::config::{Config, RngStream, StreamName, TileAggregation};
use crate::obsio::{build_schema, AttributeKind, AttributeSpec, Schema};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Init range is +-1/sqrt(fan_in); zero means zero-initialized.
    pub fan_in: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub len: usize,
}

impl Layout {
    fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize) -> usize {
        let offset = self.len;
        let info = TensorInfo { name: name.into(), shape, offset, fan_in };
        self.len += info.len();
        self.tensors.push(info);
        offset
    }

    pub fn get(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Where one attribute's embedder lives in the shared block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmbedSlot {
    /// Lookup table; row index is `value - min`.
    Table { offset: usize, rows: usize, min: i16 },
    /// `y = w * x_norm + b`.
    Affine { w: usize, b: usize, mean: f32, std: f32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedOffsets {
    pub tile: Vec<EmbedSlot>,
    pub agent: Vec<EmbedSlot>,
    /// 5 x d, in engine move order.
    pub moves: usize,
    /// 3 x d, melee, range, mage.
    pub styles: usize,
    pub null_target: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvOffsets {
    /// 9 x C x d, kernel offset major.
    pub w1: usize,
    pub b1: usize,
    /// 9 x C x C.
    pub w2: usize,
    pub b2: usize,
    /// d x (n2 * n2 * C).
    pub fc_w: usize,
    pub fc_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PopOffsets {
    /// Attention over attributes: Q, K, V.
    pub f: [usize; 3],
    /// Attention over agent entities: Q, K, V.
    pub g: [usize; 3],
    pub conv: Option<ConvOffsets>,
    pub in_w: usize,
    pub in_b: usize,
    pub mlp1_w: usize,
    pub mlp1_b: usize,
    pub mlp2_w: usize,
    pub mlp2_b: usize,
    pub proj_h_w: usize,
    pub proj_h_b: usize,
    pub proj_a_w: usize,
    pub proj_a_b: usize,
    pub value_w: usize,
    pub value_b: usize,
}

/// Everything about the network shape; a pure function of (Schema, Config).
#[derive(Clone, Debug)]
pub struct NetSpec {
    pub schema: Schema,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub channels: usize,
    pub crop: usize,
    /// Side of the first and second convolution outputs.
    pub n1: usize,
    pub n2: usize,
    pub n_populations: usize,
    pub config_hash: u64,
    pub shared_layout: Layout,
    pub pop_layout: Layout,
    pub shared: SharedOffsets,
    pub pop: PopOffsets,
    /// Number of distinct tile attribute combinations.
    pub tile_keys: usize,
}

impl NetSpec {
    pub fn new(cfg: &Config) -> Self {
        let schema = build_schema(cfg);
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim;
        let c = cfg.conv_channels;
        let crop = cfg.obs_crop;
        let n1 = if crop >= 3 { (crop - 3) / 2 + 1 } else { 0 };
        let n2 = if n1 >= 3 { (n1 - 3) / 2 + 1 } else { 0 };

        let mut sl = Layout::default();
        let embed = |prefix: &str, spec: &AttributeSpec, sl: &mut Layout| match spec.kind {
            AttributeKind::Discrete { min, .. } => {
                let rows = spec.kind.cardinality().unwrap();
                let offset = sl.add(format!("{prefix}.{}", spec.name), vec![rows, d], 1);
                EmbedSlot::Table { offset, rows, min }
            }
            AttributeKind::Continuous { mean, std } => {
                let w = sl.add(format!("{prefix}.{}.w", spec.name), vec![d], 1);
                let b = sl.add(format!("{prefix}.{}.b", spec.name), vec![d], 1);
                EmbedSlot::Affine { w, b, mean, std }
            }
        };
        let tile = schema.tile.attributes.iter().map(|s| embed("tile", s, &mut sl)).collect();
        let agent = schema.agent.attributes.iter().map(|s| embed("agent", s, &mut sl)).collect();
        let moves = sl.add("arg.move", vec![5, d], 1);
        let styles = sl.add("arg.style", vec![3, d], 1);
        let null_target = sl.add("arg.null_target", vec![d], 1);
        let shared = SharedOffsets { tile, agent, moves, styles, null_target };

        let mut pl = Layout::default();
        let f = ["q", "k", "v"].map(|n| pl.add(format!("f.{n}"), vec![d, d], d));
        let g = ["q", "k", "v"].map(|n| pl.add(format!("g.{n}"), vec![d, d], d));
        let (conv, tile_width) = match cfg.tile_aggregation {
            TileAggregation::Conv => {
                let flat = n2 * n2 * c;
                let conv = ConvOffsets {
                    w1: pl.add("conv1.w", vec![9, c, d], 9 * d),
                    b1: pl.add("conv1.b", vec![c], 9 * d),
                    w2: pl.add("conv2.w", vec![9, c, c], 9 * c),
                    b2: pl.add("conv2.b", vec![c], 9 * c),
                    fc_w: pl.add("tile_fc.w", vec![d, flat], flat),
                    fc_b: pl.add("tile_fc.b", vec![d], flat),
                };
                (Some(conv), d)
            }
            TileAggregation::MeanPool => (None, d),
        };
        let in_w = pl.add("in.w", vec![h, d + tile_width], d + tile_width);
        let in_b = pl.add("in.b", vec![h], d + tile_width);
        let mlp1_w = pl.add("mlp1.w", vec![h, h], h);
        let mlp1_b = pl.add("mlp1.b", vec![h], h);
        let mlp2_w = pl.add("mlp2.w", vec![h, h], h);
        let mlp2_b = pl.add("mlp2.b", vec![h], h);
        let proj_h_w = pl.add("proj_h.w", vec![d, h], h);
        let proj_h_b = pl.add("proj_h.b", vec![d], h);
        let proj_a_w = pl.add("proj_a.w", vec![d, d], d);
        let proj_a_b = pl.add("proj_a.b", vec![d], d);
        let value_w = pl.add("value.w", vec![h], 0);
        let value_b = pl.add("value.b", vec![1], 0);
        let pop = PopOffsets {
            f,
            g,
            conv,
            in_w,
            in_b,
            mlp1_w,
            mlp1_b,
            mlp2_w,
            mlp2_b,
            proj_h_w,
            proj_h_b,
            proj_a_w,
            proj_a_b,
            value_w,
            value_b,
        };
        let tile_keys = schema.tile.attributes.iter().map(|a| a.kind.cardinality().unwrap()).product();
        Self {
            schema,
            embed_dim: d,
            hidden_dim: h,
            channels: c,
            crop,
            n1,
            n2,
            n_populations: cfg.n_populations,
            config_hash: cfg.hash(),
            shared_layout: sl,
            pop_layout: pl,
            shared,
            pop,
            tile_keys,
        }
    }

    pub fn param_count(&self) -> usize {
        self.shared_layout.len + self.n_populations * self.pop_layout.len
    }
}

#[derive(Clone, Debug)]
pub struct PolicyParams<T = f32> {
    pub spec: Arc<NetSpec>,
    pub shared: Vec<T>,
    pub pops: Vec<Vec<T>>,
}

fn fill<T: Scalar>(layout: &Layout, buf: &mut [T], rng: &mut RngStream) {
    for t in &layout.tensors {
        if t.fan_in == 0 {
            continue;
        }
        let a = 1.0 / (t.fan_in as f64).sqrt();
        for v in &mut buf[t.range()] {
            *v = T::of(rng.gen_range(-a..a));
        }
    }
}

impl<T: Scalar> PolicyParams<T> {
    /// Fresh parameters drawn from the `init` stream of `cfg.seed`.
    pub fn init(cfg: &Config) -> Self {
        let spec = Arc::new(NetSpec::new(cfg));
        let mut rng = RngStream::new(cfg.seed, StreamName::Init);
        let mut shared = vec![T::zero(); spec.shared_layout.len];
        fill(&spec.shared_layout, &mut shared, &mut rng);
        let pops = (0..spec.n_populations)
            .map(|_| {
                let mut p = vec![T::zero(); spec.pop_layout.len];
                fill(&spec.pop_layout, &mut p, &mut rng);
                p
            })
            .collect();
        Self { spec, shared, pops }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            shared: vec![T::zero(); self.shared.len()],
            pops: self.pops.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::of(x.f64())).collect();
        PolicyParams { spec: self.spec.clone(), shared: conv(&self.shared), pops: self.pops.iter().map(conv).collect() }
    }

    pub fn n_populations(&self) -> usize {
        self.pops.len()
    }

    /// Every tensor in a fixed order: `shared/<name>` then `pop<i>/<name>`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for t in &self.spec.shared_layout.tensors {
            out.push((format!("shared/{}", t.name), Tensor { shape: t.shape.clone(), data: self.shared[t.range()].to_vec() }));
        }
        for (i, p) in self.pops.iter().enumerate() {
            for t in &self.spec.pop_layout.tensors {
                out.push((format!("pop{i}/{}", t.name), Tensor { shape: t.shape.clone(), data: p[t.range()].to_vec() }));
            }
        }
        out
    }

    /// The full tensor set one population's policy reads, shared tables included.
    pub fn population_view(&self, population: usize) -> Vec<(String, Tensor<T>)> {
        let p = &self.pops[population];
        let shared = self.spec.shared_layout.tensors.iter().map(|t| {
            (format!("shared/{}", t.name), Tensor { shape: t.shape.clone(), data: self.shared[t.range()].to_vec() })
        });
        let local = self
            .spec
            .pop_layout
            .tensors
            .iter()
            .map(|t| (t.name.clone(), Tensor { shape: t.shape.clone(), data: p[t.range()].to_vec() }));
        shared.chain(local).collect()
    }

    /// Flat view over all values, shared block first.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.shared.iter().chain(self.pops.iter().flatten())
    }

    pub fn get(&self, index: usize) -> T {
        let s = self.shared.len();
        if index < s {
            self.shared[index]
        } else {
            let p = self.spec.pop_layout.len;
            self.pops[(index - s) / p][(index - s) % p]
        }
    }

    pub fn get_mut(&mut self, index: usize) -> &mut T {
        let s = self.shared.len();
        if index < s {
            &mut self.shared[index]
        } else {
            let p = self.spec.pop_layout.len;
            &mut self.pops[(index - s) / p][(index - s) % p]
        }
    }

    pub fn len(&self) -> usize {
        self.shared.len() + self.pops.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Name of the tensor that owns flat index `index`.
    pub fn name_of(&self, index: usize) -> String {
        let s = self.shared.len();
        let (prefix, layout, local) = if index < s {
            ("shared".to_string(), &self.spec.shared_layout, index)
        } else {
            let p = self.spec.pop_layout.len;
            (format!("pop{}", (index - s) / p), &self.spec.pop_layout, (index - s) % p)
        };
        let t = layout.tensors.iter().find(|t| t.range().contains(&local)).expect("index in layout");
        format!("{prefix}/{}[{}]", t.name, local - t.offset)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn check_compatible(&self, other_spec: &NetSpec) -> Result<(), NeuralError> {
        if self.spec.shared_layout != other_spec.shared_layout || self.spec.pop_layout != other_spec.pop_layout {
            return Err(NeuralError::Mismatch("parameter layouts differ".into()));
        }
        Ok(())
    }

    /// SHA-256 of the little-endian bytes of every value, in flat order.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.iter() {
            h.update(v.f64().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_config;

    #[test]
    fn count_is_pure_function_of_config() {
        let cfg = default_config();
        let a = NetSpec::new(&cfg);
        let b = NetSpec::new(&cfg);
        assert_eq!(a.param_count(), b.param_count());
        let d = cfg.embed_dim;
        // tile tables: 6 + 2 + 15 + 15 rows; agent tables: 15+15+2+2+8+2 rows + 4 affine pairs
        let shared = (38 + 44) * d + 8 * d + 9 * d;
        assert_eq!(a.shared_layout.len, shared);
        let mut mp = cfg.clone();
        mp.tile_aggregation = TileAggregation::MeanPool;
        assert!(NetSpec::new(&mp).pop_layout.len < a.pop_layout.len);
        assert_eq!(a.tile_keys, 2700);
        assert_eq!((a.n1, a.n2), (7, 3));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = default_config();
        let p: PolicyParams<f32> = PolicyParams::init(&cfg);
        let q: PolicyParams<f32> = PolicyParams::init(&cfg);
        assert_eq!(p.hash_hex(), q.hash_hex());
        for t in &p.spec.pop_layout.tensors {
            let vals = &p.pops[0][t.range()];
            if t.fan_in == 0 {
                assert!(vals.iter().all(|&v| v == 0.0), "{}", t.name);
            } else {
                let a = 1.0 / (t.fan_in as f32).sqrt();
                assert!(vals.iter().all(|v| v.abs() <= a), "{}", t.name);
            }
        }
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(PolicyParams::<f32>::init(&other).hash_hex(), p.hash_hex());
    }

    #[test]
    fn flat_indexing_covers_all_blocks() {
        let mut cfg = default_config();
        cfg.n_populations = 2;
        let mut p: PolicyParams<f64> = PolicyParams::init(&cfg);
        let n = p.len();
        *p.get_mut(n - 1) = 42.0;
        assert_eq!(p.pops[1].last(), Some(&42.0));
        assert_eq!(p.name_of(n - 1), "pop1/value.b[0]");
        assert_eq!(p.name_of(0), "shared/tile.terrain[0]");
        assert_eq!(p.named_tensors().len(), p.spec.shared_layout.tensors.len() + 2 * p.spec.pop_layout.tensors.len());
    }
}
