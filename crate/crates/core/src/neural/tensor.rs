//! Dense math on flat row-major buffers, generic over the scalar type so the
//! same code runs in f32 for rollouts and f64 for gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::NeuralError;

pub trait Scalar:
    Float + Default + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NeuralError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NeuralError::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.data.len() / self.rows().max(1);
        &self.data[i * w..(i + 1) * w]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

/// `y += alpha * x`
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `out = W x (+ b)` for `W` of shape rows x cols.
pub fn affine<T: Scalar>(w: &[T], b: Option<&[T]>, x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&w[r * cols..(r + 1) * cols], x) + b.map_or(T::zero(), |b| b[r]);
    }
}

/// `dx += W^T dy`
pub fn affine_back_input<T: Scalar>(w: &[T], dy: &[T], dx: &mut [T]) {
    let cols = dx.len();
    for (r, g) in dy.iter().enumerate() {
        if *g != T::zero() {
            axpy(*g, &w[r * cols..(r + 1) * cols], dx);
        }
    }
}

/// `dW += dy x^T`
pub fn outer_acc<T: Scalar>(dw: &mut [T], dy: &[T], x: &[T]) {
    let cols = x.len();
    for (r, g) in dy.iter().enumerate() {
        if *g != T::zero() {
            axpy(*g, x, &mut dw[r * cols..(r + 1) * cols]);
        }
    }
}

pub fn relu_in_place<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries whose activation was clipped by a ReLU.
pub fn relu_mask<T: Scalar>(activated: &[T], grad: &mut [T]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

/// `softmax(Q K^T / sqrt(d)) V` for row-major `Q` (n_q x d), `K`, `V` (n_k x d).
pub fn scaled_dot_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>, NeuralError> {
    let d = *q.shape.last().unwrap_or(&0);
    if k.rows() == 0 || k.shape != v.shape || *k.shape.last().unwrap_or(&0) != d || q.shape.len() != 2 {
        return Err(NeuralError::Shape(format!(
            "attention shapes q {:?} k {:?} v {:?}",
            q.shape, k.shape, v.shape
        )));
    }
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut out = Tensor::zeros(vec![q.rows(), d]);
    for i in 0..q.rows() {
        let scores: Vec<T> = (0..k.rows()).map(|j| dot(q.row(i), k.row(j)) * scale).collect();
        let a = softmax(&scores);
        let row = &mut out.data[i * d..(i + 1) * d];
        for (j, w) in a.iter().enumerate() {
            axpy(*w, v.row(j), row);
        }
    }
    Ok(out)
}

/// Row indices ordered by the concatenated row contents of `mats`.
fn canonical_rows<T: Scalar>(mats: &[&[T]], d: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        mats.iter()
            .flat_map(|m| m[a * d..(a + 1) * d].iter().zip(&m[b * d..(b + 1) * d]))
            .map(|(x, y)| x.f64().total_cmp(&y.f64()))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Self-attention over `n` items followed by a mean over the outputs.
/// Keeps the attention weights for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct PooledAttention<T> {
    pub n: usize,
    /// Attention weights, n x n.
    pub weights: Vec<T>,
}

impl<T: Scalar> PooledAttention<T> {
    /// Writes the pooled output into `z`.
    ///
    /// Sums run over rows sorted by content, so reordering the input rows
    /// gives a bitwise identical `z`.
    pub fn forward(q: &[T], k: &[T], v: &[T], d: usize, z: &mut [T]) -> Self {
        let n = q.len() / d;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let order = canonical_rows(&[q, k, v], d, n);
        let mut weights = vec![T::zero(); n * n];
        let mut scores = vec![T::zero(); n];
        let mut col_sum = vec![T::zero(); n];
        for &i in &order {
            for (r, &j) in order.iter().enumerate() {
                scores[r] = dot(&q[i * d..(i + 1) * d], &k[j * d..(j + 1) * d]) * scale;
            }
            let a = softmax(&scores);
            for (r, &j) in order.iter().enumerate() {
                col_sum[j] += a[r];
                weights[i * n + j] = a[r];
            }
        }
        z.iter_mut().for_each(|x| *x = T::zero());
        let inv_n = T::of(1.0 / n as f64);
        for &j in &order {
            axpy(col_sum[j] * inv_n, &v[j * d..(j + 1) * d], z);
        }
        Self { n, weights }
    }

    /// Accumulates `dq`, `dk`, `dv` from the gradient of the pooled output.
    pub fn backward(&self, q: &[T], k: &[T], v: &[T], d: usize, dz: &[T], dq: &mut [T], dk: &mut [T], dv: &mut [T]) {
        let n = self.n;
        let inv_n = T::of(1.0 / n as f64);
        let scale = T::of(1.0 / (d as f64).sqrt());
        // every output row receives dz / n
        let g: Vec<T> = dz.iter().map(|&x| x * inv_n).collect();
        let gv: Vec<T> = (0..n).map(|j| dot(&g, &v[j * d..(j + 1) * d])).collect();
        for i in 0..n {
            let a = &self.weights[i * n..(i + 1) * n];
            let mean: T = (0..n).map(|j| a[j] * gv[j]).sum();
            for j in 0..n {
                axpy(a[j], &g, &mut dv[j * d..(j + 1) * d]);
                let ds = a[j] * (gv[j] - mean) * scale;
                if ds != T::zero() {
                    axpy(ds, &k[j * d..(j + 1) * d], &mut dq[i * d..(i + 1) * d]);
                    axpy(ds, &q[i * d..(i + 1) * d], &mut dk[j * d..(j + 1) * d]);
                }
            }
        }
    }
}
