use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::Key;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Visitor over named parameters.
pub trait Params<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn xavier_uniform<T: Scalar>(fan_in: usize, fan_out: usize, key: Key) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = key.rng();
    Tensor::from_fn(vec![fan_in, fan_out], |_| T::from_f64(rng.random_range(-limit..limit))).expect("positive extents")
}

pub(crate) fn normal<T: Scalar>(shape: Vec<usize>, std: f64, key: Key) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let mut rng = key.rng();
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(&mut rng))).expect("positive extents")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(fan_in: usize, fan_out: usize, key: Key) -> Self {
        Self { weight: xavier_uniform(fan_in, fan_out, key), bias: Tensor::zeros(vec![fan_out]).expect("fan_out > 0") }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        x.matmul(&tape.param(&self.weight))?.add_row(&tape.param(&self.bias))
    }

    fn visit_named(&self, w: &str, b: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(w, &self.weight);
        f(b, &self.bias);
    }

    fn visit_named_mut(&mut self, w: &str, b: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(w, &mut self.weight);
        f(b, &mut self.bias);
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.visit_named(&join(prefix, "weight"), &join(prefix, "bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_named_mut(&join(prefix, "weight"), &join(prefix, "bias"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Tensor::ones(vec![dim]).expect("dim > 0"), beta: Tensor::zeros(vec![dim]).expect("dim > 0") }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        x.layernorm(&tape.param(&self.gamma), &tape.param(&self.beta), T::from_f64(LAYERNORM_EPS))
    }
}

impl<T: Scalar> Params<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Multi-head self-attention over `batch` independent sequences stacked as
/// rows of a `[batch * n, dim]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T: Scalar = f32> {
    pub heads: usize,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn new(dim: usize, heads: usize, key: Key) -> Self {
        Self {
            heads,
            q: Linear::new(dim, dim, key.str("wq")),
            k: Linear::new(dim, dim, key.str("wk")),
            v: Linear::new(dim, dim, key.str("wv")),
            out: Linear::new(dim, dim, key.str("wo")),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>, batch: usize) -> Result<Var<'t, T>, TensorError> {
        let shape = x.shape();
        let (rows, dim) = (shape[0], shape[1]);
        let n = rows / batch;
        let h = self.heads;
        let dh = dim / h;
        let split = |v: Var<'t, T>| -> Result<Var<'t, T>, TensorError> {
            v.reshape(&[batch, n, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[batch * h, n, dh])
        };
        let q = split(self.q.forward(tape, x)?)?;
        let k = split(self.k.forward(tape, x)?)?;
        let v = split(self.v.forward(tape, x)?)?;
        let scores = q.matmul(&k.transpose()?)?.scale(T::from_f64(1.0 / (dh as f64).sqrt()))?;
        let attn = scores.softmax(2)?;
        let ctx = attn.matmul(&v)?.reshape(&[batch, h, n, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[rows, dim])?;
        self.out.forward(tape, &ctx)
    }
}

impl<T: Scalar> Params<T> for Attention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (l, w, b) in [(&self.q, "wq", "bq"), (&self.k, "wk", "bk"), (&self.v, "wv", "bv"), (&self.out, "wo", "bo")] {
            l.visit_named(&join(prefix, w), &join(prefix, b), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (l, w, b) in [
            (&mut self.q, "wq", "bq"),
            (&mut self.k, "wk", "bk"),
            (&mut self.v, "wv", "bv"),
            (&mut self.out, "wo", "bo"),
        ] {
            l.visit_named_mut(&join(prefix, w), &join(prefix, b), f);
        }
    }
}

/// Pre-norm transformer block: attention and a GELU MLP, each residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar = f32> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Block<T> {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, key: Key) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(dim, heads, key.str("attn")),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, dim * mlp_ratio, key.str("fc1")),
            fc2: Linear::new(dim * mlp_ratio, dim, key.str("fc2")),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>, batch: usize) -> Result<Var<'t, T>, TensorError> {
        let a = self.attn.forward(tape, &self.norm1.forward(tape, x)?, batch)?;
        let x = x.add(&a)?;
        let h = self.fc1.forward(tape, &self.norm2.forward(tape, &x)?)?.gelu()?;
        x.add(&self.fc2.forward(tape, &h)?)
    }
}

impl<T: Scalar> Params<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

/// Parameters in one block of width `dim`.
pub fn block_param_count(dim: usize, mlp_ratio: usize) -> usize {
    let hidden = dim * mlp_ratio;
    2 * dim                        // norm1
        + 4 * (dim * dim + dim)    // q, k, v, out
        + 2 * dim                  // norm2
        + dim * hidden + hidden    // fc1
        + hidden * dim + dim       // fc2
}

/// Fixed 2D sine-cosine table `[rows * cols, dim]`: the first half of each
/// row encodes the grid row, the second half the column.
pub fn sincos_2d<T: Scalar>(rows: usize, cols: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let quarter = half / 2;
    let mut data = Vec::with_capacity(rows * cols * dim);
    let encode = |pos: f64, out: &mut Vec<T>| {
        let freqs = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64));
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|w| ((pos * w).sin(), (pos * w).cos())).unzip();
        out.extend(sin.into_iter().chain(cos).map(T::from_f64));
    };
    for r in 0..rows {
        for c in 0..cols {
            encode(r as f64, &mut data);
            encode(c as f64, &mut data);
        }
    }
    Tensor::new(vec![rows * cols, dim], data).expect("dim divisible by 4")
}
