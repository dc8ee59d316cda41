//! Parameterised layers built from graph primitives. Layers only hold the
//! names of their parameters; values live in a [`ParamStore`].

use rand::Rng;

use crate::scalar::Scalar;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::{Result, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let std = (1.0 / self.in_dim as f64).sqrt();
        store.insert(self.weight.clone(), Tensor::randn([self.in_dim, self.out_dim], std, rng));
        store.insert(self.bias.clone(), Tensor::zeros([self.out_dim]));
    }

    pub fn init_zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(self.weight.clone(), Tensor::zeros([self.in_dim, self.out_dim]));
        store.insert(self.bias.clone(), Tensor::zeros([self.out_dim]));
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, g.param(&self.weight)?)?;
        g.add(y, g.param(&self.bias)?)
    }

    pub fn names(&self) -> [&str; 2] {
        [&self.weight, &self.bias]
    }
}

/// Layer normalisation with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            dim,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(self.gamma.clone(), Tensor::ones([self.dim]));
        store.insert(self.beta.clone(), Tensor::zeros([self.dim]));
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, T::of(LN_EPS))?;
        let n = g.mul(n, g.param(&self.gamma)?)?;
        g.add(n, g.param(&self.beta)?)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, dim: usize, hidden: usize, out: usize) -> Self {
        Self {
            fc1: Linear::new(&format!("{prefix}.fc1"), dim, hidden),
            fc2: Linear::new(&format!("{prefix}.fc2"), hidden, out),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let h = g.gelu(self.fc1.forward(g, x)?)?;
        self.fc2.forward(g, h)
    }
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, dim: usize, kv_dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(&format!("{prefix}.q"), dim, dim),
            k: Linear::new(&format!("{prefix}.k"), kv_dim, dim),
            v: Linear::new(&format!("{prefix}.v"), kv_dim, dim),
            o: Linear::new(&format!("{prefix}.o"), dim, dim),
            heads,
        }
    }

    pub fn layers(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for l in self.layers() {
            l.init(store, rng);
        }
    }

    /// `x_q: [B, S_q, D]`, `x_kv: [B, S_k, D_kv]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x_q: Var, x_kv: Var, mask: Option<&[bool]>) -> Result<Var> {
        let q = self.q.forward(g, x_q)?;
        let k = self.k.forward(g, x_kv)?;
        let v = self.v.forward(g, x_kv)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.o.forward(g, a)
    }
}

/// Fixed sinusoidal embedding of (possibly fractional) positions:
/// `[sin(p w_0), .., sin(p w_{h-1}), cos(p w_0), .., cos(p w_{h-1})]` with
/// `w_i = 10000^{-i/h}` and `h = dim / 2`.
pub fn sinusoidal_embedding<T: Scalar>(positions: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        let start = data.len();
        for i in 0..half {
            let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::of((p * w).sin()));
        }
        for i in 0..half {
            let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::of((p * w).cos()));
        }
        data.resize(start + dim, T::zero());
    }
    Tensor::new(vec![positions.len(), dim], data).expect("consistent shape")
}
