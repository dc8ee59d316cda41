//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive application in insertion order. Since
//! inputs always precede their consumers, reverse insertion order is a valid
//! reverse topological order and [`Graph::backward`] visits each node once.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::ops::Deref;

use crate::scalar::Scalar;

use super::kernels::{self, AttnDims, BroadcastPlan, PatchDims};
use super::params::ParamStore;
use super::tensor::{check_finite, NumericsError, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Deref for Value<'_, T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize, Box<BroadcastPlan>),
    Sub(usize, usize, Box<BroadcastPlan>),
    Mul(usize, usize, Box<BroadcastPlan>),
    AddScalar(usize),
    MulScalar(usize, T),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    BroadcastTo(usize, Box<BroadcastPlan>),
    MeanAxis { a: usize, axis: usize },
    SumAll(usize),
    MeanAll(usize),
    Softmax(usize),
    LayerNorm { a: usize, rstd: Vec<T> },
    Gelu(usize),
    Silu(usize),
    Embedding { table: usize, indices: Vec<usize> },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        dims: AttnDims,
        probs: Vec<T>,
    },
    Patches { a: usize, dims: PatchDims },
    AvgPool {
        a: usize,
        batch: usize,
        height: usize,
        width: usize,
        channels: usize,
        k: usize,
    },
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    requires_grad: bool,
}

type TrainablePredicate<'p> = Box<dyn Fn(&str) -> bool + 'p>;

/// Recording of primitive applications (the gradient tape).
pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    trainable: Option<TrainablePredicate<'p>>,
    nodes: RefCell<Vec<Node<'p, T>>>,
    bound: RefCell<HashMap<String, Var>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            trainable: None,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Restricts gradient tracking to parameters whose name satisfies `pred`;
    /// the rest are bound as constants.
    pub fn trainable(mut self, pred: impl Fn(&str) -> bool + 'p) -> Self {
        self.trainable = Some(Box::new(pred));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        check_finite(name, value.data())?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// A leaf that gradients are computed for.
    pub fn input(&self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a named parameter from the attached store (once per graph).
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        let t = store
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        let rg = self.trainable.as_ref().is_none_or(|p| p(name));
        let var = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value: Value::Borrowed(t),
                op: Op::Leaf,
                requires_grad: rg,
            });
            Var(nodes.len() - 1)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &*n[v.0].value)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        self.value(v).clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Box<BroadcastPlan>)> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let plan = BroadcastPlan::new(name, ta.shape(), tb.shape())?;
        let data = plan.apply(ta.data(), tb.data(), f);
        Ok((Tensor::new(plan.out_shape.clone(), data)?, Box::new(plan)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a.0, b.0, plan), self.rg(&[a.0, b.0]), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a.0, b.0, plan), self.rg(&[a.0, b.0]), "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a.0, b.0, plan), self.rg(&[a.0, b.0]), "mul")
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Result<Var> {
        let t = self.map(a, |x| x + s);
        self.push(t, Op::AddScalar(a.0), self.rg(&[a.0]), "add_scalar")
    }

    pub fn scale(&self, a: Var, s: T) -> Result<Var> {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::MulScalar(a.0, s), self.rg(&[a.0]), "scale")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let ta = &nodes[a.0].value;
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    /// `a[..., m, k] @ b[k, n]`, or batched `a[B, m, k] @ b[B, k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, op) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            let mismatch = || NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            };
            if sa.is_empty() {
                return Err(mismatch());
            }
            match sb.len() {
                2 => {
                    let k = *sa.last().unwrap();
                    if k != sb[0] {
                        return Err(mismatch());
                    }
                    let n = sb[1];
                    let m = ta.numel() / k.max(1);
                    let mut c = vec![T::zero(); m * n];
                    kernels::matmul_acc(ta.data(), tb.data(), &mut c, m, k, n);
                    let mut shape = sa.to_vec();
                    *shape.last_mut().unwrap() = n;
                    (
                        Tensor::new(shape, c)?,
                        Op::MatMul {
                            a: a.0,
                            b: b.0,
                            batch: 0,
                            m,
                            k,
                            n,
                        },
                    )
                }
                3 => {
                    if sa.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                        return Err(mismatch());
                    }
                    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    let mut c = vec![T::zero(); bs * m * n];
                    for i in 0..bs {
                        kernels::matmul_acc(
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            &mut c[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                    (
                        Tensor::new(vec![bs, m, n], c)?,
                        Op::MatMul {
                            a: a.0,
                            b: b.0,
                            batch: bs,
                            m,
                            k,
                            n,
                        },
                    )
                }
                _ => return Err(mismatch()),
            }
        };
        self.push(out, op, self.rg(&[a.0, b.0]), "matmul")
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.tensor(a).reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(a.0), self.rg(&[a.0]), "reshape")
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes
                .get(inputs.first().map(|v| v.0).unwrap_or(usize::MAX))
                .ok_or(NumericsError::InvalidArgument {
                    op: "concat",
                    msg: "no inputs".into(),
                })?;
            let base = first.value.shape().to_vec();
            if axis >= base.len() {
                return Err(NumericsError::InvalidArgument {
                    op: "concat",
                    msg: format!("axis {axis} out of range for rank {}", base.len()),
                });
            }
            let mut total = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                let ok = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !ok {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = kernels::axis_split(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let len = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        self.push(out, Op::Concat { inputs: ids, axis }, rg, "concat")
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let shape = t.shape();
            if axis >= shape.len() || start + len > shape[axis] {
                return Err(NumericsError::InvalidArgument {
                    op: "narrow",
                    msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
                });
            }
            let (outer, alen, inner) = kernels::axis_split(shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut s = shape.to_vec();
            s[axis] = len;
            Tensor::new(s, data)?
        };
        self.push(out, Op::Narrow { a: a.0, axis, start }, self.rg(&[a.0]), "narrow")
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        let total = self.value(a).shape().get(axis).copied().unwrap_or(0);
        if start != total {
            return Err(NumericsError::InvalidArgument {
                op: "split",
                msg: format!("sizes sum to {start}, axis has {total}"),
            });
        }
        Ok(out)
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let (t, plan) = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let plan = BroadcastPlan::new("broadcast_to", shape, ta.shape())?;
            if plan.out_shape != shape {
                return Err(NumericsError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: shape.to_vec(),
                    rhs: ta.shape().to_vec(),
                });
            }
            let zeros = vec![T::zero(); shape.iter().product()];
            let data = plan.apply(&zeros, ta.data(), |_, y| y);
            (Tensor::new(shape.to_vec(), data)?, Box::new(plan))
        };
        self.push(t, Op::BroadcastTo(a.0, plan), self.rg(&[a.0]), "broadcast_to")
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let shape = t.shape();
            if axis >= shape.len() || shape[axis] == 0 {
                return Err(NumericsError::InvalidArgument {
                    op: "mean_axis",
                    msg: format!("axis {axis} invalid for {shape:?}"),
                });
            }
            let (outer, len, inner) = kernels::axis_split(shape, axis);
            let inv = T::one() / T::of(len as f64);
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &t.data()[(o * len + l) * inner..][..inner];
                    for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            data.iter_mut().for_each(|v| *v *= inv);
            let mut s = shape.to_vec();
            s.remove(axis);
            Tensor::new(s, data)?
        };
        self.push(out, Op::MeanAxis { a: a.0, axis }, self.rg(&[a.0]), "mean_axis")
    }

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0), self.rg(&[a.0]), "sum_all")
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let (s, n) = {
            let t = self.value(a);
            (t.data().iter().copied().sum::<T>(), t.numel())
        };
        if n == 0 {
            return Err(NumericsError::InvalidArgument {
                op: "mean_all",
                msg: "empty tensor".into(),
            });
        }
        let m = s / T::of(n as f64);
        self.push(Tensor::scalar(m), Op::MeanAll(a.0), self.rg(&[a.0]), "mean_all")
    }

    pub fn softmax(&self, a: Var) -> Result<Var> {
        let t = {
            let ta = self.value(a);
            let w = *ta.shape().last().unwrap_or(&1);
            Tensor::new(ta.shape().to_vec(), kernels::softmax_rows(ta.data(), w))?
        };
        self.push(t, Op::Softmax(a.0), self.rg(&[a.0]), "softmax")
    }

    /// Normalisation over the last axis without affine terms. A constant row
    /// maps to zeros.
    pub fn layer_norm(&self, a: Var, eps: T) -> Result<Var> {
        let (t, rstd) = {
            let ta = self.value(a);
            let w = *ta.shape().last().unwrap_or(&1);
            let (out, rstd) = kernels::layer_norm_rows(ta.data(), w, eps);
            (Tensor::new(ta.shape().to_vec(), out)?, rstd)
        };
        self.push(t, Op::LayerNorm { a: a.0, rstd }, self.rg(&[a.0]), "layer_norm")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let t = self.map(a, kernels::gelu);
        self.push(t, Op::Gelu(a.0), self.rg(&[a.0]), "gelu")
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x * kernels::sigmoid(x));
        self.push(t, Op::Silu(a.0), self.rg(&[a.0]), "silu")
    }

    /// Forward value of `a`, with no backward contribution.
    pub fn stop_gradient(&self, a: Var) -> Result<Var> {
        let t = self.tensor(a);
        self.push(t, Op::Leaf, false, "stop_gradient")
    }

    /// Rows of a `[rows, width]` table; output `[indices.len(), width]`.
    pub fn embedding(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = {
            let tt = self.value(table);
            let s = tt.shape();
            if s.len() != 2 {
                return Err(NumericsError::InvalidArgument {
                    op: "embedding",
                    msg: format!("table must be 2-D, got {s:?}"),
                });
            }
            let w = s[1];
            let mut data = Vec::with_capacity(indices.len() * w);
            for &i in indices {
                if i >= s[0] {
                    return Err(NumericsError::InvalidArgument {
                        op: "embedding",
                        msg: format!("index {i} out of range for {} rows", s[0]),
                    });
                }
                data.extend_from_slice(&tt.data()[i * w..(i + 1) * w]);
            }
            Tensor::new(vec![indices.len(), w], data)?
        };
        self.push(
            t,
            Op::Embedding {
                table: table.0,
                indices: indices.to_vec(),
            },
            self.rg(&[table.0]),
            "embedding",
        )
    }

    /// Multi-head attention over `[B, S, D]` operands. `mask` is an optional
    /// `[S_q, S_k]` allow-matrix shared by every batch item and head.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
        let (t, dims, probs) = {
            let nodes = self.nodes.borrow();
            let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let (sq, sk, sv) = (tq.shape(), tk.shape(), tv.shape());
            if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
                return Err(NumericsError::ShapeMismatch {
                    op: "attention",
                    lhs: sq.to_vec(),
                    rhs: sk.to_vec(),
                });
            }
            if heads == 0 || sq[2] % heads != 0 {
                return Err(NumericsError::InvalidArgument {
                    op: "attention",
                    msg: format!("width {} not divisible by {heads} heads", sq[2]),
                });
            }
            let dims = AttnDims {
                batch: sq[0],
                q_len: sq[1],
                k_len: sk[1],
                width: sq[2],
                heads,
            };
            if let Some(m) = mask {
                if m.len() != dims.q_len * dims.k_len {
                    return Err(NumericsError::ShapeMismatch {
                        op: "attention",
                        lhs: vec![dims.q_len, dims.k_len],
                        rhs: vec![m.len()],
                    });
                }
            }
            let (out, probs) = kernels::attention_forward(tq.data(), tk.data(), tv.data(), mask, dims)?;
            (Tensor::new(sq.to_vec(), out)?, dims, probs)
        };
        self.push(
            t,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                dims,
                probs,
            },
            self.rg(&[q.0, k.0, v.0]),
            "attention",
        )
    }

    /// im2col over an NHWC image batch; output `[B, H_out, W_out, k*k*C]`.
    pub fn patches(&self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (t, dims) = {
            let ta = self.value(a);
            let s = ta.shape();
            if s.len() != 4 || kernel == 0 || stride == 0 || s[1] + 2 * pad < kernel || s[2] + 2 * pad < kernel {
                return Err(NumericsError::InvalidArgument {
                    op: "patches",
                    msg: format!("bad geometry {s:?} k={kernel} s={stride} p={pad}"),
                });
            }
            let dims = PatchDims {
                batch: s[0],
                height: s[1],
                width: s[2],
                channels: s[3],
                kernel,
                stride,
                pad,
            };
            let (oh, ow) = dims.out_hw();
            let mut data = vec![T::zero(); dims.batch * oh * ow * dims.patch_len()];
            dims.for_each(|dst, src| data[dst] = ta.data()[src]);
            (Tensor::new(vec![dims.batch, oh, ow, dims.patch_len()], data)?, dims)
        };
        self.push(t, Op::Patches { a: a.0, dims }, self.rg(&[a.0]), "patches")
    }

    /// Non-overlapping `k x k` average pooling over NHWC.
    pub fn avg_pool(&self, a: Var, k: usize) -> Result<Var> {
        let (t, op) = {
            let ta = self.value(a);
            let s = ta.shape();
            if s.len() != 4 || k == 0 || !s[1].is_multiple_of(k) || !s[2].is_multiple_of(k) {
                return Err(NumericsError::InvalidArgument {
                    op: "avg_pool",
                    msg: format!("bad geometry {s:?} k={k}"),
                });
            }
            let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = (h / k, w / k);
            let inv = T::one() / T::of((k * k) as f64);
            let mut data = vec![T::zero(); b * oh * ow * c];
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let src = ((bi * h + y) * w + x) * c;
                        let dst = ((bi * oh + y / k) * ow + x / k) * c;
                        for ch in 0..c {
                            data[dst + ch] += ta.data()[src + ch] * inv;
                        }
                    }
                }
            }
            (
                Tensor::new(vec![b, oh, ow, c], data)?,
                Op::AvgPool {
                    a: a.0,
                    batch: b,
                    height: h,
                    width: w,
                    channels: c,
                    k,
                },
            )
        };
        self.push(t, op, self.rg(&[a.0]), "avg_pool")
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(NumericsError::InvalidArgument {
                op: "backward",
                msg: format!("loss must be a scalar, got {:?}", nodes[loss.0].value.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = nodes[id].op {
                grads[id] = Some(g);
                continue;
            }
            backward_node(&nodes, id, &g, &mut grads);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.bound.borrow().clone(),
        })
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<'_, T>], grads: &mut [Option<Vec<T>>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()]);
    f(slot);
}

fn backward_node<T: Scalar>(nodes: &[Node<'_, T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b, plan) => {
            accumulate(nodes, grads, *a, |d| plan.reduce_into(g, true, d));
            accumulate(nodes, grads, *b, |d| plan.reduce_into(g, false, d));
        }
        Op::Sub(a, b, plan) => {
            accumulate(nodes, grads, *a, |d| plan.reduce_into(g, true, d));
            let neg: Vec<T> = g.iter().map(|&x| -x).collect();
            accumulate(nodes, grads, *b, |d| plan.reduce_into(&neg, false, d));
        }
        Op::Mul(a, b, plan) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                let gb = BroadcastPlan::new("mul", &plan.out_shape, tb.shape())
                    .expect("validated in forward")
                    .apply(g, tb.data(), |x, y| x * y);
                accumulate(nodes, grads, *a, |d| plan.reduce_into(&gb, true, d));
            }
            if nodes[*b].requires_grad {
                let ga = BroadcastPlan::new("mul", &plan.out_shape, ta.shape())
                    .expect("validated in forward")
                    .apply(g, ta.data(), |x, y| x * y);
                accumulate(nodes, grads, *b, |d| plan.reduce_into(&ga, false, d));
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, |d| {
            for (x, &y) in d.iter_mut().zip(g) {
                *x += y;
            }
        }),
        Op::MulScalar(a, s) => accumulate(nodes, grads, *a, |d| {
            for (x, &y) in d.iter_mut().zip(g) {
                *x += y * *s;
            }
        }),
        Op::MatMul { a, b, batch, m, k, n } => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (*m, *k, *n);
            if *batch == 0 {
                accumulate(nodes, grads, *a, |d| kernels::matmul_nt_acc(g, tb.data(), d, m, k, n));
                accumulate(nodes, grads, *b, |d| kernels::matmul_tn_acc(ta.data(), g, d, m, k, n));
            } else {
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    accumulate(nodes, grads, *a, |d| {
                        kernels::matmul_nt_acc(gi, &tb.data()[i * k * n..(i + 1) * k * n], &mut d[i * m * k..(i + 1) * m * k], m, k, n)
                    });
                    accumulate(nodes, grads, *b, |d| {
                        kernels::matmul_tn_acc(&ta.data()[i * m * k..(i + 1) * m * k], gi, &mut d[i * k * n..(i + 1) * k * n], m, k, n)
                    });
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = kernels::axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[*axis];
                accumulate(nodes, grads, inp, |d| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..][..len * inner];
                        for (x, &y) in d[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Narrow { a, axis, start } => {
            let (outer, alen, inner) = kernels::axis_split(nodes[*a].value.shape(), *axis);
            let len = out.shape()[*axis];
            accumulate(nodes, grads, *a, |d| {
                for o in 0..outer {
                    let dst = &mut d[(o * alen + start) * inner..][..len * inner];
                    for (x, &y) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *x += y;
                    }
                }
            });
        }
        Op::BroadcastTo(a, plan) => accumulate(nodes, grads, *a, |d| plan.reduce_into(g, false, d)),
        Op::MeanAxis { a, axis } => {
            let (outer, len, inner) = kernels::axis_split(nodes[*a].value.shape(), *axis);
            let inv = T::one() / T::of(len as f64);
            accumulate(nodes, grads, *a, |d| {
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut d[(o * len + l) * inner..][..inner];
                        for (x, &y) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *x += y * inv;
                        }
                    }
                }
            });
        }
        Op::SumAll(a) => accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
        Op::MeanAll(a) => {
            let inv = T::one() / T::of(nodes[*a].value.numel() as f64);
            accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0] * inv))
        }
        Op::Softmax(a) => {
            let w = *out.shape().last().unwrap_or(&1);
            accumulate(nodes, grads, *a, |d| {
                for ((drow, grow), yrow) in d.chunks_exact_mut(w).zip(g.chunks_exact(w)).zip(out.data().chunks_exact(w)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&x, &y)| x * y).sum();
                    for ((dx, &gy), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dx += y * (gy - dot);
                    }
                }
            });
        }
        Op::LayerNorm { a, rstd } => {
            let w = *out.shape().last().unwrap_or(&1);
            let n = T::of(w as f64);
            accumulate(nodes, grads, *a, |d| {
                for (((drow, grow), yrow), &r) in d
                    .chunks_exact_mut(w)
                    .zip(g.chunks_exact(w))
                    .zip(out.data().chunks_exact(w))
                    .zip(rstd)
                {
                    let mg = grow.iter().copied().sum::<T>() / n;
                    let mgy = grow.iter().zip(yrow).map(|(&x, &y)| x * y).sum::<T>() / n;
                    for ((dx, &gy), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dx += r * (gy - mg - y * mgy);
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, |d| {
                for ((dx, &gy), &xv) in d.iter_mut().zip(g).zip(x.data()) {
                    *dx += gy * kernels::gelu_grad(xv);
                }
            });
        }
        Op::Silu(a) => {
            let x = &nodes[*a].value;
            accumulate(nodes, grads, *a, |d| {
                for ((dx, &gy), &xv) in d.iter_mut().zip(g).zip(x.data()) {
                    let s = kernels::sigmoid(xv);
                    *dx += gy * (s + xv * s * (T::one() - s));
                }
            });
        }
        Op::Embedding { table, indices } => {
            let w = nodes[*table].value.shape()[1];
            accumulate(nodes, grads, *table, |d| {
                for (r, &i) in indices.iter().enumerate() {
                    for (x, &y) in d[i * w..(i + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *x += y;
                    }
                }
            });
        }
        Op::Attention { q, k, v, dims, probs } => {
            let (dq, dk, dv) = kernels::attention_backward(
                nodes[*q].value.data(),
                nodes[*k].value.data(),
                nodes[*v].value.data(),
                probs,
                g,
                *dims,
            );
            for (id, delta) in [(*q, dq), (*k, dk), (*v, dv)] {
                accumulate(nodes, grads, id, |d| {
                    for (x, y) in d.iter_mut().zip(delta) {
                        *x += y;
                    }
                });
            }
        }
        Op::Patches { a, dims } => accumulate(nodes, grads, *a, |d| dims.for_each(|dst, src| d[src] += g[dst])),
        Op::AvgPool {
            a,
            batch,
            height,
            width,
            channels,
            k,
        } => {
            let (oh, ow) = (height / k, width / k);
            let inv = T::one() / T::of((k * k) as f64);
            accumulate(nodes, grads, *a, |d| {
                for bi in 0..*batch {
                    for y in 0..*height {
                        for x in 0..*width {
                            let src = ((bi * height + y) * width + x) * channels;
                            let dst = ((bi * oh + y / k) * ow + x / k) * channels;
                            for ch in 0..*channels {
                                d[src + ch] += g[dst + ch] * inv;
                            }
                        }
                    }
                }
            });
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` when no path reaches it.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("shape recorded"))
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// Names of every parameter that received a gradient, sorted.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .params
            .iter()
            .filter(|(_, v)| self.grads[v.0].is_some())
            .map(|(n, _)| n.clone())
            .collect();
        names.sort();
        names
    }

    pub fn param_slice(&self, name: &str) -> Option<&[T]> {
        self.params
            .get(name)
            .and_then(|v| self.grads[v.0].as_deref())
    }
}
