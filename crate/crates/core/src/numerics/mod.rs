//! Dense tensors, a reverse-mode gradient tape and the few layers the model
//! is assembled from.

pub mod archive;
mod finite_diff;
mod graph;
pub mod kernels;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use finite_diff::{finite_diff_grad, max_relative_error};
pub use graph::{Gradients, Graph, Var};
pub use optim::{cosine_lr, AdamW};
pub use params::ParamStore;
pub use tensor::{NumericsError, Result, Tensor};

use crate::scalar::Scalar;

/// Single-head attention over `[S, D]` operands with an `[S, S]` allow-mask.
pub fn masked_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    let g = Graph::new();
    let lift = |t: &Tensor<T>| -> Result<Var> {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        g.constant(t.clone().reshape(s)?)
    };
    let (qv, kv, vv) = (lift(q)?, lift(k)?, lift(v)?);
    let out = g.attention(qv, kv, vv, 1, Some(mask))?;
    g.tensor(out).reshape(q.shape().to_vec())
}

/// Converts a boolean allow-matrix into additive logits: 0 where allowed,
/// `-inf` where excluded.
pub fn mask_to_logits<T: Scalar>(mask: &[bool]) -> Vec<T> {
    mask.iter()
        .map(|&m| if m { T::zero() } else { T::neg_infinity() })
        .collect()
}
