//! Diffusion policy over bimanual action chunks: schedule, samplers and the
//! two-stage transformer denoiser.

mod denoiser;
mod schedule;

use rand::Rng;

pub use denoiser::{merge_self_attention, self_attn_prefix, Denoiser, DenoiserConfig, Stage, PREFIX};
pub use schedule::{
    cosine_schedule, ddim_sample, ddim_sample_from, ddim_step, ddim_steps, ddpm_reverse_step, forward_diffuse, predict_x0, NoiseSchedule,
    COSINE_OFFSET, MIN_RATIO, X0_CLIP,
};

use crate::numerics::{Graph, NumericsError, Result, Tensor, Var};
use crate::Scalar;

/// Splits `[.., A]` along the last axis into the left `[.., A/2]` and right
/// `[.., A/2]` halves.
pub fn split_actions<T: Scalar>(a: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = a.shape();
    let width = *shape.last().unwrap_or(&0);
    if width == 0 || !width.is_multiple_of(2) {
        return Err(NumericsError::InvalidArgument {
            op: "split_actions",
            msg: format!("action width {width} is not a positive even number"),
        });
    }
    let half = width / 2;
    let mut l = Vec::with_capacity(a.numel() / 2);
    let mut r = Vec::with_capacity(a.numel() / 2);
    for row in a.data().chunks(width) {
        l.extend_from_slice(&row[..half]);
        r.extend_from_slice(&row[half..]);
    }
    let mut hs = shape.to_vec();
    *hs.last_mut().expect("non-empty shape") = half;
    Ok((Tensor::new(hs.clone(), l)?, Tensor::new(hs, r)?))
}

/// Inverse of [`split_actions`].
pub fn merge_actions<T: Scalar>(left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>> {
    if left.shape() != right.shape() || left.shape().is_empty() {
        return Err(NumericsError::ShapeMismatch {
            op: "merge_actions",
            lhs: left.shape().to_vec(),
            rhs: right.shape().to_vec(),
        });
    }
    let half = *left.shape().last().expect("non-empty shape");
    let mut data = Vec::with_capacity(2 * left.numel());
    for (l, r) in left.data().chunks(half.max(1)).zip(right.data().chunks(half.max(1))) {
        data.extend_from_slice(l);
        data.extend_from_slice(r);
    }
    let mut shape = left.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = 2 * half;
    Tensor::new(shape, data)
}

/// Mean squared error between a noise prediction and the true noise.
pub fn noise_mse<T: Scalar>(g: &Graph<'_, T>, eps_hat: Var, eps: &Tensor<T>) -> Result<Var> {
    let d = g.sub(eps_hat, g.constant(eps.clone())?)?;
    g.mean_all(g.mul(d, d)?)
}

/// Draws one diffusion step per batch item uniformly from `1..=k_steps`.
pub fn sample_steps<R: Rng + ?Sized>(batch: usize, k_steps: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(1..=k_steps)).collect()
}

/// Forward-diffuses each batch item of `a0: [B, ..]` at its own step.
pub fn diffuse_batch<T: Scalar>(a0: &Tensor<T>, steps: &[usize], eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    let b = a0.shape()[0];
    if steps.len() != b || a0.shape() != eps.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "diffuse_batch",
            lhs: a0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let per = a0.numel() / b.max(1);
    let mut out = Vec::with_capacity(a0.numel());
    for (i, &k) in steps.iter().enumerate() {
        let item = |t: &Tensor<T>| Tensor::new([per], t.data()[i * per..(i + 1) * per].to_vec());
        out.extend(forward_diffuse(&item(a0)?, k, &item(eps)?, sched)?.into_data());
    }
    Tensor::new(a0.shape().to_vec(), out)
}
