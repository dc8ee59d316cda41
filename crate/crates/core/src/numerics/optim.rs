use std::collections::BTreeMap;

use crate::scalar::Scalar;

use super::params::ParamStore;
use super::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update with learning rate `lr`; `grads` yields
    /// `(name, gradient)` for every parameter that should move.
    pub fn update<'a>(&mut self, params: &mut ParamStore<T>, grads: impl IntoIterator<Item = (&'a str, &'a [T])>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step_size = T::of(lr / bc1);
        let decay = T::of(1.0 - lr * self.weight_decay);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g)
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv = *pv * decay - step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}
