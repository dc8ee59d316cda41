//! The assembled network: perception, quantised coordination and the
//! diffusion denoiser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coordination::{quantize_tokens, CodebookConfig, CodebookPair, QuantResult};
use crate::numerics::{Graph, NumericsError, ParamStore, Result, Tensor, Var};
use crate::perception::{ObservationBatch, Perception, PerceptionConfig, ARM_TOKENS};
use crate::policy::{
    cosine_schedule, ddim_sample_from, diffuse_batch, merge_actions, noise_mse, sample_steps, split_actions, Denoiser,
    DenoiserConfig, NoiseSchedule, Stage,
};
use crate::{Arm, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub perception: PerceptionConfig,
    pub codebook: CodebookConfig,
    pub denoiser: DenoiserConfig,
    pub k_steps: usize,
    pub ddim_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            perception: PerceptionConfig::default(),
            codebook: CodebookConfig::default(),
            denoiser: DenoiserConfig::default(),
            k_steps: 100,
            ddim_steps: 10,
        }
    }
}

impl ModelConfig {
    /// Condition tokens per arm.
    pub fn cond_len(&self) -> usize {
        let p = &self.perception;
        p.latents + ARM_TOKENS + p.head_tokens
    }
}

/// Min/max action normalisation to `[-1, 1]` per dimension. Constant
/// dimensions map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionNorm {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

const MIN_RANGE: f64 = 1e-6;

impl ActionNorm {
    pub fn fit<'a>(actions: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for a in actions {
            for i in 0..dim {
                min[i] = min[i].min(a[i]);
                max[i] = max[i].max(a[i]);
            }
        }
        for i in 0..dim {
            if !min[i].is_finite() {
                (min[i], max[i]) = (0.0, 0.0);
            }
        }
        Self { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn normalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(i, &v)| {
                let r = self.max[i] - self.min[i];
                if r < MIN_RANGE {
                    0.0
                } else {
                    2.0 * (v - self.min[i]) / r - 1.0
                }
            })
            .collect()
    }

    pub fn denormalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(i, &v)| {
                let r = self.max[i] - self.min[i];
                if r < MIN_RANGE {
                    self.min[i]
                } else {
                    (v + 1.0) * 0.5 * r + self.min[i]
                }
            })
            .collect()
    }
}

/// Condition tokens for both arms plus the quantisation bookkeeping.
#[derive(Debug, Clone)]
pub struct Conditions<T> {
    pub q_left: Var,
    pub q_right: Var,
    pub vq_loss: Var,
    pub assignment: QuantResult<T>,
}

/// Scalar loss terms of one batch.
#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub diff_left: Var,
    pub diff_right: Var,
    pub vq: Option<Var>,
    pub total: Var,
}

#[derive(Debug, Clone)]
pub struct CubicModel {
    pub cfg: ModelConfig,
    pub perception: Perception,
    pub denoiser: Denoiser,
    pub sched: NoiseSchedule,
}

impl CubicModel {
    pub fn new(cfg: ModelConfig, stage: Stage) -> Result<Self> {
        let p = &cfg.perception;
        if p.width != cfg.denoiser.cond_dim {
            return Err(NumericsError::InvalidArgument {
                op: "model",
                msg: format!("token width {} differs from condition width {}", p.width, cfg.denoiser.cond_dim),
            });
        }
        Ok(Self {
            perception: Perception::new(cfg.perception.clone())?,
            denoiser: Denoiser::new(cfg.denoiser.clone(), stage)?,
            sched: cosine_schedule(cfg.k_steps)?,
            cfg,
        })
    }

    pub fn stage(&self) -> Stage {
        self.denoiser.stage
    }

    pub fn with_stage(&self, stage: Stage) -> Self {
        Self {
            denoiser: self.denoiser.with_stage(stage),
            ..self.clone()
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.perception.init(&mut store, rng);
        let c = &self.cfg.codebook;
        CodebookPair::<T>::new(c.size, self.cfg.perception.width, c.levels, c.init_std, rng).write_to(&mut store);
        self.denoiser.init(&mut store, rng, true);
        store
    }

    /// Perception, quantisation and condition assembly.
    pub fn conditions<T: Scalar>(&self, g: &Graph<'_, T>, obs: &ObservationBatch<T>, books: &CodebookPair<T>) -> Result<Conditions<T>> {
        let agg = self.perception.aggregate(g, obs)?;
        let (ql, qr) = match (agg.left.latents, agg.right.latents) {
            (Some(ll), Some(rl)) => (ll, rl),
            _ => (
                g.concat(&[agg.left.arm_tokens, agg.head], 1)?,
                g.concat(&[agg.right.arm_tokens, agg.head], 1)?,
            ),
        };
        let qt = quantize_tokens(g, books, ql, qr, &self.cfg.codebook)?;
        let assemble = |st: Var, arm: Arm| -> Result<Var> {
            if self.cfg.perception.latents > 0 {
                g.concat(&[st, agg.arm(arm).arm_tokens, agg.head], 1)
            } else {
                Ok(st)
            }
        };
        Ok(Conditions {
            q_left: assemble(qt.st_left, Arm::Left)?,
            q_right: assemble(qt.st_right, Arm::Right)?,
            vq_loss: qt.vq_loss,
            assignment: qt.assignment,
        })
    }

    /// Per-arm noise-prediction losses on normalised `[B, H, A]` action chunks,
    /// one shared diffusion step per item and independent noise per arm.
    pub fn diffusion_losses<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &Graph<'_, T>,
        q_left: Var,
        q_right: Var,
        actions: &Tensor<T>,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let b = actions.shape()[0];
        let (a0l, a0r) = split_actions(actions)?;
        let steps = sample_steps(b, self.sched.k_steps, rng);
        let eps_l = Tensor::randn(a0l.shape().to_vec(), 1.0, rng);
        let eps_r = Tensor::randn(a0r.shape().to_vec(), 1.0, rng);
        let akl = g.constant(diffuse_batch(&a0l, &steps, &eps_l, &self.sched)?)?;
        let akr = g.constant(diffuse_batch(&a0r, &steps, &eps_r, &self.sched)?)?;
        let (el, er) = self.denoiser.denoise_eps(g, akl, akr, &steps, q_left, q_right)?;
        Ok((noise_mse(g, el, &eps_l)?, noise_mse(g, er, &eps_r)?))
    }

    /// Full objective; the VQ term is included when `with_vq`.
    pub fn losses<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &Graph<'_, T>,
        obs: &ObservationBatch<T>,
        actions: &Tensor<T>,
        books: &CodebookPair<T>,
        with_vq: bool,
        rng: &mut R,
    ) -> Result<(Losses, QuantResult<T>)> {
        let c = self.conditions(g, obs, books)?;
        let (dl, dr) = self.diffusion_losses(g, c.q_left, c.q_right, actions, rng)?;
        let mut total = g.add(dl, dr)?;
        if with_vq {
            total = g.add(total, c.vq_loss)?;
        }
        Ok((
            Losses {
                diff_left: dl,
                diff_right: dr,
                vq: with_vq.then_some(c.vq_loss),
                total,
            },
            c.assignment,
        ))
    }

    /// Condition token values `[B, S, d]` per arm (no gradient tracking needed).
    pub fn condition_values<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        books: &CodebookPair<T>,
        obs: &ObservationBatch<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let g = Graph::with_params(store).trainable(|_| false);
        let c = self.conditions(&g, obs, books)?;
        Ok((g.tensor(c.q_left), g.tensor(c.q_right)))
    }

    /// DDIM sample of normalised `[B, H, A]` actions from fixed conditions,
    /// starting from the noise `init`.
    pub fn sample_from_conditions<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        q_left: &Tensor<T>,
        q_right: &Tensor<T>,
        init: Tensor<T>,
    ) -> Result<Tensor<T>> {
        let b = q_left.shape()[0];
        let shape = self.action_shape(b);
        if init.shape() != shape {
            return Err(NumericsError::ShapeMismatch {
                op: "sample",
                lhs: shape.to_vec(),
                rhs: init.shape().to_vec(),
            });
        }
        ddim_sample_from(init, &self.sched, self.cfg.ddim_steps, |a_k, k| {
            let g = Graph::with_params(store).trainable(|_| false);
            let (al, ar) = split_actions(a_k)?;
            let (el, er) = self.denoiser.denoise_eps(
                &g,
                g.constant(al)?,
                g.constant(ar)?,
                &vec![k; b],
                g.constant(q_left.clone())?,
                g.constant(q_right.clone())?,
            )?;
            merge_actions(&g.tensor(el), &g.tensor(er))
        })
    }

    /// `[B, H, A]` for a batch of `b` chunks.
    pub fn action_shape(&self, b: usize) -> [usize; 3] {
        let d = &self.cfg.denoiser;
        [b, d.horizon, 2 * d.action_dim]
    }

    pub fn sample<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        books: &CodebookPair<T>,
        obs: &ObservationBatch<T>,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let (ql, qr) = self.condition_values(store, books, obs)?;
        let init = Tensor::randn(self.action_shape(obs.batch()).to_vec(), 1.0, rng);
        self.sample_from_conditions(store, &ql, &qr, init)
    }
}
