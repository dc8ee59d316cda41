use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::nn::{sinusoidal_embedding, FeedForward, Linear, MultiHeadAttention, LN_EPS};
use crate::numerics::{Graph, NumericsError, ParamStore, Result, Tensor, Var};
use crate::{Arm, Scalar};

pub const PREFIX: &str = "policy.";
/// Adaptive-norm outputs per block: shift, scale and gate for self-attention,
/// cross-attention and the feed-forward.
const BLOCK_MODS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Two disjoint per-arm stacks.
    Phase1,
    /// One self-attention shared by both arms' action tokens.
    Phase2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Action dimensions per arm.
    pub action_dim: usize,
    pub horizon: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Width of the condition tokens.
    pub cond_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            action_dim: 3,
            horizon: 8,
            width: 64,
            blocks: 2,
            heads: 4,
            ffn_mult: 2,
            cond_dim: 32,
        }
    }
}

#[derive(Debug, Clone)]
struct DitBlock {
    ada: Linear,
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct ArmNet {
    in_proj: Linear,
    pos: String,
    time1: Linear,
    time2: Linear,
    cond_proj: Linear,
    blocks: Vec<DitBlock>,
    final_ada: Linear,
    out_proj: Linear,
}

/// Diffusion transformer predicting the noise on each arm's action tokens.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub stage: Stage,
    left: ArmNet,
    right: ArmNet,
    merged: Vec<MultiHeadAttention>,
}

pub fn self_attn_prefix(arm: Option<Arm>, block: usize) -> String {
    let owner = arm.map_or("merged", Arm::name);
    format!("{PREFIX}{owner}.block{block}.self_attn")
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, stage: Stage) -> Result<Self> {
        if cfg.width == 0 || cfg.heads == 0 || !cfg.width.is_multiple_of(cfg.heads) || cfg.action_dim == 0 || cfg.horizon == 0 {
            return Err(NumericsError::InvalidArgument {
                op: "denoiser",
                msg: format!("invalid dims {cfg:?}"),
            });
        }
        let w = cfg.width;
        let arm = |a: Arm| {
            let p = format!("{PREFIX}{}", a.name());
            ArmNet {
                in_proj: Linear::new(&format!("{p}.in_proj"), cfg.action_dim, w),
                pos: format!("{p}.pos"),
                time1: Linear::new(&format!("{p}.time1"), w, w),
                time2: Linear::new(&format!("{p}.time2"), w, w),
                cond_proj: Linear::new(&format!("{p}.cond_proj"), cfg.cond_dim, w),
                blocks: (0..cfg.blocks)
                    .map(|b| DitBlock {
                        ada: Linear::new(&format!("{p}.block{b}.ada"), w, BLOCK_MODS * w),
                        self_attn: MultiHeadAttention::new(&self_attn_prefix(Some(a), b), w, w, cfg.heads),
                        cross_attn: MultiHeadAttention::new(&format!("{p}.block{b}.cross_attn"), w, w, cfg.heads),
                        ffn: FeedForward::new(&format!("{p}.block{b}.ffn"), w, cfg.ffn_mult * w, w),
                    })
                    .collect(),
                final_ada: Linear::new(&format!("{p}.final_ada"), w, 2 * w),
                out_proj: Linear::new(&format!("{p}.out_proj"), w, cfg.action_dim),
            }
        };
        let merged = (0..cfg.blocks)
            .map(|b| MultiHeadAttention::new(&self_attn_prefix(None, b), w, w, cfg.heads))
            .collect();
        Ok(Self {
            left: arm(Arm::Left),
            right: arm(Arm::Right),
            merged,
            cfg,
            stage,
        })
    }

    pub fn with_stage(&self, stage: Stage) -> Self {
        Self {
            stage,
            ..self.clone()
        }
    }

    fn net(&self, arm: Arm) -> &ArmNet {
        match arm {
            Arm::Left => &self.left,
            Arm::Right => &self.right,
        }
    }

    pub fn is_param(name: &str) -> bool {
        name.starts_with(PREFIX)
    }

    /// Initialises every parameter of the current stage. With `zero_gates`
    /// the adaptive-norm maps and the output projection start at zero, so
    /// each block starts as the identity and the prediction starts at zero.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R, zero_gates: bool) {
        let lin = |l: &Linear, store: &mut ParamStore<T>, rng: &mut R, zero: bool| {
            if zero {
                l.init_zero(store)
            } else {
                l.init(store, rng)
            }
        };
        for arm in Arm::BOTH {
            let n = self.net(arm);
            lin(&n.in_proj, store, rng, false);
            store.insert(n.pos.clone(), Tensor::randn([self.cfg.horizon, self.cfg.width], 0.02, rng));
            lin(&n.time1, store, rng, false);
            lin(&n.time2, store, rng, false);
            lin(&n.cond_proj, store, rng, false);
            for b in &n.blocks {
                lin(&b.ada, store, rng, zero_gates);
                if self.stage == Stage::Phase1 {
                    b.self_attn.init(store, rng);
                }
                b.cross_attn.init(store, rng);
                b.ffn.init(store, rng);
            }
            lin(&n.final_ada, store, rng, zero_gates);
            lin(&n.out_proj, store, rng, zero_gates);
        }
        if self.stage == Stage::Phase2 {
            self.merged.iter().for_each(|m| m.init(store, rng));
        }
    }

    /// `x * (1 + scale) + shift` after a parameter-free layer norm.
    fn modulate<T: Scalar>(g: &Graph<'_, T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = g.layer_norm(x, T::of(LN_EPS))?;
        g.add(g.mul(n, g.add_scalar(scale, T::one())?)?, shift)
    }

    /// Predicts the noise on `[B, H, A/2]` noisy actions for each arm at
    /// steps `k` (one per batch item) given `[B, S, cond_dim]` conditions.
    pub fn denoise_eps<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        a_k_left: Var,
        a_k_right: Var,
        k: &[usize],
        cond_left: Var,
        cond_right: Var,
    ) -> Result<(Var, Var)> {
        let (h, w) = (self.cfg.horizon, self.cfg.width);
        let b = k.len();
        let steps: Vec<f64> = k.iter().map(|&k| k as f64).collect();
        let temb = g.constant(sinusoidal_embedding(&steps, w))?;
        let mut x = Vec::with_capacity(2);
        let mut c = Vec::with_capacity(2);
        let mut cond = Vec::with_capacity(2);
        for (arm, a_k, q) in [(Arm::Left, a_k_left, cond_left), (Arm::Right, a_k_right, cond_right)] {
            let n = self.net(arm);
            if g.shape(a_k) != [b, h, self.cfg.action_dim] {
                return Err(NumericsError::ShapeMismatch {
                    op: "denoise_eps",
                    lhs: vec![b, h, self.cfg.action_dim],
                    rhs: g.shape(a_k),
                });
            }
            x.push(g.add(n.in_proj.forward(g, a_k)?, g.param(&n.pos)?)?);
            let t = n.time2.forward(g, g.silu(n.time1.forward(g, temb)?)?)?;
            c.push(g.reshape(g.silu(t)?, &[b, 1, w])?);
            cond.push(n.cond_proj.forward(g, q)?);
        }
        for blk in 0..self.cfg.blocks {
            let step = |x: &mut Vec<Var>| -> Result<()> {
                let mut mods = Vec::with_capacity(2);
                let mut h1 = Vec::with_capacity(2);
                for (i, arm) in Arm::BOTH.into_iter().enumerate() {
                    let m = g.split(self.net(arm).blocks[blk].ada.forward(g, c[i])?, 2, &[w; BLOCK_MODS])?;
                    h1.push(Self::modulate(g, x[i], m[0], m[1])?);
                    mods.push(m);
                }
                let attn = match self.stage {
                    Stage::Phase1 => Arm::BOTH
                        .into_iter()
                        .enumerate()
                        .map(|(i, arm)| self.net(arm).blocks[blk].self_attn.forward(g, h1[i], h1[i], None))
                        .collect::<Result<Vec<_>>>()?,
                    Stage::Phase2 => {
                        let joint = g.concat(&h1, 1)?;
                        let out = self.merged[blk].forward(g, joint, joint, None)?;
                        g.split(out, 1, &[h, h])?
                    }
                };
                for (i, arm) in Arm::BOTH.into_iter().enumerate() {
                    let (m, blkp) = (&mods[i], &self.net(arm).blocks[blk]);
                    let mut xi = g.add(x[i], g.mul(m[2], attn[i])?)?;
                    let hc = Self::modulate(g, xi, m[3], m[4])?;
                    xi = g.add(xi, g.mul(m[5], blkp.cross_attn.forward(g, hc, cond[i], None)?)?)?;
                    let hf = Self::modulate(g, xi, m[6], m[7])?;
                    x[i] = g.add(xi, g.mul(m[8], blkp.ffn.forward(g, hf)?)?)?;
                }
                Ok(())
            };
            step(&mut x).map_err(|e| e.in_layer(format!("denoiser block {blk}")))?;
        }
        let mut out = Vec::with_capacity(2);
        for (i, arm) in Arm::BOTH.into_iter().enumerate() {
            let n = self.net(arm);
            let m = g.split(n.final_ada.forward(g, c[i])?, 2, &[w, w])?;
            out.push(n.out_proj.forward(g, Self::modulate(g, x[i], m[0], m[1])?)?);
        }
        Ok((out[0], out[1]))
    }
}

/// Converts phase-1 parameters to phase 2: each block's two per-arm
/// self-attention parameter sets are replaced by their elementwise average.
/// Everything else is copied unchanged.
pub fn merge_self_attention<T: Scalar>(store: &ParamStore<T>, blocks: usize) -> Result<ParamStore<T>> {
    let mut out = store.clone();
    for b in 0..blocks {
        let (lp, rp, mp) = (
            self_attn_prefix(Some(Arm::Left), b),
            self_attn_prefix(Some(Arm::Right), b),
            self_attn_prefix(None, b),
        );
        for proj in ["q", "k", "v", "o"] {
            for part in ["weight", "bias"] {
                let suffix = format!(".{proj}.{part}");
                let (ln, rn) = (format!("{lp}{suffix}"), format!("{rp}{suffix}"));
                let l = out.remove(&ln).ok_or(NumericsError::UnknownParam(ln))?;
                let r = out.remove(&rn).ok_or(NumericsError::UnknownParam(rn))?;
                if l.shape() != r.shape() {
                    return Err(NumericsError::ShapeMismatch {
                        op: "merge_self_attention",
                        lhs: l.shape().to_vec(),
                        rhs: r.shape().to_vec(),
                    });
                }
                let half = T::of(0.5);
                let data = l.data().iter().zip(r.data()).map(|(&a, &b)| half * (a + b)).collect();
                out.insert(format!("{mp}{suffix}"), Tensor::new(l.shape().to_vec(), data)?);
            }
        }
    }
    Ok(out)
}
