//! View encoders and the masked aggregator that turns one observation into
//! per-arm latent tokens anchored to the shared head view.

mod mask;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use mask::{build_mask, Group, MaskLayout};

use crate::numerics::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{Graph, NumericsError, ParamStore, Result, Tensor, Var};
use crate::{Arm, Scalar};

pub const FEATURE_DIM: usize = 8;
pub const HEAD_TOKENS: usize = 4;
pub const JOINT_DIM: usize = 3;
/// Wrist-average token and joint token.
pub const ARM_TOKENS: usize = 2;
pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const PREFIX: &str = "perception.";

/// One multi-view snapshot. In feature mode `head_feat` is `[M_h, F]` and the
/// wrist features are `[F]`; in image mode all three are `[32, 32, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T> {
    pub head_feat: Tensor<T>,
    pub left_wrist_feat: Tensor<T>,
    pub right_wrist_feat: Tensor<T>,
    pub left_joints: Tensor<T>,
    pub right_joints: Tensor<T>,
    pub timestamp: usize,
}

impl<T: Scalar> Observation<T> {
    pub fn wrist(&self, arm: Arm) -> &Tensor<T> {
        match arm {
            Arm::Left => &self.left_wrist_feat,
            Arm::Right => &self.right_wrist_feat,
        }
    }

    pub fn joints(&self, arm: Arm) -> &Tensor<T> {
        match arm {
            Arm::Left => &self.left_joints,
            Arm::Right => &self.right_joints,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.head_feat,
            &self.left_wrist_feat,
            &self.right_wrist_feat,
            &self.left_joints,
            &self.right_joints,
        ]
        .iter()
        .all(|t| t.is_finite())
    }

    /// Exchanges every left-arm field with its right-arm counterpart.
    pub fn swapped(&self) -> Self {
        Self {
            head_feat: self.head_feat.clone(),
            left_wrist_feat: self.right_wrist_feat.clone(),
            right_wrist_feat: self.left_wrist_feat.clone(),
            left_joints: self.right_joints.clone(),
            right_joints: self.left_joints.clone(),
            timestamp: self.timestamp,
        }
    }
}

/// Observations stacked along a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch<T> {
    pub head_feat: Tensor<T>,
    pub left_wrist_feat: Tensor<T>,
    pub right_wrist_feat: Tensor<T>,
    pub left_joints: Tensor<T>,
    pub right_joints: Tensor<T>,
}

fn stack<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or(NumericsError::InvalidArgument {
        op: "stack",
        msg: "empty batch".into(),
    })?;
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "stack",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

impl<T: Scalar> ObservationBatch<T> {
    pub fn stack(obs: &[&Observation<T>]) -> Result<Self> {
        let col = |f: fn(&Observation<T>) -> &Tensor<T>| stack(&obs.iter().map(|o| f(o)).collect::<Vec<_>>());
        Ok(Self {
            head_feat: col(|o| &o.head_feat)?,
            left_wrist_feat: col(|o| &o.left_wrist_feat)?,
            right_wrist_feat: col(|o| &o.right_wrist_feat)?,
            left_joints: col(|o| &o.left_joints)?,
            right_joints: col(|o| &o.right_joints)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.head_feat.shape()[0]
    }

    pub fn wrist(&self, arm: Arm) -> &Tensor<T> {
        match arm {
            Arm::Left => &self.left_wrist_feat,
            Arm::Right => &self.right_wrist_feat,
        }
    }

    pub fn joints(&self, arm: Arm) -> &Tensor<T> {
        match arm {
            Arm::Left => &self.left_joints,
            Arm::Right => &self.right_joints,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Affine projection of simulator state features.
    #[default]
    Features,
    /// Three stride-2 convolutions over 32x32 RGB renders.
    Images,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub mode: EncoderMode,
    /// Latent tokens per arm; 0 disables them.
    pub latents: usize,
    pub width: usize,
    pub head_tokens: usize,
    pub feature_dim: usize,
    pub joint_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Use a single affine map for joints instead of a two-layer MLP.
    pub linear_joint_embedding: bool,
    pub arm_tokens_see_each_other: bool,
    pub latent_init_std: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Features,
            latents: 4,
            width: 32,
            head_tokens: HEAD_TOKENS,
            feature_dim: FEATURE_DIM,
            joint_dim: JOINT_DIM,
            layers: 2,
            heads: 4,
            ffn_mult: 2,
            linear_joint_embedding: false,
            arm_tokens_see_each_other: false,
            latent_init_std: 0.02,
        }
    }
}

/// Channel widths of the image encoder's convolutions.
const CONV_CHANNELS: [usize; 2] = [8, 16];

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct ArmEncoder {
    wrist_proj: Linear,
    wrist_conv: Vec<Linear>,
    joint_linear: Linear,
    joint_mlp: FeedForward,
    latents: String,
}

/// Per-arm token outputs of the aggregator, each `[B, tokens, width]`.
#[derive(Debug, Clone, Copy)]
pub struct ArmOutputs {
    /// `None` when latent tokens are disabled.
    pub latents: Option<Var>,
    pub arm_tokens: Var,
}

/// Output of [`Perception::aggregate`].
#[derive(Debug, Clone, Copy)]
pub struct Aggregated {
    pub left: ArmOutputs,
    pub right: ArmOutputs,
    pub head: Var,
}

impl Aggregated {
    pub fn arm(&self, arm: Arm) -> ArmOutputs {
        match arm {
            Arm::Left => self.left,
            Arm::Right => self.right,
        }
    }
}

/// Encoders plus masked aggregator. Holds parameter names only.
#[derive(Debug, Clone)]
pub struct Perception {
    pub cfg: PerceptionConfig,
    pub layout: MaskLayout,
    head_proj: Linear,
    head_conv: Vec<Linear>,
    head_pos: String,
    left: ArmEncoder,
    right: ArmEncoder,
    blocks: Vec<Block>,
}

fn conv_stack(prefix: &str, width: usize) -> Vec<Linear> {
    let chans = [IMAGE_CHANNELS, CONV_CHANNELS[0], CONV_CHANNELS[1], width];
    (0..3)
        .map(|i| Linear::new(&format!("{prefix}.conv{i}"), 9 * chans[i], chans[i + 1]))
        .collect()
}

impl Perception {
    pub fn new(cfg: PerceptionConfig) -> Result<Self> {
        let bad = |msg: String| Err(NumericsError::InvalidArgument { op: "perception", msg });
        if cfg.head_tokens == 0 || cfg.width == 0 || cfg.heads == 0 || !cfg.width.is_multiple_of(cfg.heads) {
            return bad(format!("invalid dims {cfg:?}"));
        }
        if cfg.mode == EncoderMode::Images && cfg.head_tokens != 4 {
            return bad("image mode yields exactly 4 head tokens".into());
        }
        let w = cfg.width;
        let arm = |a: Arm| {
            let p = format!("{PREFIX}{}", a.name());
            ArmEncoder {
                wrist_proj: Linear::new(&format!("{p}.wrist_proj"), cfg.feature_dim, w),
                wrist_conv: conv_stack(&format!("{p}.wrist"), w),
                joint_linear: Linear::new(&format!("{p}.joint_linear"), cfg.joint_dim, w),
                joint_mlp: FeedForward::new(&format!("{p}.joint_mlp"), cfg.joint_dim, w, w),
                latents: format!("{p}.latents"),
            }
        };
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{PREFIX}agg{l}");
                Block {
                    ln1: LayerNorm::new(&format!("{p}.ln1"), w),
                    attn: MultiHeadAttention::new(&format!("{p}.attn"), w, w, cfg.heads),
                    ln2: LayerNorm::new(&format!("{p}.ln2"), w),
                    ffn: FeedForward::new(&format!("{p}.ffn"), w, cfg.ffn_mult * w, w),
                }
            })
            .collect();
        Ok(Self {
            layout: build_mask(cfg.latents, ARM_TOKENS, cfg.head_tokens, cfg.arm_tokens_see_each_other),
            head_proj: Linear::new(&format!("{PREFIX}head_proj"), cfg.feature_dim, w),
            head_conv: conv_stack(&format!("{PREFIX}head"), w),
            head_pos: format!("{PREFIX}head_pos"),
            left: arm(Arm::Left),
            right: arm(Arm::Right),
            blocks,
            cfg,
        })
    }

    fn arm_encoder(&self, arm: Arm) -> &ArmEncoder {
        match arm {
            Arm::Left => &self.left,
            Arm::Right => &self.right,
        }
    }

    pub fn is_param(name: &str) -> bool {
        name.starts_with(PREFIX)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let w = self.cfg.width;
        match self.cfg.mode {
            EncoderMode::Features => self.head_proj.init(store, rng),
            EncoderMode::Images => self.head_conv.iter().for_each(|l| l.init(store, rng)),
        }
        store.insert(self.head_pos.clone(), Tensor::randn([self.cfg.head_tokens, w], 0.02, rng));
        for arm in Arm::BOTH {
            let e = self.arm_encoder(arm);
            match self.cfg.mode {
                EncoderMode::Features => e.wrist_proj.init(store, rng),
                EncoderMode::Images => e.wrist_conv.iter().for_each(|l| l.init(store, rng)),
            }
            if self.cfg.linear_joint_embedding {
                e.joint_linear.init(store, rng);
            } else {
                e.joint_mlp.init(store, rng);
            }
            if self.cfg.latents > 0 {
                store.insert(e.latents.clone(), Tensor::randn([self.cfg.latents, w], self.cfg.latent_init_std, rng));
            }
        }
        for b in &self.blocks {
            b.ln1.init(store);
            b.attn.init(store, rng);
            b.ln2.init(store);
            b.ffn.init(store, rng);
        }
    }

    /// `[B, 32, 32, 3]` to `[B, 4, 4, width]`.
    fn conv<T: Scalar>(&self, g: &Graph<'_, T>, layers: &[Linear], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            h = l.forward(g, g.patches(h, 3, 2, 1)?)?;
            if i + 1 < layers.len() {
                h = g.gelu(h)?;
            }
        }
        Ok(h)
    }

    fn check_shape<T: Scalar>(&self, what: &'static str, t: &Tensor<T>, expect: &[usize]) -> Result<()> {
        if &t.shape()[1..] != expect {
            return Err(NumericsError::ShapeMismatch {
                op: what,
                lhs: expect.to_vec(),
                rhs: t.shape()[1..].to_vec(),
            });
        }
        Ok(())
    }

    /// Head tokens `[B, M_h, width]` and per-arm wrist tokens `[B, 1, width]`.
    pub fn encode_views<T: Scalar>(&self, g: &Graph<'_, T>, obs: &ObservationBatch<T>) -> Result<(Var, Var, Var)> {
        let b = obs.batch();
        let w = self.cfg.width;
        let image = [IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS];
        let head = match self.cfg.mode {
            EncoderMode::Features => {
                self.check_shape("encode_views head", &obs.head_feat, &[self.cfg.head_tokens, self.cfg.feature_dim])?;
                self.head_proj.forward(g, g.constant(obs.head_feat.clone())?)?
            }
            EncoderMode::Images => {
                self.check_shape("encode_views head", &obs.head_feat, &image)?;
                let h = self.conv(g, &self.head_conv, g.constant(obs.head_feat.clone())?)?;
                g.reshape(g.avg_pool(h, 2)?, &[b, 4, w])?
            }
        };
        let head = g.add(head, g.param(&self.head_pos)?)?;
        let mut wrists = Vec::with_capacity(2);
        for arm in Arm::BOTH {
            let e = self.arm_encoder(arm);
            let x = obs.wrist(arm);
            let tok = match self.cfg.mode {
                EncoderMode::Features => {
                    self.check_shape("encode_views wrist", x, &[self.cfg.feature_dim])?;
                    e.wrist_proj.forward(g, g.constant(x.clone())?)?
                }
                EncoderMode::Images => {
                    self.check_shape("encode_views wrist", x, &image)?;
                    let h = self.conv(g, &e.wrist_conv, g.constant(x.clone())?)?;
                    g.mean_axis(g.reshape(h, &[b, 16, w])?, 1)?
                }
            };
            wrists.push(g.reshape(tok, &[b, 1, w])?);
        }
        Ok((head, wrists[0], wrists[1]))
    }

    /// One `[B, 1, width]` token per arm from `[B, J]` joint states.
    pub fn embed_joints<T: Scalar>(&self, g: &Graph<'_, T>, arm: Arm, joints: &Tensor<T>) -> Result<Var> {
        self.check_shape("embed_joints", joints, &[self.cfg.joint_dim])?;
        let e = self.arm_encoder(arm);
        let x = g.constant(joints.clone())?;
        let tok = if self.cfg.linear_joint_embedding {
            e.joint_linear.forward(g, x)?
        } else {
            e.joint_mlp.forward(g, x)?
        };
        g.reshape(tok, &[joints.shape()[0], 1, self.cfg.width])
    }

    /// Runs the masked transformer over
    /// `[L latents, L wrist, L joint, R latents, R wrist, R joint, head]`.
    pub fn aggregate<T: Scalar>(&self, g: &Graph<'_, T>, obs: &ObservationBatch<T>) -> Result<Aggregated> {
        let b = obs.batch();
        let (n, w, a) = (self.cfg.latents, self.cfg.width, ARM_TOKENS);
        let (head, lw, rw) = self.encode_views(g, obs)?;
        let mut parts = Vec::new();
        for (arm, wrist) in [(Arm::Left, lw), (Arm::Right, rw)] {
            if n > 0 {
                let lat = g.param(&self.arm_encoder(arm).latents)?;
                parts.push(g.broadcast_to(lat, &[b, n, w])?);
            }
            parts.push(wrist);
            parts.push(self.embed_joints(g, arm, obs.joints(arm))?);
        }
        parts.push(head);
        let mut x = g.concat(&parts, 1)?;
        for (l, blk) in self.blocks.iter().enumerate() {
            let layer = |x: Var| -> Result<Var> {
                let h = blk.ln1.forward(g, x)?;
                let x = g.add(x, blk.attn.forward(g, h, h, Some(&self.layout.allow))?)?;
                let h = blk.ln2.forward(g, x)?;
                g.add(x, blk.ffn.forward(g, h)?)
            };
            x = layer(x).map_err(|e| e.in_layer(format!("aggregator layer {l}")))?;
        }
        let pieces = g.split(x, 1, &[n, a, n, a, self.cfg.head_tokens])?;
        let arm_out = |lat: Var, tok: Var| ArmOutputs {
            latents: (n > 0).then_some(lat),
            arm_tokens: tok,
        };
        Ok(Aggregated {
            left: arm_out(pieces[0], pieces[1]),
            right: arm_out(pieces[2], pieces[3]),
            head: pieces[4],
        })
    }
}
