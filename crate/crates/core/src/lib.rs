//! Coordinated bimanual visuomotor policy.
//!
//! * [`numerics`]: tensors, gradient tape, finite-difference oracle.
//! * [`perception`]: view encoders and the masked token aggregator.
//! * [`coordination`]: shared-mapping dual codebooks with residual levels.
//! * [`policy`]: cosine schedule, diffusion-transformer denoiser, samplers.
//! * [`simworld`]: planar dual-arm tasks, scripted experts and renderers.
//! * [`model`]: the assembled perception-to-control network.

pub mod coordination;
pub mod model;
pub mod numerics;
pub mod perception;
pub mod policy;
mod scalar;
pub mod simworld;

use serde::{Deserialize, Serialize};

pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Left,
    Right,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Left, Arm::Right];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Left => "left",
            Arm::Right => "right",
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::Left => Arm::Right,
            Arm::Right => Arm::Left,
        }
    }
}
