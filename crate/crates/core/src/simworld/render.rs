use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::Tensor;
use crate::perception::{Observation, FEATURE_DIM, HEAD_TOKENS, IMAGE_CHANNELS, IMAGE_SIDE, JOINT_DIM};
use crate::Scalar;

use super::{dist, sub, ArmState, Holder, Vec2, WorldState, WRIST_FOV};

pub const IMAGE_SIZE: usize = IMAGE_SIDE;

fn joints<T: Scalar>(arm: &ArmState) -> Tensor<T> {
    Tensor::from_f64([JOINT_DIM], &[arm.pos[0], arm.pos[1], arm.grip]).expect("joint shape")
}

/// Entities visible to the wrists, in fixed slot order: objects then targets,
/// two of each.
fn wrist_slots(s: &WorldState) -> [Option<Vec2>; 4] {
    let mut out = [None; 4];
    for (i, o) in s.objects.iter().take(2).enumerate() {
        out[i] = Some(o.pos);
    }
    for (i, t) in s.targets.iter().take(2).enumerate() {
        out[2 + i] = Some(*t);
    }
    out
}

/// Feature-mode observation.
///
/// Head tokens are `[x, y, a, b | one-hot(kind)]` for kinds left arm
/// (`a` = grip, `b` = holding), right arm, objects (`x, y, a, b` = two object
/// positions) and targets. Wrist features hold egocentric offsets to the four
/// wrist slots, zeroed beyond [`WRIST_FOV`]. Gaussian noise of std
/// `noise_std` is added to every non-indicator head value and every visible
/// wrist offset.
pub fn render_features<T: Scalar, R: Rng + ?Sized>(s: &WorldState, noise_std: f64, rng: &mut R) -> Observation<T> {
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("valid std");
    let mut jitter = |v: f64| if noise_std > 0.0 { v + noise.sample(rng) } else { v };

    let pos = |i: usize, v: &[Vec2]| v.get(i).copied().unwrap_or([0.0, 0.0]);
    let objs: Vec<Vec2> = s.objects.iter().map(|o| o.pos).collect();
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let rows: [[f64; 4]; HEAD_TOKENS] = [
        [s.left.pos[0], s.left.pos[1], s.left.grip, flag(s.holding(Holder::Left))],
        [s.right.pos[0], s.right.pos[1], s.right.grip, flag(s.holding(Holder::Right))],
        [pos(0, &objs)[0], pos(0, &objs)[1], pos(1, &objs)[0], pos(1, &objs)[1]],
        [pos(0, &s.targets)[0], pos(0, &s.targets)[1], pos(1, &s.targets)[0], pos(1, &s.targets)[1]],
    ];
    let mut head = Vec::with_capacity(HEAD_TOKENS * FEATURE_DIM);
    for (kind, row) in rows.iter().enumerate() {
        head.extend(row.iter().map(|&v| jitter(v)));
        head.extend((0..4).map(|k| flag(k == kind)));
    }

    let slots = wrist_slots(s);
    let mut wrist = |arm: &ArmState| {
        let mut f = vec![0.0; FEATURE_DIM];
        for (i, p) in slots.iter().enumerate() {
            if let Some(p) = p {
                if dist(*p, arm.pos) <= WRIST_FOV {
                    let d = sub(*p, arm.pos);
                    f[2 * i] = jitter(d[0]);
                    f[2 * i + 1] = jitter(d[1]);
                }
            }
        }
        Tensor::from_f64([FEATURE_DIM], &f).expect("wrist shape")
    };
    let left_wrist_feat = wrist(&s.left);
    let right_wrist_feat = wrist(&s.right);
    Observation {
        head_feat: Tensor::from_f64([HEAD_TOKENS, FEATURE_DIM], &head).expect("head shape"),
        left_wrist_feat,
        right_wrist_feat,
        left_joints: joints(&s.left),
        right_joints: joints(&s.right),
        timestamp: s.step,
    }
}

struct Canvas {
    px: Vec<f64>,
    /// World position of the image centre and half-extent of the view.
    centre: Vec2,
    half: f64,
}

impl Canvas {
    fn new(centre: Vec2, half: f64) -> Self {
        Self {
            px: vec![0.0; IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS],
            centre,
            half,
        }
    }

    /// Pixel `(row, col)` centre in world coordinates; row 0 is the top edge.
    fn world(&self, row: usize, col: usize) -> Vec2 {
        let cell = 2.0 * self.half / IMAGE_SIDE as f64;
        [
            self.centre[0] - self.half + (col as f64 + 0.5) * cell,
            self.centre[1] + self.half - (row as f64 + 0.5) * cell,
        ]
    }

    fn disc(&mut self, at: Vec2, radius: f64, channel: usize, value: f64) {
        // At least one pixel wide, whatever the zoom.
        let r = radius.max(0.75 * 2.0 * self.half / IMAGE_SIDE as f64);
        for row in 0..IMAGE_SIDE {
            for col in 0..IMAGE_SIDE {
                if dist(self.world(row, col), at) <= r {
                    let i = (row * IMAGE_SIDE + col) * IMAGE_CHANNELS + channel;
                    self.px[i] = self.px[i].max(value);
                }
            }
        }
    }

    fn draw(mut self, s: &WorldState) -> Vec<f64> {
        for t in &s.targets {
            self.disc(*t, 0.06, 1, 1.0);
        }
        for o in &s.objects {
            self.disc(o.pos, o.radius, 0, 1.0);
        }
        for (arm, value) in [(&s.left, 1.0), (&s.right, 0.5)] {
            let r = if arm.closed() { 0.04 } else { 0.07 };
            self.disc(arm.pos, r, 2, value);
        }
        self.px
    }
}

/// Image-mode observation: a 32x32 RGB top view of the whole workspace and a
/// 32x32 egocentric crop of half-width [`WRIST_FOV`] per wrist. Channels:
/// objects red, targets green, end-effectors blue (left 1.0, right 0.5;
/// smaller marker when closed).
pub fn render_images<T: Scalar>(s: &WorldState) -> Observation<T> {
    let img = |px: Vec<f64>| Tensor::from_f64([IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS], &px).expect("image shape");
    Observation {
        head_feat: img(Canvas::new([0.0, 0.0], 1.0).draw(s)),
        left_wrist_feat: img(Canvas::new(s.left.pos, WRIST_FOV).draw(s)),
        right_wrist_feat: img(Canvas::new(s.right.pos, WRIST_FOV).draw(s)),
        left_joints: joints(&s.left),
        right_joints: joints(&s.right),
        timestamp: s.step,
    }
}
