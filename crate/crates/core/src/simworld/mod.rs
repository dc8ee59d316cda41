//! Planar dual-arm world with three coordination tasks.
//!
//! End-effectors are velocity-controlled points in `[-1, 1]^2`. Raw actions
//! are `[dx_l, dy_l, grip_l, dx_r, dy_r, grip_r]`; deltas are clipped to
//! `±A_MAX` and grips to `[0, 1]` (open fraction, closed below 0.5).

mod expert;
mod render;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use expert::expert_action;
pub use render::{render_features, render_images, IMAGE_SIZE};

use crate::perception::Observation;
use crate::Scalar;

pub const A_MAX: f64 = 0.1;
pub const ACTION_DIM: usize = 6;
pub const GRASP_RADIUS: f64 = 0.08;
pub const WRIST_FOV: f64 = 0.4;
/// Handover: the left arm cannot pass `x > LEFT_X_MAX`, the right arm cannot
/// pass `x < RIGHT_X_MIN`.
pub const LEFT_X_MAX: f64 = 0.2;
pub const RIGHT_X_MIN: f64 = -0.2;
pub const SUCCESS_TILT_DEG: f64 = 15.0;
/// Bar tilt at which both grips lose the bar.
pub const SLIP_TILT_DEG: f64 = 25.0;

pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    DualReach,
    Handover,
    BarLift,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::DualReach, TaskId::Handover, TaskId::BarLift];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::DualReach => "dual_reach",
            TaskId::Handover => "handover",
            TaskId::BarLift => "bar_lift",
        }
    }
}

impl std::str::FromStr for TaskId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}` (expected dual_reach, handover or bar_lift)"))
    }
}

/// Axis-aligned box `[lo, hi]` used for randomised placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub lo: Vec2,
    pub hi: Vec2,
}

impl Span {
    pub const fn new(lo: Vec2, hi: Vec2) -> Self {
        Self { lo, hi }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        [rng.random_range(self.lo[0]..=self.hi[0]), rng.random_range(self.lo[1]..=self.hi[1])]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        (self.lo[0]..=self.hi[0]).contains(&p[0]) && (self.lo[1]..=self.hi[1]).contains(&p[1])
    }
}

/// Randomisation ranges for a task's initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranges {
    pub left_start: Span,
    pub right_start: Span,
    /// Per-task placement boxes; meaning depends on the task (see [`reset`]).
    pub placements: Vec<Span>,
    /// Minimum separation between the two dual-reach targets.
    pub min_separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskId,
    pub t_max: usize,
    pub eps_pos: f64,
    pub noise_std: f64,
    pub ranges: Ranges,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(task: TaskId) -> Self {
        let (t_max, ranges) = match task {
            TaskId::DualReach => (
                60,
                Ranges {
                    left_start: Span::new([-0.65, -0.95], [-0.35, -0.65]),
                    right_start: Span::new([0.35, -0.95], [0.65, -0.65]),
                    placements: vec![
                        Span::new([-0.9, -0.8], [0.2, 0.8]),
                        Span::new([-0.2, -0.8], [0.9, 0.8]),
                    ],
                    min_separation: 0.5,
                },
            ),
            TaskId::Handover => (
                120,
                Ranges {
                    left_start: Span::new([-0.65, -0.15], [-0.35, 0.15]),
                    right_start: Span::new([0.35, -0.15], [0.65, 0.15]),
                    placements: vec![
                        Span::new([-0.8, -0.6], [-0.4, 0.6]),
                        Span::new([0.4, -0.6], [0.8, 0.6]),
                    ],
                    min_separation: 0.0,
                },
            ),
            TaskId::BarLift => (
                100,
                Ranges {
                    left_start: Span::new([-0.65, -0.95], [-0.35, -0.65]),
                    right_start: Span::new([0.35, -0.95], [0.65, -0.65]),
                    // centre (x, y0), then (half length, lift height)
                    placements: vec![
                        Span::new([-0.15, -0.6], [0.15, -0.3]),
                        Span::new([0.3, 0.4], [0.45, 0.7]),
                    ],
                    min_separation: 0.0,
                },
            ),
        };
        Self {
            task,
            t_max,
            eps_pos: 0.05,
            noise_std: 0.01,
            ranges,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Holder {
    None,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub pos: Vec2,
    /// Open fraction in `[0, 1]`; closed below 0.5.
    pub grip: f64,
}

impl ArmState {
    pub fn closed(&self) -> bool {
        self.grip < 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub pos: Vec2,
    pub radius: f64,
    pub held_by: Holder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub task: TaskId,
    pub left: ArmState,
    pub right: ArmState,
    pub objects: Vec<Object>,
    /// dual_reach: per-arm targets; handover: [goal, handover point];
    /// bar_lift: lifted positions of the left and right bar ends.
    pub targets: Vec<Vec2>,
    pub step: usize,
    pub success: bool,
}

impl WorldState {
    pub fn arm(&self, h: Holder) -> Option<&ArmState> {
        match h {
            Holder::Left => Some(&self.left),
            Holder::Right => Some(&self.right),
            Holder::None => None,
        }
    }

    pub fn holding(&self, h: Holder) -> bool {
        self.objects.iter().any(|o| o.held_by == h)
    }

    /// Bar tilt in degrees relative to horizontal (bar_lift only).
    pub fn bar_tilt_deg(&self) -> f64 {
        if self.objects.len() < 2 {
            return 0.0;
        }
        let d = sub(self.objects[1].pos, self.objects[0].pos);
        d[1].abs().atan2(d[0].abs()).to_degrees()
    }
}

pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    let d = sub(a, b);
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Independent random stream for episode `index` under `seed`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn clamp_pos(task: TaskId, h: Holder, p: Vec2) -> Vec2 {
    let mut q = [p[0].clamp(-1.0, 1.0), p[1].clamp(-1.0, 1.0)];
    if task == TaskId::Handover {
        match h {
            Holder::Left => q[0] = q[0].min(LEFT_X_MAX),
            Holder::Right => q[0] = q[0].max(RIGHT_X_MIN),
            Holder::None => {}
        }
    }
    q
}

/// Initial state for `spec`, drawn from `rng`.
pub fn reset_state<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> WorldState {
    let r = &spec.ranges;
    let left = ArmState {
        pos: clamp_pos(spec.task, Holder::Left, r.left_start.sample(rng)),
        grip: 1.0,
    };
    let right = ArmState {
        pos: clamp_pos(spec.task, Holder::Right, r.right_start.sample(rng)),
        grip: 1.0,
    };
    let (objects, targets) = match spec.task {
        TaskId::DualReach => {
            let (tl, tr) = loop {
                let tl = r.placements[0].sample(rng);
                let tr = r.placements[1].sample(rng);
                if dist(tl, tr) >= r.min_separation {
                    break (tl, tr);
                }
            };
            (vec![], vec![tl, tr])
        }
        TaskId::Handover => {
            let obj = r.placements[0].sample(rng);
            let goal = r.placements[1].sample(rng);
            let handover_point = [0.0, 0.5 * (obj[1] + goal[1])];
            (
                vec![Object {
                    pos: obj,
                    radius: 0.05,
                    held_by: Holder::None,
                }],
                vec![goal, handover_point],
            )
        }
        TaskId::BarLift => {
            let centre = r.placements[0].sample(rng);
            let shape = r.placements[1].sample(rng);
            let (half, lift) = (shape[0], shape[1]);
            let le = [centre[0] - half, centre[1]];
            let re = [centre[0] + half, centre[1]];
            let ends = [le, re].map(|p| Object {
                pos: p,
                radius: 0.04,
                held_by: Holder::None,
            });
            (ends.to_vec(), vec![[le[0], le[1] + lift], [re[0], re[1] + lift]])
        }
    };
    WorldState {
        task: spec.task,
        left,
        right,
        objects,
        targets,
        step: 0,
        success: false,
    }
}

/// Floats per packed state: both arms (x, y, grip), two object slots
/// (x, y, holder) and two target slots (x, y).
pub const PACKED_STATE_LEN: usize = 16;

fn holder_code(h: Holder) -> f64 {
    match h {
        Holder::None => 0.0,
        Holder::Left => 1.0,
        Holder::Right => 2.0,
    }
}

/// Flat encoding of the renderable part of a state (step and success are not
/// included). Absent object and target slots are zero.
pub fn pack_state(s: &WorldState) -> [f64; PACKED_STATE_LEN] {
    let mut v = [0.0; PACKED_STATE_LEN];
    v[..3].copy_from_slice(&[s.left.pos[0], s.left.pos[1], s.left.grip]);
    v[3..6].copy_from_slice(&[s.right.pos[0], s.right.pos[1], s.right.grip]);
    for (i, o) in s.objects.iter().take(2).enumerate() {
        v[6 + 3 * i..9 + 3 * i].copy_from_slice(&[o.pos[0], o.pos[1], holder_code(o.held_by)]);
    }
    for (i, t) in s.targets.iter().take(2).enumerate() {
        v[12 + 2 * i..14 + 2 * i].copy_from_slice(t);
    }
    v
}

/// Inverse of [`pack_state`] given the task (which fixes the entity counts).
pub fn unpack_state(task: TaskId, v: &[f64], step: usize) -> WorldState {
    let spec = TaskSpec::new(task);
    let template = reset_state(&spec, &mut episode_rng(0, 0));
    let holder = |c: f64| match c.round() as i64 {
        1 => Holder::Left,
        2 => Holder::Right,
        _ => Holder::None,
    };
    WorldState {
        task,
        left: ArmState {
            pos: [v[0], v[1]],
            grip: v[2],
        },
        right: ArmState {
            pos: [v[3], v[4]],
            grip: v[5],
        },
        objects: template
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| Object {
                pos: [v[6 + 3 * i], v[7 + 3 * i]],
                radius: o.radius,
                held_by: holder(v[8 + 3 * i]),
            })
            .collect(),
        targets: (0..template.targets.len()).map(|i| [v[12 + 2 * i], v[13 + 2 * i]]).collect(),
        step,
        success: false,
    }
}

/// Resets and renders the first (feature-mode) observation.
pub fn reset<T: Scalar, R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> (WorldState, Observation<T>) {
    let s = reset_state(spec, rng);
    let obs = render_features(&s, spec.noise_std, rng);
    (s, obs)
}

/// Outcome of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: WorldState,
    pub done: bool,
    pub success: bool,
}

pub fn clip_action(action: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
    let mut a = *action;
    for (i, v) in a.iter_mut().enumerate() {
        let v0 = if v.is_finite() { *v } else { 0.0 };
        *v = if i % 3 == 2 { v0.clamp(0.0, 1.0) } else { v0.clamp(-A_MAX, A_MAX) };
    }
    a
}

fn success_of(spec: &TaskSpec, s: &WorldState) -> bool {
    let eps = spec.eps_pos;
    match s.task {
        TaskId::DualReach => dist(s.left.pos, s.targets[0]) < eps && dist(s.right.pos, s.targets[1]) < eps,
        TaskId::Handover => dist(s.objects[0].pos, s.targets[0]) < eps,
        TaskId::BarLift => {
            dist(s.objects[0].pos, s.targets[0]) < eps
                && dist(s.objects[1].pos, s.targets[1]) < eps
                && s.bar_tilt_deg() < SUCCESS_TILT_DEG
        }
    }
}

/// Deterministic transition. A state that already succeeded is terminal and
/// is returned unchanged.
pub fn step(spec: &TaskSpec, state: &WorldState, action: &[f64; ACTION_DIM]) -> StepOutcome {
    if state.success {
        return StepOutcome {
            state: state.clone(),
            done: true,
            success: true,
        };
    }
    let a = clip_action(action);
    let mut s = state.clone();
    for (h, off) in [(Holder::Left, 0), (Holder::Right, 3)] {
        let arm = if h == Holder::Left { &mut s.left } else { &mut s.right };
        arm.pos = clamp_pos(s.task, h, [arm.pos[0] + a[off], arm.pos[1] + a[off + 1]]);
        arm.grip = a[off + 2];
    }
    // Open grips release; closed, empty grips take the nearest free object in reach.
    for o in &mut s.objects {
        if let Some(arm) = match o.held_by {
            Holder::Left => Some(&s.left),
            Holder::Right => Some(&s.right),
            Holder::None => None,
        } {
            if !arm.closed() {
                o.held_by = Holder::None;
            }
        }
    }
    for h in [Holder::Left, Holder::Right] {
        let arm = if h == Holder::Left { s.left } else { s.right };
        if !arm.closed() || s.holding(h) {
            continue;
        }
        let best = s
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.held_by == Holder::None && dist(o.pos, arm.pos) <= GRASP_RADIUS)
            .min_by(|a, b| dist(a.1.pos, arm.pos).total_cmp(&dist(b.1.pos, arm.pos)))
            .map(|(i, _)| i);
        if let Some(i) = best {
            s.objects[i].held_by = h;
        }
    }
    for o in &mut s.objects {
        match o.held_by {
            Holder::Left => o.pos = s.left.pos,
            Holder::Right => o.pos = s.right.pos,
            Holder::None => {}
        }
    }
    if s.task == TaskId::BarLift && s.objects.iter().any(|o| o.held_by != Holder::None) && s.bar_tilt_deg() > SLIP_TILT_DEG {
        for o in &mut s.objects {
            o.held_by = Holder::None;
        }
    }
    s.step += 1;
    s.success = success_of(spec, &s);
    let done = s.success || s.step >= spec.t_max;
    StepOutcome {
        success: s.success,
        done,
        state: s,
    }
}

/// A demonstration or evaluation rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord<T> {
    pub task: TaskId,
    pub seed: u64,
    pub index: u64,
    pub observations: Vec<Observation<T>>,
    pub states: Vec<WorldState>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub success: bool,
}

impl<T> EpisodeRecord<T> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Rolls the scripted expert for episode `index` of `seed`.
pub fn rollout_expert<T: Scalar>(spec: &TaskSpec, seed: u64, index: u64) -> EpisodeRecord<T> {
    let mut rng = episode_rng(seed, index);
    let (mut state, mut obs) = reset::<T, _>(spec, &mut rng);
    let mut rec = EpisodeRecord {
        task: spec.task,
        seed,
        index,
        observations: Vec::new(),
        states: Vec::new(),
        actions: Vec::new(),
        success: false,
    };
    loop {
        let a = expert_action(spec, &state);
        rec.observations.push(obs);
        rec.states.push(state.clone());
        rec.actions.push(a);
        let out = step(spec, &state, &a);
        state = out.state;
        obs = render_features(&state, spec.noise_std, &mut rng);
        if out.done {
            rec.success = out.success;
            return rec;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_action_only_advances_the_counter() {
        for task in TaskId::ALL {
            let spec = TaskSpec::new(task);
            let s = reset_state(&spec, &mut episode_rng(1, 0));
            let mut a = [0.0; 6];
            a[2] = s.left.grip;
            a[5] = s.right.grip;
            let out = step(&spec, &s, &a);
            let mut expect = s.clone();
            expect.step = 1;
            assert_eq!(out.state, expect);
        }
    }

    #[test]
    fn handover_left_arm_is_clamped_at_the_boundary() {
        let spec = TaskSpec::new(TaskId::Handover);
        let mut s = reset_state(&spec, &mut episode_rng(0, 0));
        s.left.pos = [0.15, 0.0];
        let out = step(&spec, &s, &[0.1, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(out.state.left.pos, [LEFT_X_MAX, 0.0]);
        s.right.pos = [-0.15, 0.3];
        let out = step(&spec, &s, &[0.0, 0.0, 1.0, -0.1, 0.0, 1.0]);
        assert_eq!(out.state.right.pos, [RIGHT_X_MIN, 0.3]);
    }

    #[test]
    fn actions_are_clipped_not_rejected() {
        let a = clip_action(&[5.0, -5.0, 3.0, f64::NAN, 0.05, -1.0]);
        assert_eq!(a, [A_MAX, -A_MAX, 1.0, 0.0, 0.05, 0.0]);
    }

    #[test]
    fn held_object_tracks_end_effector_exactly() {
        let spec = TaskSpec::new(TaskId::Handover);
        let mut s = reset_state(&spec, &mut episode_rng(4, 2));
        s.left.pos = s.objects[0].pos;
        let grab = step(&spec, &s, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).state;
        assert_eq!(grab.objects[0].held_by, Holder::Left);
        let moved = step(&spec, &grab, &[0.07, -0.03, 0.0, 0.0, 0.0, 1.0]).state;
        assert_eq!(dist(moved.objects[0].pos, moved.left.pos), 0.0);
        let released = step(&spec, &moved, &[0.05, 0.0, 1.0, 0.0, 0.0, 1.0]).state;
        assert_eq!(released.objects[0].held_by, Holder::None);
        assert_eq!(released.objects[0].pos, moved.objects[0].pos);
    }

    #[test]
    fn success_is_terminal() {
        let spec = TaskSpec::new(TaskId::DualReach);
        let mut s = reset_state(&spec, &mut episode_rng(0, 0));
        s.left.pos = s.targets[0];
        s.right.pos = s.targets[1];
        let out = step(&spec, &s, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(out.success && out.done);
        let again = step(&spec, &out.state, &[0.1, 0.1, 1.0, 0.1, 0.1, 1.0]);
        assert!(again.success && again.done);
        assert_eq!(again.state, out.state);
    }

    #[test]
    fn bar_slips_when_tilted() {
        let spec = TaskSpec::new(TaskId::BarLift);
        let mut s = reset_state(&spec, &mut episode_rng(0, 0));
        s.left.pos = s.objects[0].pos;
        s.right.pos = s.objects[1].pos;
        s = step(&spec, &s, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).state;
        assert!(s.holding(Holder::Left) && s.holding(Holder::Right));
        for _ in 0..10 {
            s = step(&spec, &s, &[0.0, 0.1, 0.0, 0.0, 0.0, 0.0]).state;
        }
        assert!(!s.holding(Holder::Left) && !s.holding(Holder::Right));
    }
}
