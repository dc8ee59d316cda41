use super::{dist, sub, Holder, TaskId, TaskSpec, Vec2, WorldState, A_MAX};

const GAIN: f64 = 0.5;
/// Distance at which the expert closes its grip on an object.
const GRASP_AT: f64 = 0.02;
/// Distance from the handover point within which the object counts as delivered
/// to the centre zone.
const HANDOFF_ZONE: f64 = 0.05;
const OPEN: f64 = 1.0;
const CLOSED: f64 = 0.0;

fn toward(from: Vec2, to: Vec2) -> Vec2 {
    let d = sub(to, from);
    [(GAIN * d[0]).clamp(-A_MAX, A_MAX), (GAIN * d[1]).clamp(-A_MAX, A_MAX)]
}

fn action(l: Vec2, gl: f64, r: Vec2, gr: f64) -> [f64; 6] {
    [l[0], l[1], gl, r[0], r[1], gr]
}

/// Stateless scripted expert: proportional control toward task waypoints
/// chosen from the current state alone.
pub fn expert_action(_spec: &TaskSpec, s: &WorldState) -> [f64; 6] {
    let (lp, rp) = (s.left.pos, s.right.pos);
    match s.task {
        TaskId::DualReach => action(toward(lp, s.targets[0]), OPEN, toward(rp, s.targets[1]), OPEN),
        TaskId::Handover => {
            let obj = s.objects[0];
            let (goal, hp) = (s.targets[0], s.targets[1]);
            let rest = [hp[0] - 0.3, hp[1]];
            let grab = |ee: Vec2| if dist(ee, obj.pos) < GRASP_AT { CLOSED } else { OPEN };
            match obj.held_by {
                Holder::Left => {
                    let both_there = dist(lp, hp) < GRASP_AT && dist(rp, hp) < GRASP_AT;
                    action(toward(lp, hp), if both_there { OPEN } else { CLOSED }, toward(rp, hp), OPEN)
                }
                Holder::Right => action(toward(lp, rest), OPEN, toward(rp, goal), CLOSED),
                Holder::None if dist(obj.pos, hp) < HANDOFF_ZONE || obj.pos[0] > 0.2 => {
                    action(toward(lp, rest), OPEN, toward(rp, obj.pos), grab(rp))
                }
                Holder::None => action(toward(lp, obj.pos), grab(lp), toward(rp, hp), OPEN),
            }
        }
        TaskId::BarLift => {
            let (le, re) = (s.objects[0], s.objects[1]);
            let (hl, hr) = (le.held_by == Holder::Left, re.held_by == Holder::Right);
            if hl && hr {
                let e = [
                    0.5 * ((s.targets[0][0] - le.pos[0]) + (s.targets[1][0] - re.pos[0])),
                    0.5 * ((s.targets[0][1] - le.pos[1]) + (s.targets[1][1] - re.pos[1])),
                ];
                let d = toward([0.0, 0.0], e);
                return action(d, CLOSED, d, CLOSED);
            }
            let side = |held: bool, ee: Vec2, end: Vec2| {
                if held {
                    ([0.0, 0.0], CLOSED)
                } else {
                    (toward(ee, end), if dist(ee, end) < GRASP_AT { CLOSED } else { OPEN })
                }
            };
            let (dl, gl) = side(hl, lp, le.pos);
            let (dr, gr) = side(hr, rp, re.pos);
            action(dl, gl, dr, gr)
        }
    }
}
