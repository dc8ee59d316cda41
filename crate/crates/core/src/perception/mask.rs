use serde::{Deserialize, Serialize};

/// Token group of a position in the aggregator sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    LeftLatent,
    LeftArm,
    RightLatent,
    RightArm,
    Head,
}

impl Group {
    fn is_left(self) -> bool {
        matches!(self, Group::LeftLatent | Group::LeftArm)
    }

    fn is_right(self) -> bool {
        matches!(self, Group::RightLatent | Group::RightArm)
    }
}

/// Attention allow-matrix over the sequence
/// `[left latents, left arm tokens, right latents, right arm tokens, head]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskLayout {
    pub latents: usize,
    pub arm_tokens: usize,
    pub head_tokens: usize,
    /// Row-major `len() x len()`; `allow[i * len + j]` means token `i` may read `j`.
    pub allow: Vec<bool>,
}

impl MaskLayout {
    pub fn len(&self) -> usize {
        2 * (self.latents + self.arm_tokens) + self.head_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, i: usize) -> Group {
        let (n, a) = (self.latents, self.arm_tokens);
        match i {
            i if i < n => Group::LeftLatent,
            i if i < n + a => Group::LeftArm,
            i if i < 2 * n + a => Group::RightLatent,
            i if i < 2 * (n + a) => Group::RightArm,
            _ => Group::Head,
        }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.len() + j]
    }

    /// Offsets of each group: `(left latents, left arm, right latents, right arm, head)`.
    pub fn offsets(&self) -> [usize; 5] {
        let (n, a) = (self.latents, self.arm_tokens);
        [0, n, n + a, 2 * n + a, 2 * (n + a)]
    }

    /// Whether any allowed entry joins a left-group token with a right-group token.
    pub fn couples_arms(&self) -> bool {
        let s = self.len();
        (0..s).any(|i| {
            (0..s).any(|j| {
                let (gi, gj) = (self.group(i), self.group(j));
                self.allowed(i, j) && ((gi.is_left() && gj.is_right()) || (gi.is_right() && gj.is_left()))
            })
        })
    }
}

/// Builds the unidirectional aggregation mask. Latents read their own arm's
/// latents and arm tokens plus the head; arm tokens read themselves (or their
/// whole arm-token group when `arm_tokens_see_each_other`) plus the head; head
/// tokens read only the head. The diagonal is always allowed.
pub fn build_mask(latents: usize, arm_tokens: usize, head_tokens: usize, arm_tokens_see_each_other: bool) -> MaskLayout {
    let mut layout = MaskLayout {
        latents,
        arm_tokens,
        head_tokens,
        allow: Vec::new(),
    };
    let s = layout.len();
    let mut allow = vec![false; s * s];
    for i in 0..s {
        for j in 0..s {
            let (gi, gj) = (layout.group(i), layout.group(j));
            allow[i * s + j] = i == j
                || gj == Group::Head
                || match gi {
                    Group::LeftLatent => matches!(gj, Group::LeftLatent | Group::LeftArm),
                    Group::RightLatent => matches!(gj, Group::RightLatent | Group::RightArm),
                    Group::LeftArm | Group::RightArm => arm_tokens_see_each_other && gi == gj,
                    Group::Head => false,
                };
        }
    }
    layout.allow = allow;
    layout
}
