//! Dual codebooks with a shared index per token: one index selects an entry
//! from both arms' books by minimising the summed distance, applied
//! independently at each residual level.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NumericsError, ParamStore, Result, Tensor, Var};
use crate::{Arm, Scalar};

pub const PREFIX: &str = "codebook.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookConfig {
    /// Entries per level (K).
    pub size: usize,
    pub levels: usize,
    pub beta: f64,
    /// `false` selects each arm's entry with its own argmin.
    pub shared_mapping: bool,
    pub init_std: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            size: 256,
            levels: 2,
            beta: 0.25,
            shared_mapping: true,
            init_std: 0.1,
        }
    }
}

pub fn param_name(level: usize, arm: Arm) -> String {
    format!("{PREFIX}l{level}.{}", arm.name())
}

/// Per-level `K x d` books for both arms plus per-entry usage counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookPair<T> {
    pub left: Vec<Tensor<T>>,
    pub right: Vec<Tensor<T>>,
    pub usage: Vec<Vec<u64>>,
}

impl<T: Scalar> CodebookPair<T> {
    /// Gaussian entries, with entry 0 of every level set to zero.
    pub fn new<R: Rng + ?Sized>(size: usize, dim: usize, levels: usize, init_std: f64, rng: &mut R) -> Self {
        let mut book = || {
            let mut t = Tensor::randn([size, dim], init_std, rng);
            t.data_mut()[..dim].fill(T::zero());
            t
        };
        let left = (0..levels).map(|_| book()).collect();
        let right = (0..levels).map(|_| book()).collect();
        Self {
            left,
            right,
            usage: vec![vec![0; size]; levels],
        }
    }

    pub fn from_store(store: &ParamStore<T>, levels: usize) -> Result<Self> {
        let get = |l: usize, arm: Arm| {
            let name = param_name(l, arm);
            store.get(&name).cloned().ok_or(NumericsError::UnknownParam(name))
        };
        let left = (0..levels).map(|l| get(l, Arm::Left)).collect::<Result<Vec<_>>>()?;
        let right = (0..levels).map(|l| get(l, Arm::Right)).collect::<Result<Vec<_>>>()?;
        let size = left.first().map_or(0, |t| t.shape()[0]);
        Ok(Self {
            left,
            right,
            usage: vec![vec![0; size]; levels],
        })
    }

    pub fn write_to(&self, store: &mut ParamStore<T>) {
        for l in 0..self.levels() {
            store.insert(param_name(l, Arm::Left), self.left[l].clone());
            store.insert(param_name(l, Arm::Right), self.right[l].clone());
        }
    }

    pub fn levels(&self) -> usize {
        self.left.len()
    }

    pub fn size(&self) -> usize {
        self.left.first().map_or(0, |t| t.shape()[0])
    }

    pub fn dim(&self) -> usize {
        self.left.first().map_or(0, |t| t.shape()[1])
    }

    pub fn book(&self, level: usize, arm: Arm) -> &Tensor<T> {
        match arm {
            Arm::Left => &self.left[level],
            Arm::Right => &self.right[level],
        }
    }

    pub fn record(&mut self, q: &QuantResult<T>) {
        for (l, counts) in self.usage.iter_mut().enumerate() {
            for n in 0..q.tokens {
                counts[q.left_index(n, l)] += 1;
                if q.right_index(n, l) != q.left_index(n, l) {
                    counts[q.right_index(n, l)] += 1;
                }
            }
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| u.fill(0));
    }

    /// Unused entries at `level`, excluding the pinned zero entry.
    pub fn dead_codes(&self, level: usize) -> Vec<usize> {
        (1..self.size()).filter(|&i| self.usage[level][i] == 0).collect()
    }

    /// `exp(entropy)` of the usage distribution at `level`; 0 when unused.
    pub fn perplexity(&self, level: usize) -> f64 {
        let total: u64 = self.usage[level].iter().sum();
        if total == 0 {
            return 0.0;
        }
        let h: f64 = self.usage[level]
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        h.exp()
    }
}

/// Squared Euclidean distance from `q` to every row of `book`.
pub fn sq_distances<T: Scalar>(q: &[T], book: &Tensor<T>) -> Vec<T> {
    book.rows()
        .map(|z| q.iter().zip(z).map(|(&a, &b)| (a - b) * (a - b)).sum())
        .collect()
}

/// Lowest index of the minimum; distances are assumed finite.
fn argmin<T: Scalar>(d: impl Iterator<Item = T>) -> usize {
    let mut best = (0, T::infinity());
    for (i, v) in d.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest<T> {
    pub index: usize,
    pub d_left: T,
    pub d_right: T,
}

/// `argmin_i |q_left - Z_left[i]|^2 + |q_right - Z_right[i]|^2`, ties to the
/// lowest index.
pub fn shared_nearest<T: Scalar>(q_left: &[T], q_right: &[T], z_left: &Tensor<T>, z_right: &Tensor<T>) -> Nearest<T> {
    let dl = sq_distances(q_left, z_left);
    let dr = sq_distances(q_right, z_right);
    let index = argmin(dl.iter().zip(&dr).map(|(&a, &b)| a + b));
    Nearest {
        index,
        d_left: dl[index],
        d_right: dr[index],
    }
}

/// Single-book nearest entry, ties to the lowest index.
pub fn nearest<T: Scalar>(q: &[T], z: &Tensor<T>) -> (usize, T) {
    let d = sq_distances(q, z);
    let i = argmin(d.iter().copied());
    (i, d[i])
}

/// Residual quantisation of `tokens` paired rows.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult<T> {
    pub tokens: usize,
    pub levels: usize,
    pub a_z_left: Tensor<T>,
    pub a_z_right: Tensor<T>,
    /// Token-major `tokens x levels`.
    pub left_indices: Vec<usize>,
    pub right_indices: Vec<usize>,
    /// Residual norms `(left, right)` after each level, token-major.
    pub residual_norms: Vec<(T, T)>,
    /// Inputs to each level, `[tokens, d]` per level.
    pub level_inputs_left: Vec<Tensor<T>>,
    pub level_inputs_right: Vec<Tensor<T>>,
}

impl<T: Scalar> QuantResult<T> {
    pub fn left_index(&self, token: usize, level: usize) -> usize {
        self.left_indices[token * self.levels + level]
    }

    pub fn right_index(&self, token: usize, level: usize) -> usize {
        self.right_indices[token * self.levels + level]
    }

    /// Indices of one level for every token.
    pub fn level_indices(&self, level: usize, arm: Arm) -> Vec<usize> {
        let src = match arm {
            Arm::Left => &self.left_indices,
            Arm::Right => &self.right_indices,
        };
        (0..self.tokens).map(|n| src[n * self.levels + level]).collect()
    }

    pub fn indices_shared(&self) -> bool {
        self.left_indices == self.right_indices
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Assigns codes to paired `[tokens, d]` rows without touching usage.
pub fn rvq_assign<T: Scalar>(q_left: &Tensor<T>, q_right: &Tensor<T>, books: &CodebookPair<T>, shared: bool) -> Result<QuantResult<T>> {
    let d = books.dim();
    if q_left.shape() != q_right.shape() || q_left.shape().len() != 2 || q_left.shape()[1] != d {
        return Err(NumericsError::ShapeMismatch {
            op: "rvq_quantize",
            lhs: q_left.shape().to_vec(),
            rhs: q_right.shape().to_vec(),
        });
    }
    let tokens = q_left.shape()[0];
    let levels = books.levels();
    let mut rl = q_left.data().to_vec();
    let mut rr = q_right.data().to_vec();
    let mut zl = vec![T::zero(); tokens * d];
    let mut zr = vec![T::zero(); tokens * d];
    let mut li = vec![0; tokens * levels];
    let mut ri = vec![0; tokens * levels];
    let mut norms = vec![(T::zero(), T::zero()); tokens * levels];
    let mut inl = Vec::with_capacity(levels);
    let mut inr = Vec::with_capacity(levels);
    for l in 0..levels {
        inl.push(Tensor::new([tokens, d], rl.clone())?);
        inr.push(Tensor::new([tokens, d], rr.clone())?);
        let (bl, br) = (&books.left[l], &books.right[l]);
        for n in 0..tokens {
            let (ql, qr) = (&rl[n * d..(n + 1) * d], &rr[n * d..(n + 1) * d]);
            let (il, ir) = if shared {
                let i = shared_nearest(ql, qr, bl, br).index;
                (i, i)
            } else {
                (nearest(ql, bl).0, nearest(qr, br).0)
            };
            li[n * levels + l] = il;
            ri[n * levels + l] = ir;
            for (j, (&el, &er)) in bl.data()[il * d..(il + 1) * d]
                .iter()
                .zip(&br.data()[ir * d..(ir + 1) * d])
                .enumerate()
            {
                rl[n * d + j] -= el;
                rr[n * d + j] -= er;
                zl[n * d + j] += el;
                zr[n * d + j] += er;
            }
            norms[n * levels + l] = (norm(&rl[n * d..(n + 1) * d]), norm(&rr[n * d..(n + 1) * d]));
        }
    }
    Ok(QuantResult {
        tokens,
        levels,
        a_z_left: Tensor::new([tokens, d], zl)?,
        a_z_right: Tensor::new([tokens, d], zr)?,
        left_indices: li,
        right_indices: ri,
        residual_norms: norms,
        level_inputs_left: inl,
        level_inputs_right: inr,
    })
}

/// [`rvq_assign`] followed by a usage update.
pub fn rvq_quantize<T: Scalar>(q_left: &Tensor<T>, q_right: &Tensor<T>, books: &mut CodebookPair<T>, shared: bool) -> Result<QuantResult<T>> {
    let q = rvq_assign(q_left, q_right, books, shared)?;
    books.record(&q);
    Ok(q)
}

/// The value of `a_z` with identity gradient to `a_q`. Written as
/// `sg(a_z) + (a_q - sg(a_q))` so the forward value is `a_z` bit for bit.
pub fn straight_through<T: Scalar>(g: &Graph<'_, T>, a_q: Var, a_z: Var) -> Result<Var> {
    let zero = g.sub(a_q, g.stop_gradient(a_q)?)?;
    g.add(g.stop_gradient(a_z)?, zero)
}

/// Squared norm over the last axis, averaged over all leading axes.
fn mean_sq_norm<T: Scalar>(g: &Graph<'_, T>, x: Var) -> Result<Var> {
    let width = *g.shape(x).last().unwrap_or(&1);
    g.scale(g.mean_all(g.mul(x, x)?)?, T::of(width as f64))
}

/// `|sg(a_q) - a_z|^2 + beta |a_q - sg(a_z)|^2`, squared norms over the last
/// axis and mean over the rest.
pub fn vq_loss<T: Scalar>(g: &Graph<'_, T>, a_q: Var, a_z: Var, beta: f64) -> Result<Var> {
    let codebook = mean_sq_norm(g, g.sub(g.stop_gradient(a_q)?, a_z)?)?;
    let commit = mean_sq_norm(g, g.sub(a_q, g.stop_gradient(a_z)?)?)?;
    g.add(codebook, g.scale(commit, T::of(beta))?)
}

/// Graph-side result of quantising paired `[B, n, d]` token sets.
#[derive(Debug, Clone)]
pub struct QuantizedTokens<T> {
    pub st_left: Var,
    pub st_right: Var,
    pub vq_loss: Var,
    pub assignment: QuantResult<T>,
}

/// Quantises both arms' tokens against the codebook parameters bound in `g`,
/// returning straight-through outputs and the summed per-level VQ loss.
pub fn quantize_tokens<T: Scalar>(
    g: &Graph<'_, T>,
    books: &CodebookPair<T>,
    a_q_left: Var,
    a_q_right: Var,
    cfg: &CodebookConfig,
) -> Result<QuantizedTokens<T>> {
    let shape = g.shape(a_q_left);
    let d = *shape.last().unwrap_or(&0);
    let rows = shape.iter().product::<usize>() / d.max(1);
    let flat = |v: Var| g.value(v).clone().reshape([rows, d]);
    let assignment = rvq_assign(&flat(a_q_left)?, &flat(a_q_right)?, books, cfg.shared_mapping)?;
    let mut loss: Option<Var> = None;
    let mut outs = Vec::with_capacity(2);
    for (arm, a_q) in [(Arm::Left, a_q_left), (Arm::Right, a_q_right)] {
        let mut code_sum: Option<Var> = None;
        for l in 0..books.levels() {
            let table = g.param(&param_name(l, arm))?;
            let z = g.reshape(g.embedding(table, &assignment.level_indices(l, arm))?, &shape)?;
            let residual = match code_sum {
                None => a_q,
                Some(s) => g.sub(a_q, g.stop_gradient(s)?)?,
            };
            let term = vq_loss(g, residual, z, cfg.beta)?;
            loss = Some(match loss {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
            code_sum = Some(match code_sum {
                None => z,
                Some(s) => g.add(s, z)?,
            });
        }
        let a_z = code_sum.ok_or(NumericsError::InvalidArgument {
            op: "quantize_tokens",
            msg: "no codebook levels".into(),
        })?;
        outs.push(straight_through(g, a_q, a_z)?);
    }
    Ok(QuantizedTokens {
        st_left: outs[0],
        st_right: outs[1],
        vq_loss: loss.expect("at least one level"),
        assignment,
    })
}

/// Resets unused entries (except the pinned zero entry) pairwise from recent
/// level inputs: `recent[level]` holds `(q_left, q_right)` rows taken from the
/// same token. Returns the number of entries reset. Usage is cleared.
pub fn reinit_dead_codes<T: Scalar, R: Rng + ?Sized>(
    books: &mut CodebookPair<T>,
    recent: &[Vec<(Vec<T>, Vec<T>)>],
    rng: &mut R,
) -> usize {
    let d = books.dim();
    let mut reset = 0;
    for l in 0..books.levels() {
        let pool = match recent.get(l) {
            Some(p) if !p.is_empty() => p,
            _ => continue,
        };
        for i in books.dead_codes(l) {
            let (ql, qr) = pool.choose(rng).expect("non-empty pool");
            books.left[l].data_mut()[i * d..(i + 1) * d].copy_from_slice(ql);
            books.right[l].data_mut()[i * d..(i + 1) * d].copy_from_slice(qr);
            reset += 1;
        }
    }
    books.reset_usage();
    reset
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_of_uniform_usage_is_entry_count() {
        let mut b = CodebookPair::<f64>::new(4, 2, 1, 0.1, &mut rand::rng());
        b.usage[0] = vec![3, 3, 3, 3];
        assert!((b.perplexity(0) - 4.0).abs() < 1e-12);
        assert_eq!(b.dead_codes(0), Vec::<usize>::new());
        b.usage[0] = vec![0, 1, 0, 2];
        assert_eq!(b.dead_codes(0), vec![2]);
    }
}
