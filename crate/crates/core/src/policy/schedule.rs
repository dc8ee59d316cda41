use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Result, Tensor};
use crate::Scalar;

/// Offset of the squared-cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Smallest allowed `alpha_bar[k] / alpha_bar[k - 1]`.
pub const MIN_RATIO: f64 = 0.001;
/// Clip applied to the predicted clean sample during DDIM.
pub const X0_CLIP: f64 = 1.5;

/// Cumulative signal fractions `alpha_bar[0..=k_steps]`, kept in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub k_steps: usize,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }
}

/// `alpha_bar[k] = f(k) / f(0)` with `f(k) = cos^2(((k/K + s) / (1 + s)) pi/2)`,
/// with every consecutive ratio held at or above [`MIN_RATIO`].
pub fn cosine_schedule(k_steps: usize) -> Result<NoiseSchedule> {
    if k_steps < 2 {
        return Err(NumericsError::InvalidArgument {
            op: "cosine_schedule",
            msg: format!("need at least 2 steps, got {k_steps}"),
        });
    }
    let f = |k: usize| {
        let t = (k as f64 / k_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0);
    let mut alpha_bar = Vec::with_capacity(k_steps + 1);
    alpha_bar.push(1.0);
    for k in 1..=k_steps {
        let prev = alpha_bar[k - 1];
        alpha_bar.push((f(k) / f0).max(prev * MIN_RATIO));
    }
    Ok(NoiseSchedule { k_steps, alpha_bar })
}

fn check_step(op: &'static str, k: usize, sched: &NoiseSchedule) -> Result<()> {
    if k == 0 || k > sched.k_steps {
        return Err(NumericsError::InvalidArgument {
            op,
            msg: format!("step {k} outside 1..={}", sched.k_steps),
        });
    }
    Ok(())
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn combine<T: Scalar>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Tensor<T> {
    let (ca, cb) = (T::of(ca), T::of(cb));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| ca * x + cb * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `a_k = sqrt(alpha_bar_k) a0 + sqrt(1 - alpha_bar_k) eps`.
pub fn forward_diffuse<T: Scalar>(a0: &Tensor<T>, k: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    check_step("forward_diffuse", k, sched)?;
    same_shape("forward_diffuse", a0, eps)?;
    let ab = sched.alpha_bar(k);
    Ok(combine(a0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Clean-sample estimate `(a_k - sqrt(1 - alpha_bar_k) eps_hat) / sqrt(alpha_bar_k)`.
pub fn predict_x0<T: Scalar>(a_k: &Tensor<T>, k: usize, eps_hat: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    same_shape("predict_x0", a_k, eps_hat)?;
    let ab = sched.alpha_bar(k);
    let s = ab.sqrt();
    let n = T::of((1.0 - ab).sqrt());
    let data = a_k
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| (x - n * e) / T::of(s))
        .collect();
    Tensor::new(a_k.shape().to_vec(), data)
}

/// One ancestral step: `a_{k-1} = sqrt(alpha_bar_{k-1}) mu + sqrt(1 - alpha_bar_{k-1}) z`
/// where `mu` is the clean-sample estimate and `z` is standard normal
/// (zero at `k = 1`).
pub fn ddpm_reverse_step<T: Scalar, R: Rng + ?Sized>(
    a_k: &Tensor<T>,
    k: usize,
    eps_hat: &Tensor<T>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_step("ddpm_reverse_step", k, sched)?;
    let mu = predict_x0(a_k, k, eps_hat, sched)?;
    let ab = sched.alpha_bar(k - 1);
    let z = if k == 1 {
        Tensor::zeros(a_k.shape().to_vec())
    } else {
        Tensor::randn(a_k.shape().to_vec(), 1.0, rng)
    };
    Ok(combine(&mu, ab.sqrt(), &z, (1.0 - ab).sqrt()))
}

/// `n_steps + 1` evenly spaced step indices from `k_steps` down to 0.
pub fn ddim_steps(k_steps: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > k_steps {
        return Err(NumericsError::InvalidArgument {
            op: "ddim_steps",
            msg: format!("{n_steps} steps not in 1..={k_steps}"),
        });
    }
    Ok((0..=n_steps)
        .map(|i| ((k_steps * (n_steps - i)) as f64 / n_steps as f64).round() as usize)
        .collect())
}

/// Deterministic DDIM step from `k` to `k_next < k`, clipping the clean-sample
/// estimate to `±X0_CLIP`.
pub fn ddim_step<T: Scalar>(a_k: &Tensor<T>, k: usize, k_next: usize, eps_hat: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    let mut x0 = predict_x0(a_k, k, eps_hat, sched)?;
    let c = T::of(X0_CLIP);
    x0.data_mut().iter_mut().for_each(|v| *v = v.max(-c).min(c));
    let ab = sched.alpha_bar(k_next);
    Ok(combine(&x0, ab.sqrt(), eps_hat, (1.0 - ab).sqrt()))
}

/// Deterministic sampler: draws `a_K ~ N(0, I)` of `shape` from `rng` and
/// runs [`ddim_sample_from`].
pub fn ddim_sample<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    sched: &NoiseSchedule,
    n_steps: usize,
    rng: &mut R,
    denoise: impl FnMut(&Tensor<T>, usize) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    ddim_sample_from(Tensor::randn(shape.to_vec(), 1.0, rng), sched, n_steps, denoise)
}

/// Walks the [`ddim_steps`] sequence from `a_K = init`, calling
/// `denoise(a_k, k)` for the noise estimate at each step.
pub fn ddim_sample_from<T: Scalar>(
    init: Tensor<T>,
    sched: &NoiseSchedule,
    n_steps: usize,
    mut denoise: impl FnMut(&Tensor<T>, usize) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let steps = ddim_steps(sched.k_steps, n_steps)?;
    let mut a = init;
    for w in steps.windows(2) {
        let eps_hat = denoise(&a, w[0])?;
        same_shape("ddim_sample", &a, &eps_hat)?;
        a = ddim_step(&a, w[0], w[1], &eps_hat, sched)?;
    }
    Ok(a)
}
