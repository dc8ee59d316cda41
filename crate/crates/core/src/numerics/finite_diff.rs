use crate::scalar::Scalar;

use super::tensor::{NumericsError, Result, Tensor};

/// Central-difference gradient of a scalar function at `x`.
///
/// Perturbations are applied in `f64` and cast back to `T`, so for `f32`
/// the effective step is the representable neighbour of `x ± eps`.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<f64>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(NumericsError::InvalidArgument {
            op: "finite_diff_grad",
            msg: format!("eps {eps} outside [1e-5, 1e-2]"),
        });
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let hi = T::of(orig.as_f64() + eps);
        let lo = T::of(orig.as_f64() - eps);
        probe.data_mut()[i] = hi;
        let fp = f(&probe)?;
        probe.data_mut()[i] = lo;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericsError::NonFinite { op: "finite_diff_grad" });
        }
        let h = hi.as_f64() - lo.as_f64();
        grad.push(T::of((fp - fm) / h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-3).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-4);
        assert!((g.data()[1] - 4.0).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_eps_and_non_finite() {
        let x = Tensor::<f64>::zeros([1]);
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 1.0).is_err());
        let err = finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-3).unwrap_err();
        assert_eq!(err, NumericsError::NonFinite { op: "finite_diff_grad" });
    }
}
