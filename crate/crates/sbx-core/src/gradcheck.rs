//! Finite-difference gradient verification.

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Central-difference gradient of a deterministic scalar function `f` at `x`:
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)` per element.
///
/// Meaningful tolerances require the `f64` instantiation of the stack.
pub fn finite_diff<F, Func>(f: Func, x: &Tensor<F>, eps: F) -> Result<Tensor<F>>
where
    F: Scalar,
    Func: Fn(&Tensor<F>) -> Result<F>,
{
    assert!(eps > F::zero(), "finite_diff eps must be positive");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (F::from_f64(2.0) * eps);
    }
    Ok(grad)
}

/// Worst elementwise relative error between an analytic gradient and its
/// finite-difference estimate. Pairs where both magnitudes fall below
/// `floor` are treated as matching zeros.
pub fn max_relative_error<F: Scalar>(analytic: &Tensor<F>, numeric: &Tensor<F>, floor: F) -> F {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let mut worst = F::zero();
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let denom = a.abs().max(n.abs());
        if denom < floor {
            continue;
        }
        let rel = (*a - *n).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
