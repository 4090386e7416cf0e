//! Central finite differences: the independent gradient oracle used to
//! verify every backward rule.

use crate::scalar::Scalar;

use super::Tensor;

/// Default perturbation step for [`finite_difference_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Estimate the gradient of a scalar-valued `f` at `x` by central
/// differences: `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
///
/// `f` must be pure and deterministic; it may build its own graphs
/// internally. This path is independent of the backward implementation.
pub fn finite_difference_grad<F: Scalar>(
    f: impl Fn(&Tensor<F>) -> F,
    x: &Tensor<F>,
    h: F,
) -> Tensor<F> {
    assert!(h > F::zero(), "finite-difference step must be positive");
    let base = x.to_vec();
    let mut grad = vec![F::zero(); base.len()];
    let two_h = h + h;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::<F>::new(x.shape().to_vec(), plus).expect("shape unchanged"));
        let fm = f(&Tensor::<F>::new(x.shape().to_vec(), minus).expect("shape unchanged"));
        grad[i] = (fp - fm) / two_h;
    }
    Tensor::new(x.shape().to_vec(), grad).expect("shape unchanged")
}

/// True when `a` and `b` agree elementwise within
/// `max(abs_tol, rel_tol * max(|a_i|, |b_i|))`.
pub fn within_tolerance<F: Scalar>(a: &[F], b: &[F], abs_tol: F, rel_tol: F) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b.iter()).all(|(x, y)| {
        let diff = (*x - *y).abs();
        let scale = x.abs().max(y.abs());
        diff <= abs_tol.max(rel_tol * scale)
    })
}
