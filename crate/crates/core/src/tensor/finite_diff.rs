//! Central finite differences, the independent oracle for every analytic
//! gradient in this crate.

use super::Tensor;
use crate::error::Result;

/// Per-element central difference `(f(x+h) - f(x-h)) / 2h` of a
/// scalar-valued function at `x`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert!(h > 0.0, "finite_diff_grad: h must be > 0");
    let base = x.data().to_vec();
    let shape = x.shape().to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let fp = f(&Tensor::from_vec(plus, &shape, false)?)?.item();
        let mut minus = base.clone();
        minus[i] -= h;
        let fm = f(&Tensor::from_vec(minus, &shape, false)?)?.item();
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::from_vec(grad, &shape, false)
}
