//! Finite-difference gradient checking.
//!
//! These helpers re-evaluate a loss function at perturbed inputs and never
//! touch the tape, so they stay an independent oracle for whatever the tape
//! claims the gradient is.

use crate::tensor::Matrix;

/// Central-difference gradient of `f` at `x0`, entry by entry.
pub fn numeric_grad(mut f: impl FnMut(&Matrix) -> f64, x0: &Matrix, h: f64) -> Matrix {
    let mut x = x0.clone();
    let mut grad = Matrix::zeros(x0.rows(), x0.cols());
    for i in 0..x0.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let plus = f(&x);
        x.data_mut()[i] = orig - h;
        let minus = f(&x);
        x.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error between two scalars, treating values below `floor` as
/// indistinguishable from zero.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest elementwise relative error between two same-shaped matrices.
pub fn max_rel_err(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in gradient comparison");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}
