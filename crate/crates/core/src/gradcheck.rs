//! Central finite differences, the oracle certifying every analytic
//! gradient in the repository.

use crate::error::Result;
use crate::tensor::Tensor;

/// Central difference (f(x + h e_i) - f(x - h e_i)) / (2h) per coordinate.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut grad = Tensor::zeros(x.dims());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error between an analytic gradient and its finite-difference
/// estimate: ||a - n|| / max(||a||, ||n||, eps).
pub fn relative_grad_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .sub(numeric)
        .expect("gradcheck shapes must agree")
        .norm();
    diff / analytic.norm().max(numeric.norm()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_zero_gradient() {
        let x = Tensor::new(vec![3], vec![1.0, -1.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| Ok(3.25), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
