//! Central finite-difference oracles for gradients and Hessian-vector
//! products. These stay independent of the reverse-mode path so the two can
//! cross-check each other.

use thiserror::Error;

use crate::graph::EvalError;
use crate::tensor::{Tensor, TensorError};

/// Step for gradient central differences.
pub const FD_EPS: f64 = 1e-5;
/// Step for Hessian-vector central differences.
pub const HVP_EPS: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("direction vector has zero norm")]
    ZeroDirection,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Central-difference gradient: entry i is `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn fd_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor, OracleError>
where
    F: FnMut(&Tensor) -> Result<f64, EvalError>,
{
    if !(eps > 0.0) {
        return Err(OracleError::BadStep(eps));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(Tensor::new(x.shape().to_vec(), grad)?)
}

/// Finite-difference Hessian-vector product:
/// `(g(x + eps v) - g(x - eps v)) / (2 eps)` for a gradient function `g`.
pub fn hvp<G>(mut g: G, x: &Tensor, v: &Tensor, eps: f64) -> Result<Tensor, OracleError>
where
    G: FnMut(&Tensor) -> Result<Tensor, EvalError>,
{
    if !(eps > 0.0) {
        return Err(OracleError::BadStep(eps));
    }
    if v.norm() == 0.0 {
        return Err(OracleError::ZeroDirection);
    }
    let plus = g(&x.add_scaled(v, eps)?)?;
    let minus = g(&x.add_scaled(v, -eps)?)?;
    let data = plus
        .data()
        .iter()
        .zip(minus.data().iter())
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

/// `v^T H v` evaluated with a normalized probe direction for accuracy:
/// computes `hvp` along `v / ||v||` and rescales by `||v||^2`.
pub fn quadratic_form<G>(g: G, x: &Tensor, v: &Tensor, eps: f64) -> Result<f64, OracleError>
where
    G: FnMut(&Tensor) -> Result<Tensor, EvalError>,
{
    let norm = v.norm();
    if norm == 0.0 {
        return Err(OracleError::ZeroDirection);
    }
    let unit = Tensor::new(
        v.shape().to_vec(),
        v.data().iter().map(|x| x / norm).collect(),
    )?;
    let hu = hvp(g, x, &unit, eps)?;
    Ok(unit.dot(&hu) * norm * norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_grad_of_sum_is_ones() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.1, 0.7, 1.1, -2.0, 0.0]).unwrap();
        let g = fd_grad(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn fd_grad_of_square_at_two() {
        let x = Tensor::new(vec![1], vec![2.0]).unwrap();
        let g = fd_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn fd_grad_rejects_bad_eps() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(matches!(
            fd_grad(|t| Ok(t.data()[0]), &x, 0.0),
            Err(OracleError::BadStep(_))
        ));
    }

    #[test]
    fn hvp_diagonal_quadratic() {
        // f = x^T diag(1,2) x / 2 -> H v = (v1, 2 v2)
        let grad =
            |t: &Tensor| Ok(Tensor::new(vec![2], vec![t.data()[0], 2.0 * t.data()[1]]).unwrap());
        let x = Tensor::new(vec![2], vec![0.4, -0.9]).unwrap();
        let v = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let hv = hvp(grad, &x, &v, HVP_EPS).unwrap();
        assert!((hv.data()[0] - 1.0).abs() < 1e-8);
        assert!((hv.data()[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn hvp_linear_function_is_zero() {
        let grad = |_: &Tensor| Ok(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let v = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        let hv = hvp(grad, &x, &v, HVP_EPS).unwrap();
        assert_eq!(hv.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hvp_identity_hessian_returns_direction() {
        // f = ||x||^2 / 2 -> grad = x, H = I
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let v = Tensor::new(vec![3], vec![-0.3, 0.8, 0.1]).unwrap();
        let hv = hvp(|t| Ok(t.clone()), &x, &v, HVP_EPS).unwrap();
        assert!(hv.max_abs_diff(&v) < 1e-8);
    }

    #[test]
    fn hvp_rejects_zero_direction() {
        let x = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let v = Tensor::zeros(&[2]);
        assert!(matches!(
            hvp(|t| Ok(t.clone()), &x, &v, HVP_EPS),
            Err(OracleError::ZeroDirection)
        ));
    }
}
