//! Central finite-difference gradient checks.

use super::{Graph, Tensor, Var};
use crate::error::{AfaError, Result};

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both norms are below 1e-10.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale < 1e-10 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradient<F>(inputs: &[Tensor], step: f64, f: F) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let hi = f(&work)?;
            work[i].data_mut()[j] = orig - step;
            let lo = f(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (hi - lo) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Largest per-input relative error between tape gradients of `f` and
/// central differences with the given step.
pub fn gradient_check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let numeric = numeric_gradient(inputs, step, |ts| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    })?;
    let mut worst: f64 = 0.0;
    for (v, n) in vars.iter().zip(&numeric) {
        let a = grads
            .get(*v)
            .ok_or_else(|| AfaError::contract("input did not receive a gradient"))?;
        worst = worst.max(relative_error(a, n));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_enough() {
        let x = Tensor::row_vector(vec![0.3, -1.2, 2.0]);
        let err = gradient_check(&[x], 1e-5, |g, v| {
            let t = g.transpose(v[0])?;
            let y = g.matmul(v[0], t)?;
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relative_error_cases() {
        let a = Tensor::row_vector(vec![1.0, 0.0]);
        assert_eq!(relative_error(&a, &a), 0.0);
        let z = Tensor::row_vector(vec![0.0, 0.0]);
        assert_eq!(relative_error(&z, &z), 0.0);
        assert_eq!(relative_error(&a, &z), 1.0);
    }
}
