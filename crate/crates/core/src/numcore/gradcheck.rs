//! Central-difference verification of reverse-mode gradients.
//!
//! Runs in 64-bit only; finite differences at f32 precision are too noisy to
//! separate implementation bugs from rounding.

use super::autodiff::{backward, no_grad};
use super::tensor::{DType, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub failures: usize,
    pub tol: f64,
    /// Index of the tensor holding the worst element (for multi-input checks).
    pub worst_input: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare the analytic gradient of scalar-valued `f` at `x` against central
/// finite differences, per element.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_many(|xs| f(&xs[0]), &[x.clone()], eps, tol)
}

/// Multi-input variant: `f` maps the full tensor list to a scalar loss.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if xs.iter().any(|x| x.dtype() != DType::F64) {
        return Err(Error::Invalid("grad_check requires F64 tensors".into()));
    }

    let leaves: Vec<Tensor> = xs.iter().map(|x| x.detach_requiring_grad()).collect();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(Error::Invalid(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad_or_zeros()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        failures: 0,
        tol,
        worst_input: 0,
    };

    no_grad(|| -> Result<()> {
        for (ti, x) in xs.iter().enumerate() {
            let base = x.data().to_vec();
            for i in 0..base.len() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut probe: Vec<Tensor> = xs.iter().map(|t| t.detach()).collect();
                    let mut data = base.clone();
                    data[i] += delta;
                    probe[ti] = Tensor::from_vec(data, x.shape(), DType::F64)?;
                    Ok(f(&probe)?.item())
                };
                let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
                let rel = rel_err(analytic[ti][i], numeric);
                report.checked += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst_input = ti;
                }
                if rel > tol {
                    report.failures += 1;
                }
            }
        }
        Ok(())
    })?;

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ops;
    use crate::numcore::RngStream;

    #[test]
    fn quadratic_form_passes() {
        let mut s = RngStream::new(21, "gc-quad");
        for _ in 0..5 {
            let n = 2 + s.below(4) as usize;
            let a: Vec<f64> = (0..n * n).map(|_| s.uniform_in(-1.0, 1.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| s.uniform_in(-1.0, 1.0)).collect();
            let a = Tensor::from_vec(a, &[n, n], DType::F64).unwrap();
            let x = Tensor::from_vec(x, &[n], DType::F64).unwrap();
            // f(x) = sum((A·x) ⊙ x), a quadratic form
            let report = grad_check(
                |x| {
                    let col = ops::reshape(x, &[x.numel(), 1])?;
                    let ax = ops::matmul(&a, &col)?;
                    let ax = ops::reshape(&ax, &[x.numel()])?;
                    ops::sum(&ops::mul(&ax, x)?)
                },
                &x,
                1e-4,
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "max rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn constant_function_passes_with_zero_gradients() {
        let x = Tensor::from_vec(vec![1.0, -2.0], &[2], DType::F64).unwrap();
        let report = grad_check(|_x| Tensor::scalar(4.2, DType::F64), &x, 1e-4, 1e-5).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        use crate::numcore::autodiff::record;
        // A scale-by-3 whose recorded adjoint deliberately claims the factor
        // was 2. The checker must flag it.
        fn bad_triple(x: &Tensor) -> Result<Tensor> {
            let data = x.data().iter().map(|v| v * 3.0).collect();
            record("bad_triple", &[x], data, x.shape().to_vec(), |g| {
                vec![Some(g.iter().map(|v| v * 2.0).collect())]
            })
        }
        let x = Tensor::from_vec(vec![0.5, -1.5], &[2], DType::F64).unwrap();
        let report = grad_check(|x| ops::sum(&bad_triple(x)?), &x, 1e-4, 1e-5).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err > 0.3);
    }

    #[test]
    fn rejects_f32_input() {
        let x = Tensor::from_vec(vec![1.0], &[1], DType::F32).unwrap();
        assert!(grad_check(|x| ops::sum(x), &x, 1e-4, 1e-5).is_err());
    }
}
