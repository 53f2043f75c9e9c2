//! Central finite-difference checking of reverse-mode gradients.

use super::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per input tensor.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares the autodiff gradient of a scalar-valued function against
/// central finite differences at `points`.
///
/// Relative error is normalized by the inf-norm of the gradient of each
/// input (floored at 1e-6) so near-zero components do not divide by noise.
pub fn grad_check<F>(
    f: F,
    points: &[(Vec<f64>, Vec<usize>)],
    step: f64,
    tolerance: f64,
) -> TensorResult<GradCheckReport>
where
    F: Fn(&[Tensor]) -> TensorResult<Tensor>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let leaves: Vec<Tensor> = points
        .iter()
        .map(|(d, s)| Tensor::leaf(d.clone(), s.clone()))
        .collect();
    let loss = f(&leaves)?;
    if !loss.item().is_finite() {
        return Err(TensorError::NonFinite("grad_check loss"));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |points: &[(Vec<f64>, Vec<usize>)]| -> TensorResult<f64> {
        let leaves: Vec<Tensor> = points
            .iter()
            .map(|(d, s)| Tensor::constant(d.clone(), s.clone()))
            .collect();
        let v = f(&leaves)?.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite("grad_check probe"));
        }
        Ok(v)
    };

    let mut per_input = Vec::with_capacity(points.len());
    let mut work: Vec<(Vec<f64>, Vec<usize>)> = points.to_vec();
    for (ti, (data, _)) in points.iter().enumerate() {
        let mut max_abs_diff = 0.0_f64;
        let mut numeric_inf = 0.0_f64;
        for ei in 0..data.len() {
            let orig = data[ei];
            work[ti].0[ei] = orig + step;
            let plus = eval(&work)?;
            work[ti].0[ei] = orig - step;
            let minus = eval(&work)?;
            work[ti].0[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            numeric_inf = numeric_inf.max(numeric.abs());
            max_abs_diff = max_abs_diff.max((analytic[ti][ei] - numeric).abs());
        }
        let analytic_inf = analytic[ti].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let denom = analytic_inf.max(numeric_inf).max(1e-6);
        per_input.push(max_abs_diff / denom);
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
        pass: max_rel_err < tolerance,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        let r = grad_check(
            |xs| Ok(xs[0].mul(&xs[0])?.sum()),
            &[(vec![1.0, 2.0], vec![2])],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_err);
        // analytic gradient is [2, 4]
    }

    #[test]
    fn matmul_random_gradients() {
        let a: Vec<f64> = (0..12).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let b: Vec<f64> = (0..8).map(|i| ((i * 5 + 1) % 13) as f64 / 13.0 - 0.5).collect();
        let r = grad_check(
            |xs| Ok(xs[0].matmul(&xs[1])?.mul(&xs[0].matmul(&xs[1])?)?.sum()),
            &[(a, vec![3, 4]), (b, vec![4, 2])],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn layernorm_gradients() {
        let x = vec![0.3, -0.7, 1.2, 0.1];
        let r = grad_check(
            |xs| {
                let y = xs[0].layernorm_rows(&xs[1], &xs[2], 1e-5)?;
                y.weighted_sum(&[0.2, -0.5, 0.9, 0.4])
            },
            &[
                (x, vec![1, 4]),
                (vec![1.1, 0.9, 1.0, 1.2], vec![4]),
                (vec![0.0, 0.1, -0.1, 0.2], vec![4]),
            ],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn composition_follows_chain_rule() {
        // softmax after matmul, reduced with fixed weights
        let a: Vec<f64> = vec![0.4, -0.2, 0.7, 0.1, -0.5, 0.3];
        let b: Vec<f64> = vec![0.9, -0.3, 0.2, 0.8, -0.6, 0.5];
        let r = grad_check(
            |xs| {
                let y = xs[0].matmul(&xs[1])?.softmax_rows(None)?;
                y.weighted_sum(&[1.0, -2.0, 0.5, 3.0])
            },
            &[(a, vec![2, 3]), (b, vec![3, 2])],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn non_finite_is_reported() {
        let r = grad_check(
            |xs| Ok(xs[0].ln().sum()),
            &[(vec![-1.0], vec![1])],
            1e-5,
            1e-6,
        );
        assert!(matches!(r, Err(TensorError::NonFinite(_))));
    }
}
