//! Finite-difference gradient checking, the test oracle for every
//! differentiable operation and loss in this crate.

use super::array::NdArray;
use super::graph::{Graph, TensorId};
use crate::error::Result;

/// Compares reverse-mode gradients with central finite differences.
///
/// `f` builds a scalar-valued graph from leaves placed at `point`. Returns the
/// maximum over all coordinates of `|autodiff - central| / (|central| + 1e-8)`.
pub fn grad_check<F>(f: F, point: &[NdArray], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    assert!(eps > 0.0);
    let eval = |arrays: &[NdArray]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = arrays.iter().map(|a| g.leaf(a, false)).collect();
        let loss = f(&mut g, &ids)?;
        Ok(g.scalar_value(loss))
    };

    // Reverse-mode gradients at the point.
    let mut g = Graph::new();
    let ids: Vec<TensorId> = point.iter().map(|a| g.leaf(a, true)).collect();
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;
    let autodiff: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(id).len()]))
        .collect();

    let mut worst: f64 = 0.0;
    let mut perturbed: Vec<NdArray> = point.to_vec();
    for (pi, arr) in point.iter().enumerate() {
        for ci in 0..arr.len() {
            let orig = arr.data()[ci];
            perturbed[pi].data_mut()[ci] = orig + eps;
            let up = eval(&perturbed)?;
            perturbed[pi].data_mut()[ci] = orig - eps;
            let down = eval(&perturbed)?;
            perturbed[pi].data_mut()[ci] = orig;
            let central = (up - down) / (2.0 * eps);
            let rel = (autodiff[pi][ci] - central).abs() / (central.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = grad_check(
            |g, ids| {
                let sq = g.square(ids[0]);
                Ok(g.sum_all(sq))
            },
            &[NdArray::scalar(3.0)],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn constant_function_has_exact_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&NdArray::from_vec(vec![1.0, 2.0]), true);
        let c = g.constant(NdArray::scalar(5.0));
        let _ = x;
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn sigmoid_sum_grad_at_zero_is_quarter() {
        let mut g = Graph::new();
        let x = g.leaf(&NdArray::from_vec(vec![0.0, 0.0, 0.0]), true);
        let s = g.sigmoid(x);
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        for &v in g.grad(x).unwrap() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}
