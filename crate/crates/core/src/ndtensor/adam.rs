//! Adam optimizer with bias correction, decoupled weight decay, and global
//! gradient-norm clipping.

use serde::{Deserialize, Serialize};

use super::array::NdArray;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // Training hyperparameters used by the desk-scale runs.
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(param_lens: &[usize], config: AdamConfig) -> Self {
        Self {
            m: param_lens.iter().map(|&l| vec![0.0; l]).collect(),
            v: param_lens.iter().map(|&l| vec![0.0; l]).collect(),
            t: 0,
            config,
        }
    }
}

/// One Adam update over a parameter list. Weight decay is decoupled: it is
/// applied directly to the parameters, not folded into the gradients.
pub fn adam_step(
    params: &mut [NdArray],
    grads: &[NdArray],
    names: &[String],
    state: &mut AdamState,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    for (idx, g) in grads.iter().enumerate() {
        if g.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NanGradient {
                name: names.get(idx).cloned().unwrap_or_else(|| format!("param[{idx}]")),
                step: state.t,
            });
        }
    }
    state.t += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let pd = p.data_mut();
        let gd = g.data();
        for i in 0..pd.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gd[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gd[i] * gd[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            pd[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * pd[i]);
        }
    }
    Ok(())
}

/// Scales all gradients by `max_norm / g` when the global L2 norm `g` exceeds
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [NdArray], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0);
    let mut sq = 0.0;
    for g in grads.iter() {
        for &x in g.data() {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut params = vec![NdArray::from_vec(vec![1.0, -2.0, 3.0])];
        let grads = vec![NdArray::from_vec(vec![0.0, 0.0, 0.0])];
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&[3], cfg);
        adam_step(&mut params, &grads, &names(1), &mut st).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // g=1, lr=0.1, b1=.9, b2=.999, eps=1e-8, t 0->1: delta ~= lr.
        let mut params = vec![NdArray::scalar(0.5)];
        let grads = vec![NdArray::scalar(1.0)];
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&[1], cfg);
        adam_step(&mut params, &grads, &names(1), &mut st).unwrap();
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_steps_reproduce_bitwise() {
        let run = || {
            let mut params = vec![NdArray::from_vec(vec![0.3, -0.7])];
            let mut st = AdamState::new(&[2], AdamConfig::default());
            for _ in 0..2 {
                let grads = vec![NdArray::from_vec(vec![0.11, -0.05])];
                adam_step(&mut params, &grads, &names(1), &mut st).unwrap();
            }
            params[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_aborts_with_diagnostic() {
        let mut params = vec![NdArray::scalar(0.0)];
        let grads = vec![NdArray::scalar(f64::NAN)];
        let mut st = AdamState::new(&[1], AdamConfig::default());
        let err = adam_step(&mut params, &grads, &["w".into()], &mut st).unwrap_err();
        assert!(err.to_string().contains("w"));
    }

    #[test]
    fn clip_scales_when_norm_exceeds_budget() {
        let mut grads = vec![
            NdArray::from_vec(vec![3.0, 4.0]), // norm 5
            NdArray::from_vec(vec![12.0]),     // total norm 13
        ];
        let norm = clip_global_norm(&mut grads, 6.5);
        assert!((norm - 13.0).abs() < 1e-12);
        assert!((grads[0].data()[0] - 1.5).abs() < 1e-12);
        assert!((grads[1].data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn clip_noop_below_budget() {
        let mut grads = vec![NdArray::from_vec(vec![0.6, 0.8])];
        let norm = clip_global_norm(&mut grads, 3.5);
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(grads[0].data(), &[0.6, 0.8]);
    }
}
