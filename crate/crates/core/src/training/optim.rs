use serde::{Deserialize, Serialize};

use crate::transformer::NamedArray;

/// Adam hyperparameters plus optional global-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: Option<f64>,
}

/// First and second moments for each parameter array, plus the number of
/// updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[NamedArray]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// One bias-corrected Adam update. Gradients are clipped first when the
/// config asks for it; the returned value is the unclipped global norm.
pub fn adam_step(
    params: &mut [NamedArray],
    grads: &mut [Vec<f64>],
    state: &mut AdamState,
    config: &AdamConfig,
) -> f64 {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter array");
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
    let norm = match config.grad_clip_norm {
        Some(c) => clip_global_norm(grads, c),
        None => global_norm(grads),
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (config.beta1, config.beta2);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.data[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(clip: Option<f64>) -> AdamConfig {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: clip,
        }
    }

    fn scalar(x: f64) -> Vec<NamedArray> {
        vec![NamedArray {
            name: "w".into(),
            shape: vec![1],
            data: vec![x],
        }]
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = scalar(0.7);
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &mut [vec![0.0]], &mut s, &cfg(Some(1.0)));
        }
        assert_eq!(p[0].data, vec![0.7]);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g², so the step is lr · g / (|g| + eps).
        let mut p = scalar(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut [vec![1.0]], &mut s, &cfg(None));
        let expect = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].data[0] - expect).abs() < 1e-18);
    }

    #[test]
    fn moments_decay_under_zero_grads() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut [vec![2.0]], &mut s, &cfg(None));
        let (m1, v1) = (s.m[0][0], s.v[0][0]);
        adam_step(&mut p, &mut [vec![0.0]], &mut s, &cfg(None));
        assert_eq!(s.m[0][0], 0.9 * m1);
        assert_eq!(s.v[0][0], 0.999 * v1);
    }

    #[test]
    fn clipping() {
        let mut small = vec![vec![0.3, 0.4]];
        assert_eq!(clip_global_norm(&mut small, 1.0), 0.5);
        assert_eq!(small, vec![vec![0.3, 0.4]]);
        let mut big = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut big, 1.0), 5.0);
        assert!((global_norm(&big) - 1.0).abs() < 1e-15);
    }
}
