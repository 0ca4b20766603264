//! Adam with decoupled weight decay and the cosine schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Ratio between the initial and the final learning rate.
pub const LR_DECAY_FACTOR: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step preceded by decoupled decay `p -= lr·wd·p`.
pub fn adam_update(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * cfg.weight_decay * *w;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Cosine decay from `lr0` at step 0 to `lr0 / 20` at `total_steps`.
///
/// Steps past the end stay at the floor.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let lr_min = lr0 / LR_DECAY_FACTOR;
    if total_steps == 0 {
        return lr0;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut p = vec![Tensor::from_fn(&[3], |i| i as f64 - 1.0)];
        let before = p.clone();
        let g = vec![Tensor::zeros(&[3])];
        let mut s = AdamState::new(&p);
        adam_update(&mut p, &g, &mut s, 0.1, &AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let g = vec![Tensor::new(vec![3], vec![0.5, -2.0, 1e-3]).unwrap()];
        let mut p = vec![Tensor::zeros(&[3])];
        let mut s = AdamState::new(&p);
        let lr = 0.01;
        adam_update(&mut p, &g, &mut s, lr, &cfg);
        // after bias correction m̂ = g and v̂ = g², so Δ = -lr·g/(|g|+ε)
        for (w, gj) in p[0].data().iter().zip(g[0].data()) {
            let expected = -lr * gj / (gj.abs() + cfg.eps);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
    }

    #[test]
    fn pure_weight_decay_shrinks_params() {
        let cfg = AdamConfig::default();
        let mut p = vec![Tensor::new(vec![2], vec![2.0, -4.0]).unwrap()];
        let mut s = AdamState::new(&p);
        adam_update(&mut p, &[Tensor::zeros(&[2])], &mut s, 0.1, &cfg);
        assert!((p[0].data()[0] - (2.0 - 0.1 * 0.05 * 2.0)).abs() < 1e-15);
        assert!((p[0].data()[1] - (-4.0 + 0.1 * 0.05 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let lr0 = 3e-4;
        assert_eq!(cosine_lr(0, 100, lr0), lr0);
        assert!((cosine_lr(100, 100, lr0) - lr0 / 20.0).abs() < 1e-20);
        assert!((cosine_lr(50, 100, lr0) - (lr0 + lr0 / 20.0) / 2.0).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, lr0);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
