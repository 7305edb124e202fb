//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::graph::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Mat,
    pub v: Mat,
}

impl Moments {
    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            m: Mat::zeros(shape),
            v: Mat::zeros(shape),
        }
    }
}

/// Applies one update to `param`. `t` is the 1-based step count.
pub fn adam_update(cfg: &AdamConfig, t: u64, param: &mut Mat, grad: &Mat, state: &mut Moments) {
    let b1t = 1.0 - cfg.beta1.powi(t as i32);
    let b2t = 1.0 - cfg.beta2.powi(t as i32);
    ndarray::Zip::from(param)
        .and(grad)
        .and(&mut state.m)
        .and(&mut state.v)
        .for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / b1t;
            let vhat = *v / b2t;
            *p -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = array![[1.0, -1.0]];
        let g = array![[0.5, -2.0]];
        let mut s = Moments::zeros((1, 2));
        adam_update(&cfg, 1, &mut p, &g, &mut s);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig::with_lr(0.05);
        let mut p = array![[3.0]];
        let mut s = Moments::zeros((1, 1));
        for t in 1..=500 {
            let g = &p * 2.0;
            adam_update(&cfg, t, &mut p, &g, &mut s);
        }
        assert!(p[[0, 0]].abs() < 1e-2);
    }
}
