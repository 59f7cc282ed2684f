//! Adam with cosine learning-rate decay over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Learning rate reached at the last step, as a fraction of `lr`.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Scenes (pretraining) or view groups (adaptation) per optimizer step.
    pub batch_size: usize,
    /// Rescale the gradient to at most this l2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            final_lr_fraction: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            batch_size: 1,
            grad_clip: None,
        }
    }
}

/// `lr * (f + (1 - f) * (1 + cos(pi * step / total)) / 2)`.
pub fn cosine_lr(cfg: &OptimConfig, step: usize, total_steps: usize) -> f64 {
    let t = if total_steps <= 1 {
        0.0
    } else {
        step.min(total_steps - 1) as f64 / (total_steps - 1) as f64
    };
    let f = cfg.final_lr_fraction;
    cfg.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, num_parameters: usize) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: vec![0.0; num_parameters],
            v: vec![0.0; num_parameters],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Scales `grad` down to l2 norm `max_norm` if it is longer; returns the original norm.
pub fn clip_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = OptimConfig::default();
        let mut adam = Adam::new(&cfg, 2);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[3.0, -0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn cosine_endpoints() {
        let cfg = OptimConfig {
            lr: 1.0,
            final_lr_fraction: 0.1,
            ..OptimConfig::default()
        };
        assert_eq!(cosine_lr(&cfg, 0, 11), 1.0);
        assert!((cosine_lr(&cfg, 5, 11) - 0.55).abs() < 1e-12);
        assert!((cosine_lr(&cfg, 10, 11) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimConfig::default();
        let mut adam = Adam::new(&cfg, 1);
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            adam.step(&mut p, &g, 0.05);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
