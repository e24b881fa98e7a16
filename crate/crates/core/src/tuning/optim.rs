use serde::{Deserialize, Serialize};

use crate::params::Params;

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut dyn Params, grad: &[f64]) {
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        params.visit_mut(&mut |s| {
            for (j, p) in s.iter_mut().enumerate() {
                let i = offset + j;
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            offset += s.len();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Vector(Vec<f64>);

    impl Params for Vector {
        fn visit(&self, f: &mut dyn FnMut(&[f64])) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Vector(vec![1.0, -1.0, 0.0]);
        let mut opt = Adam::new(0.1, 3);
        opt.step(&mut p, &[2.0, -0.5, 0.0]);
        assert!((p.0[0] - 0.9).abs() < 1e-6);
        assert!((p.0[1] + 0.9).abs() < 1e-6);
        assert_eq!(p.0[2], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Vector(vec![3.0, -2.0]);
        let mut opt = Adam::new(0.05, 2);
        for _ in 0..2000 {
            let g: Vec<f64> = p.0.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.0.iter().all(|v| v.abs() < 1e-2));
    }
}
