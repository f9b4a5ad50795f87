//! First-order optimisers over flat parameter vectors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam { params: AdamParams, m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::adam(num_params, AdamParams::default()),
        }
    }

    pub fn adam(num_params: usize, params: AdamParams) -> Self {
        Optimizer::Adam { params, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    /// One descent step on `theta` along `grad`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(theta.len(), grad.len());
        match self {
            Optimizer::Sgd => {
                for (p, g) in theta.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { params, m, v, t } => {
                *t += 1;
                let bc1 = 1.0 - params.beta1.powi(*t as i32);
                let bc2 = 1.0 - params.beta2.powi(*t as i32);
                for i in 0..theta.len() {
                    m[i] = params.beta1 * m[i] + (1.0 - params.beta1) * grad[i];
                    v[i] = params.beta2 * v[i] + (1.0 - params.beta2) * grad[i] * grad[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    theta[i] -= lr * mhat / (vhat.sqrt() + params.eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 3);
            let mut theta = vec![1.0, -2.0, 0.5];
            opt.step(&mut theta, &[0.0; 3], 0.1);
            assert_eq!(theta, vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 2);
        let mut theta = vec![0.0, 0.0];
        opt.step(&mut theta, &[3.0, -0.01], 0.1);
        assert!((theta[0] + 0.1).abs() < 1e-6);
        assert!((theta[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 2);
        let mut theta = vec![3.0, -4.0];
        for _ in 0..5000 {
            let g: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
            opt.step(&mut theta, &g, 0.01);
        }
        assert!(theta.iter().all(|t| t.abs() < 1e-2));
    }
}
