//! Flat-vector optimizers: bias-corrected Adam and SGD with momentum. Both
//! run with momentum/beta1 = 0.56 by default to mirror the training recipe.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    },
    SgdMomentum {
        momentum: f64,
        velocity: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: momentum,
                beta2: 0.999,
                eps: 1e-8,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            },
            OptimizerKind::SgdMomentum => Optimizer::SgdMomentum {
                momentum,
                velocity: vec![0.0; n_params],
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        match self {
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grads[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grads[i] * grads[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
            Optimizer::SgdMomentum { momentum, velocity } => {
                for i in 0..params.len() {
                    velocity[i] = *momentum * velocity[i] + grads[i];
                    params[i] -= lr * velocity[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_noop() {
        for kind in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
            let mut opt = Optimizer::new(kind, 3, 0.56);
            let mut p = vec![1.0, -2.0, 0.5];
            let before = p.clone();
            opt.step(&mut p, &[0.3, -0.1, 4.0], 0.0);
            assert_eq!(p, before);
        }
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 1, 0.5);
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0], 0.1);
        assert!((p[0] - -0.1).abs() < 1e-15);
        opt.step(&mut p, &[1.0], 0.1);
        // velocity = 0.5 * 1 + 1 = 1.5
        assert!((p[0] - -0.25).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // bias correction makes the first update ~lr * sign(grad)
        let mut opt = Optimizer::new(OptimizerKind::Adam, 2, 0.56);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.2], 0.01);
        assert!((p[0] - -0.01).abs() < 1e-6);
        assert!((p[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn descends_quadratic() {
        for kind in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
            let mut opt = Optimizer::new(kind, 1, 0.56);
            let mut p = vec![3.0];
            for _ in 0..200 {
                let g = 2.0 * p[0];
                opt.step(&mut p, &[g], 0.05);
            }
            assert!(p[0].abs() < 0.5, "{kind:?} ended at {}", p[0]);
        }
    }
}
