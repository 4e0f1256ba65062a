//! First-order updaters over flat parameter vectors.

use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => num_params,
        };
        Ok(Self {
            kind,
            lr,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr, 0)
    }

    pub fn adam(lr: f64, num_params: usize) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr, num_params)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradient entries",
                params.len(),
                grad.len()
            )));
        }
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grad, self.lr),
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(Error::Shape(format!(
                        "Adam moments sized for {} parameters, got {}",
                        self.m.len(),
                        params.len()
                    )));
                }
                self.adam_step(params, grad);
            }
        }
        self.t += 1;
        Ok(())
    }

    fn adam_step(&mut self, params: &mut [f64], grad: &[f64]) {
        let t = (self.t + 1) as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// `θ ← θ - lr * g`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, &g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0, -3.0];
        OptimizerState::sgd(0.1)
            .unwrap()
            .step(&mut p, &[0.0, 0.0])
            .unwrap();
        assert_eq!(p, vec![1.0, -3.0]);

        let mut p = vec![1.0];
        OptimizerState::sgd(0.1)
            .unwrap()
            .step(&mut p, &[2.0])
            .unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);

        let mut once = vec![0.7, 0.2];
        let mut twice = once.clone();
        let g = [0.5, -1.25];
        sgd_step(&mut once, &g, 0.25);
        sgd_step(&mut twice, &g, 0.125);
        sgd_step(&mut twice, &g, 0.125);
        assert!(once.iter().zip(&twice).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut p = vec![0.0; 3];
        assert!(OptimizerState::sgd(0.1)
            .unwrap()
            .step(&mut p, &[1.0])
            .is_err());
        assert!(OptimizerState::adam(0.1, 2)
            .unwrap()
            .step(&mut p, &[1.0; 3])
            .is_err());
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        assert!(OptimizerState::sgd(0.0).is_err());
        assert!(OptimizerState::adam(-1.0, 3).is_err());
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![0.3, -0.1];
        let mut opt = OptimizerState::adam(0.01, 2).unwrap();
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.3, -0.1]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        for g in [1e-3, 0.5, 250.0] {
            let mut p = vec![0.0];
            OptimizerState::adam(0.01, 1)
                .unwrap()
                .step(&mut p, &[g])
                .unwrap();
            // |Δθ| = lr * g / (g + eps)
            assert!((p[0] + 0.01 * g / (g + ADAM_EPS)).abs() < 1e-15);
            assert!((p[0].abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_matches_scalar_reference_on_quadratic() {
        // Scalar Adam written out independently, minimizing θ².
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let (mut theta, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=100 {
            let g = 2.0 * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            expected.push(theta);
        }
        let mut p = vec![1.5];
        let mut opt = OptimizerState::adam(lr, 1).unwrap();
        for want in expected {
            let g = [2.0 * p[0]];
            opt.step(&mut p, &g).unwrap();
            assert!((p[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut p = vec![0.1, 0.2, 0.3];
            let mut opt = OptimizerState::adam(1e-2, 3).unwrap();
            for i in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| x * (i as f64) - 0.3).collect();
                opt.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
