use std::fmt;
use std::str::FromStr;

use crate::net::{ClassifierParams, ParamGrads, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adagrad,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adagrad => "adagrad",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

const ADAGRAD_EPS: f64 = 1e-8;

/// SGD: `θ -= η g`. Adagrad: `G += g²; θ -= η g / √(G + 1e-8)`.
pub struct Optimizer<F> {
    kind: OptimizerKind,
    lr: F,
    accum: Vec<Vec<F>>,
}

impl<F: Real> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr: F::from_f64(lr).unwrap(),
            accum: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ClassifierParams<F>, grads: &ParamGrads<F>) {
        let grads = grads.tensors();
        let mut targets = params.trainable_mut();
        debug_assert_eq!(targets.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (theta, g) in targets.iter_mut().zip(&grads) {
                    for (t, &gi) in theta.iter_mut().zip(g.iter()) {
                        *t -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adagrad => {
                if self.accum.is_empty() {
                    self.accum = grads.iter().map(|g| vec![F::zero(); g.len()]).collect();
                }
                let eps = F::from_f64(ADAGRAD_EPS).unwrap();
                for ((theta, g), acc) in targets.iter_mut().zip(&grads).zip(&mut self.accum) {
                    for ((t, &gi), a) in theta.iter_mut().zip(g.iter()).zip(acc.iter_mut()) {
                        *a += gi * gi;
                        *t -= self.lr * gi / (*a + eps).sqrt();
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init, NetConfig};

    fn small() -> ClassifierParams<f64> {
        init(
            0,
            &NetConfig {
                widths: vec![2, 2, 1],
                dropout: 0.0,
                bn_momentum: 0.1,
            },
        )
        .unwrap()
    }

    #[test]
    fn sgd_step() {
        let mut p = small();
        let before = p.out_bias[0];
        let mut g = ParamGrads::zeros_like(&p);
        g.out_bias[0] = 2.0;
        Optimizer::new(OptimizerKind::Sgd, 0.1).step(&mut p, &g);
        assert!((p.out_bias[0] - (before - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn adagrad_first_step_is_lr_sized() {
        let mut p = small();
        let mut g = ParamGrads::zeros_like(&p);
        g.out_bias[0] = 3.0;
        let mut opt = Optimizer::new(OptimizerKind::Adagrad, 0.01);
        opt.step(&mut p, &g);
        assert!((p.out_bias[0] + 0.01).abs() < 1e-9);
        opt.step(&mut p, &g);
        // second step: 0.01 * 3 / sqrt(18)
        let expected = -0.01 - 0.01 * 3.0 / 18.0f64.sqrt();
        assert!((p.out_bias[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn parse_names() {
        assert_eq!("ADAGRAD".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adagrad);
        assert_eq!("sgd".parse::<OptimizerKind>().unwrap(), OptimizerKind::Sgd);
        assert!("adam".parse::<OptimizerKind>().is_err());
    }
}
