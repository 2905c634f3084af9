//! First-order optimizers.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn build(self, store: &ParamStore) -> Optimizer {
        Optimizer::new(self, store)
    }
}

/// Stateful optimizer. Only parameters that received a gradient are touched
/// by [`Optimizer::step`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let (first, second) = match config {
            OptimizerConfig::Sgd { .. } => (Vec::new(), Vec::new()),
            OptimizerConfig::Adam { .. } => {
                let z: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
                (z.clone(), z)
            }
        };
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for (t, g) in store.tensors_mut().iter_mut().zip(grads) {
                    if let Some(g) = g {
                        t.data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(p, d)| *p -= lr * d);
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (param, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
                    let Some(g) = g else { continue };
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((p, d), m), v) in param
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![1.0, 1.0]));
        let mut opt = OptimizerConfig::Sgd { lr: 0.5 }.build(&s);
        opt.step(&mut s, &[Some(Tensor::vector(vec![2.0, -2.0]))]);
        assert_eq!(s.tensors()[0].data(), &[0.0, 2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![0.0, 0.0]));
        s.add("untouched", Tensor::vector(vec![5.0]));
        let mut opt = OptimizerConfig::adam(0.1).build(&s);
        opt.step(&mut s, &[Some(Tensor::vector(vec![3.0, -0.01])), None]);
        let w = s.tensors()[0].data();
        assert!((w[0] + 0.1).abs() < 1e-6);
        assert!((w[1] - 0.1).abs() < 1e-4);
        assert_eq!(s.tensors()[1].data(), &[5.0]);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![4.0]));
        let mut opt = OptimizerConfig::adam(0.05).build(&s);
        for _ in 0..2000 {
            let w = s.tensors()[0].data()[0];
            opt.step(&mut s, &[Some(Tensor::vector(vec![2.0 * (w - 1.5)]))]);
        }
        assert!((s.tensors()[0].data()[0] - 1.5).abs() < 1e-3);
    }
}
