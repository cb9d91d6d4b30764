//! SGD with momentum, coupled weight decay, and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch indices at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 3.5e-3,
            milestones: vec![75, 90],
            decay: 0.1,
        }
    }
}

impl SgdConfig {
    /// Default schedule with milestones at 75% and 90% of `epochs`
    /// (75 and 90 for a 100-epoch run, 15 and 18 for 20 epochs).
    pub fn for_epochs(epochs: usize) -> Self {
        Self {
            milestones: scaled_milestones(epochs),
            ..Self::default()
        }
    }
}

pub fn scaled_milestones(epochs: usize) -> Vec<usize> {
    [75, 90].iter().map(|m| (m * epochs + 50) / 100).collect()
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
    step: u64,
    epoch: usize,
}

impl OptimState {
    pub fn new(config: SgdConfig, params: &ModelParams) -> Self {
        Self {
            velocity: params.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            config,
            step: 0,
            epoch: 0,
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        let passed = self.config.milestones.iter().filter(|&&m| self.epoch >= m).count();
        self.config.lr * self.config.decay.powi(passed as i32)
    }

    /// `v ← μv + g + λ_wd·θ; θ ← θ − lr·v`.
    pub fn sgd_step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.velocity.len() || grads.iter().zip(params.iter()).any(|(g, p)| g.shape() != p.shape()) {
            return Err(Error::shape("sgd_step", "gradients not aligned with parameters"));
        }
        let lr = self.lr();
        let SgdConfig {
            momentum: mu,
            weight_decay: wd,
            ..
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NamedTensor;

    fn scalar_params(v: f64) -> ModelParams {
        ModelParams {
            tensors: vec![NamedTensor {
                name: "w".into(),
                tensor: Tensor::vector(vec![v]),
            }],
        }
    }

    fn cfg(lr: f64, momentum: f64, weight_decay: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum,
            weight_decay,
            milestones: vec![],
            decay: 0.1,
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = scalar_params(0.37);
        let mut opt = OptimState::new(cfg(0.1, 0.9, 0.0), &p);
        for _ in 0..5 {
            opt.sgd_step(&mut p, &[Tensor::vector(vec![0.0])]).unwrap();
        }
        assert_eq!(p.tensors[0].tensor.item(), 0.37);
    }

    #[test]
    fn single_step() {
        let mut p = scalar_params(1.0);
        let mut opt = OptimState::new(cfg(0.1, 0.0, 0.0), &p);
        opt.sgd_step(&mut p, &[Tensor::vector(vec![1.0])]).unwrap();
        assert!((p.tensors[0].tensor.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps() {
        let mut p = scalar_params(1.0);
        let mut opt = OptimState::new(cfg(0.1, 0.9, 0.0), &p);
        for _ in 0..2 {
            opt.sgd_step(&mut p, &[Tensor::vector(vec![1.0])]).unwrap();
        }
        assert!((p.tensors[0].tensor.item() - 0.71).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_contracts_monotonically() {
        let mut p = ModelParams {
            tensors: vec![NamedTensor {
                name: "w".into(),
                tensor: Tensor::vector(vec![1.0, -2.0, 0.5]),
            }],
        };
        let mut opt = OptimState::new(cfg(0.01, 0.9, 3.5e-3), &p);
        let mut last = p.l2_norm();
        for _ in 0..200 {
            opt.sgd_step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
            let n = p.l2_norm();
            assert!(n < last);
            last = n;
        }
    }

    #[test]
    fn misaligned_grads_rejected() {
        let mut p = scalar_params(1.0);
        let mut opt = OptimState::new(cfg(0.1, 0.0, 0.0), &p);
        assert!(opt.sgd_step(&mut p, &[Tensor::zeros(&[2])]).is_err());
        assert!(opt.sgd_step(&mut p, &[]).is_err());
    }

    #[test]
    fn schedule_milestones() {
        assert_eq!(scaled_milestones(100), vec![75, 90]);
        assert_eq!(scaled_milestones(20), vec![15, 18]);
        let p = scalar_params(0.0);
        let mut opt = OptimState::new(SgdConfig::for_epochs(20), &p);
        let lr_at = |opt: &mut OptimState, e| {
            opt.set_epoch(e);
            opt.lr()
        };
        assert_eq!(lr_at(&mut opt, 14), 0.01);
        assert!((lr_at(&mut opt, 15) - 1e-3).abs() < 1e-18);
        assert!((lr_at(&mut opt, 19) - 1e-4).abs() < 1e-18);
    }
}
