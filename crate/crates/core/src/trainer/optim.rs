use crate::error::{Error, Result};
use crate::nn::{Network, NetworkGrads};
use crate::tensor::Tensor;

pub const RMSPROP_RHO: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    RmsProp,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rmsprop" => Some(OptimizerKind::RmsProp),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

/// `w ← w − lr·g`
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (w, g) in params.iter_mut().zip(grads) {
        *w -= lr * g;
    }
}

/// `v ← ρv + (1−ρ)g²; w ← w − lr·g/(√v + eps)`. `lr` is the already decayed rate.
pub fn rmsprop_step(params: &mut [f64], grads: &[f64], v: &mut [f64], lr: f64, rho: f64, eps: f64) {
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
        *v = rho * *v + (1.0 - rho) * g * g;
        *w -= lr * g / (v.sqrt() + eps);
    }
}

/// Optimizer state for a whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    /// Per-update decay of the RMSProp rate: `lr / (1 + decay·t)`.
    decay: f64,
    /// Running squared-gradient averages, one per parameter tensor (RMSProp only).
    mean_square: Vec<Tensor>,
    updates: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, decay: f64, network: &Network) -> Self {
        let mean_square = match kind {
            OptimizerKind::RmsProp => network.params().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer {
            kind,
            decay,
            mean_square,
            updates: 0,
        }
    }

    pub(crate) fn from_parts(kind: OptimizerKind, decay: f64, mean_square: Vec<Tensor>, updates: u64) -> Self {
        Optimizer {
            kind,
            decay,
            mean_square,
            updates,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn mean_square(&self) -> &[Tensor] {
        &self.mean_square
    }

    /// Rate applied on the next update given the scheduled rate `lr`.
    pub fn effective_lr(&self, lr: f64) -> f64 {
        match self.kind {
            OptimizerKind::RmsProp => lr / (1.0 + self.decay * self.updates as f64),
            OptimizerKind::Sgd => lr,
        }
    }

    pub fn step(&mut self, network: &mut Network, grads: &NetworkGrads, lr: f64) -> Result<()> {
        let lr_t = self.effective_lr(lr);
        let params = network.params_mut();
        let grads = grads.tensors();
        if params.len() != grads.len() {
            return Err(Error::Shape("gradients do not match the network".into()));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    sgd_step(p.data_mut(), g.data(), lr_t);
                }
            }
            OptimizerKind::RmsProp => {
                if self.mean_square.len() != params.len() {
                    return Err(Error::Shape("optimizer state does not match the network".into()));
                }
                for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.mean_square) {
                    rmsprop_step(p.data_mut(), g.data(), v.data_mut(), lr_t, RMSPROP_RHO, RMSPROP_EPS);
                }
            }
        }
        self.updates += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_scalar_recurrence() {
        let (mut w, mut v) = ([0.0], [0.0]);
        rmsprop_step(&mut w, &[1.0], &mut v, 0.001, RMSPROP_RHO, RMSPROP_EPS);
        assert!((v[0] - 0.1).abs() < 1e-15);
        let expected = -0.001 / (0.1f64.sqrt() + 1e-8);
        assert!((w[0] - expected).abs() < 1e-17);
        assert!((w[0] + 0.0031623).abs() < 1e-7);
    }

    #[test]
    fn rmsprop_zero_gradient_decays_state() {
        let (mut w, mut v) = ([2.0], [0.5]);
        rmsprop_step(&mut w, &[0.0], &mut v, 0.1, RMSPROP_RHO, RMSPROP_EPS);
        assert_eq!(w[0], 2.0);
        assert!((v[0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn sgd_arithmetic() {
        let mut w = [1.0];
        sgd_step(&mut w, &[2.0], 0.1);
        assert!((w[0] - 0.8).abs() < 1e-15);
        let mut w = [1.0];
        sgd_step(&mut w, &[2.0], 0.0);
        assert_eq!(w[0], 1.0);
        let (mut a, mut b) = ([0.0], [0.0]);
        sgd_step(&mut a, &[3.0], 0.2);
        sgd_step(&mut b, &[3.0], 0.4);
        assert!((2.0 * a[0] - b[0]).abs() < 1e-15);
    }

    #[test]
    fn rate_decays_with_updates() {
        let opt = Optimizer::from_parts(OptimizerKind::RmsProp, 0.5, vec![], 2);
        assert_eq!(opt.effective_lr(1.0), 0.5);
        let sgd = Optimizer::from_parts(OptimizerKind::Sgd, 0.5, vec![], 2);
        assert_eq!(sgd.effective_lr(1.0), 1.0);
    }
}
