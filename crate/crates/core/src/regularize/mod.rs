//! Kernel penalties: nearest-filter matching against a bank, soft
//! orthogonality, and L1/L2 weight decay. Each comes with its analytic
//! gradient laid out like the network parameters.

mod fbr;
mod ortho;

pub use fbr::{fbr_assign, fbr_gradient, fbr_penalty, match_filter, BankCache, MatchAssignment, MatchEntry};
pub use ortho::{layer_weight_matrix, ortho_gradient, ortho_penalty, OrthoVariant};

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, Layer, LayerGrads, Network, NetworkGrads};

#[derive(Debug, Clone, PartialEq)]
pub struct RegConfig {
    /// Weight of the filter-bank matching term.
    pub lambda_fbr: f64,
    /// Weight of the orthogonality term.
    pub gamma_ortho: f64,
    pub l1_coeff: f64,
    pub l2_coeff: f64,
    pub ortho_variant: OrthoVariant,
    /// Use the squared Frobenius norm for the orthogonality term.
    pub ortho_squared: bool,
    /// Only kernels strictly larger than this (in both sides) are regularized.
    pub min_regularized_kernel: usize,
    /// Multiplier applied to every bank filter before matching.
    pub bank_scale: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            lambda_fbr: 0.0,
            gamma_ortho: 0.0,
            l1_coeff: 0.0,
            l2_coeff: 0.0,
            ortho_variant: OrthoVariant::So,
            ortho_squared: false,
            min_regularized_kernel: 3,
            bank_scale: 1.0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_fbr", self.lambda_fbr),
            ("gamma_ortho", self.gamma_ortho),
            ("l1_coeff", self.l1_coeff),
            ("l2_coeff", self.l2_coeff),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Param(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.bank_scale.is_finite() && self.bank_scale > 0.0) {
            return Err(Error::Param(format!("bank_scale must be positive, got {}", self.bank_scale)));
        }
        Ok(())
    }

    /// Whether conv layer `layer` takes part in matching and orthogonality.
    pub fn selects(&self, layer: &ConvLayer) -> bool {
        layer.regularize
            && layer.kernel_height() > self.min_regularized_kernel
            && layer.kernel_width() > self.min_regularized_kernel
    }

    pub fn is_unregularized(&self) -> bool {
        self.lambda_fbr == 0.0 && self.gamma_ortho == 0.0 && self.l1_coeff == 0.0 && self.l2_coeff == 0.0
    }
}

/// Sum of per-layer orthogonality penalties over the selected layers.
pub fn network_ortho_penalty(network: &Network, config: &RegConfig) -> f64 {
    network
        .conv_layers()
        .filter(|(_, c)| config.selects(c))
        .map(|(_, c)| {
            let p = ortho_penalty(&layer_weight_matrix(c), config.ortho_variant);
            if config.ortho_squared {
                p * p
            } else {
                p
            }
        })
        .sum()
}

/// Gradient of `network_ortho_penalty`, unscaled by γ.
pub fn network_ortho_gradient(network: &Network, config: &RegConfig) -> NetworkGrads {
    let mut grads = NetworkGrads::zeros_like(network);
    for (i, c) in network.conv_layers() {
        if !config.selects(c) {
            continue;
        }
        let w = layer_weight_matrix(c);
        let g = if config.ortho_squared {
            let p = ortho_penalty(&w, config.ortho_variant);
            if config.ortho_variant == OrthoVariant::So {
                // d(ψ²) = 2ψ dψ
                ortho_gradient(&w, OrthoVariant::So) * (2.0 * p)
            } else {
                ortho::squared_dso_gradient(&w)
            }
        } else {
            ortho_gradient(&w, config.ortho_variant)
        };
        let dst = grads.conv_kernels_mut(i).expect("conv layer");
        dst.data_mut().copy_from_slice(g.as_slice());
    }
    grads
}

fn weight_tensors(network: &Network) -> impl Iterator<Item = &crate::tensor::Tensor> {
    network.layers().iter().filter_map(|l| match l {
        Layer::Conv(c) => Some(&c.kernels),
        Layer::Dense(d) => Some(&d.weights),
        _ => None,
    })
}

/// `l1·Σ|w| + l2·Σw²` over conv kernels and dense weights (biases excluded).
pub fn weight_decay_penalty(network: &Network, l1_coeff: f64, l2_coeff: f64) -> f64 {
    let (abs, sq) = weight_tensors(network).fold((0.0, 0.0), |(a, s), t| {
        (
            a + t.data().iter().map(|v| v.abs()).sum::<f64>(),
            s + t.sum_squares(),
        )
    });
    l1_coeff * abs + l2_coeff * sq
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn weight_decay_gradient(network: &Network, l1_coeff: f64, l2_coeff: f64) -> NetworkGrads {
    let mut grads = NetworkGrads::zeros_like(network);
    for (layer, g) in network.layers().iter().zip(grads.layers.iter_mut()) {
        let (w, dst) = match (layer, g) {
            (Layer::Conv(c), LayerGrads::Conv { kernels, .. }) => (&c.kernels, kernels),
            (Layer::Dense(d), LayerGrads::Dense { weights, .. }) => (&d.weights, weights),
            _ => continue,
        };
        for (gv, &wv) in dst.data_mut().iter_mut().zip(w.data()) {
            *gv = l1_coeff * sign(wv) + 2.0 * l2_coeff * wv;
        }
    }
    grads
}

/// Regularization terms evaluated at one set of weights.
#[derive(Debug, Clone)]
pub struct RegularizedLoss {
    pub total: f64,
    pub batch_loss: f64,
    /// λ-weighted matching term.
    pub fbr_term: f64,
    /// γ-weighted orthogonality term.
    pub ortho_term: f64,
    pub decay_term: f64,
    pub fbr_grads: Option<NetworkGrads>,
    pub ortho_grads: Option<NetworkGrads>,
    pub decay_grads: Option<NetworkGrads>,
    /// Present whenever a bank was supplied, even with λ = 0.
    pub assignment: Option<MatchAssignment>,
}

impl RegularizedLoss {
    /// Adds the regularization gradients to `grads` in a fixed order:
    /// matching, orthogonality, decay.
    pub fn accumulate_into(&self, grads: &mut NetworkGrads) {
        for g in [&self.fbr_grads, &self.ortho_grads, &self.decay_grads].into_iter().flatten() {
            grads.add_assign(g);
        }
    }
}

/// Batch loss plus every configured penalty, with the gradient contributions
/// and the match assignment that produced them.
pub fn total_regularized_loss(
    batch_loss: f64,
    network: &Network,
    banks: Option<&BankCache>,
    config: &RegConfig,
) -> Result<RegularizedLoss> {
    config.validate()?;
    let assignment = match banks {
        Some(b) => Some(fbr_assign(network, b, config)?),
        None if config.lambda_fbr > 0.0 => {
            return Err(Error::Param("lambda_fbr > 0 requires a filter bank".into()));
        }
        None => None,
    };

    let (fbr_term, fbr_grads) = match (&assignment, banks) {
        (Some(a), Some(b)) if config.lambda_fbr > 0.0 => (
            fbr_penalty(network, a, b, config)?,
            Some(fbr_gradient(network, a, b, config)?),
        ),
        _ => (0.0, None),
    };

    let (ortho_term, ortho_grads) = if config.gamma_ortho > 0.0 {
        let mut g = network_ortho_gradient(network, config);
        for t in g.tensors_mut() {
            t.scale(config.gamma_ortho);
        }
        (config.gamma_ortho * network_ortho_penalty(network, config), Some(g))
    } else {
        (0.0, None)
    };

    let (decay_term, decay_grads) = if config.l1_coeff > 0.0 || config.l2_coeff > 0.0 {
        (
            weight_decay_penalty(network, config.l1_coeff, config.l2_coeff),
            Some(weight_decay_gradient(network, config.l1_coeff, config.l2_coeff)),
        )
    } else {
        (0.0, None)
    };

    Ok(RegularizedLoss {
        total: batch_loss + fbr_term + ortho_term + decay_term,
        batch_loss,
        fbr_term,
        ortho_term,
        decay_term,
        fbr_grads,
        ortho_grads,
        decay_grads,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, NetworkSpec};
    use crate::tensor::Tensor;

    fn scalar_net(w: f64) -> Network {
        let spec = NetworkSpec {
            input: [1, 1, 1],
            layers: vec![LayerSpec::Conv {
                out_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
                regularize: false,
            }, LayerSpec::Flatten],
        };
        let mut net = Network::init(&spec, 0).unwrap();
        net.conv_layer_mut(0).unwrap().kernels = Tensor::filled(&[1, 1, 1, 1], w);
        net
    }

    #[test]
    fn decay_of_a_single_weight() {
        let net = scalar_net(3.0);
        assert!((weight_decay_penalty(&net, 0.0, 1e-3) - 9e-3).abs() < 1e-15);
        let g = weight_decay_gradient(&net, 0.0, 1e-3);
        assert!((g.tensors()[0].data()[0] - 6e-3).abs() < 1e-15);
    }

    #[test]
    fn decay_at_zero_weight() {
        let net = scalar_net(0.0);
        assert_eq!(weight_decay_penalty(&net, 0.5, 0.5), 0.0);
        let g = weight_decay_gradient(&net, 0.5, 0.5);
        assert_eq!(g.tensors()[0].data()[0], 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = RegConfig::default();
        assert!(c.validate().is_ok());
        c.lambda_fbr = -1.0;
        assert!(c.validate().is_err());
        c.lambda_fbr = f64::NAN;
        assert!(c.validate().is_err());
        let c = RegConfig {
            bank_scale: 0.0,
            ..RegConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn unregularized_loss_is_the_batch_loss() {
        let net = Network::init(&NetworkSpec::named("mnist-small").unwrap(), 2).unwrap();
        let r = total_regularized_loss(1.2345, &net, None, &RegConfig::default()).unwrap();
        assert_eq!(r.total, 1.2345);
        assert!(r.fbr_grads.is_none() && r.ortho_grads.is_none() && r.decay_grads.is_none());
    }

    #[test]
    fn fbr_without_bank_is_an_error() {
        let net = scalar_net(1.0);
        let c = RegConfig {
            lambda_fbr: 1.0,
            ..RegConfig::default()
        };
        assert!(total_regularized_loss(0.0, &net, None, &c).is_err());
    }
}
