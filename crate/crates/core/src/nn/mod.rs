//! Hand-differentiated layers and a sequential classifier built from them.

mod conv;
mod gemm;
mod layers;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvLayer};
pub use layers::{
    dense_backward, dense_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward, softmax,
    softmax_xent, DenseGrads, DenseLayer,
};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        regularize: bool,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            regularize: true,
        }
    }

    pub fn pool2() -> Self {
        LayerSpec::MaxPool { window: 2, stride: 2 }
    }

    pub fn dense(outputs: usize) -> Self {
        LayerSpec::Dense { outputs }
    }
}

/// Input geometry plus an ordered layer list; the softmax cross-entropy head
/// is implied after the last layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

pub const SPEC_NAMES: [&str; 2] = ["mnist-small", "cifar-small"];

impl NetworkSpec {
    /// The named desk-scale architectures.
    pub fn named(name: &str) -> Result<Self> {
        use LayerSpec::*;
        let spec = match name {
            "mnist-small" => NetworkSpec {
                input: [1, 28, 28],
                layers: vec![
                    LayerSpec::conv(16, 5),
                    Relu,
                    LayerSpec::pool2(),
                    LayerSpec::conv(32, 5),
                    Relu,
                    LayerSpec::pool2(),
                    Flatten,
                    LayerSpec::dense(128),
                    Relu,
                    LayerSpec::dense(10),
                ],
            },
            "cifar-small" => NetworkSpec {
                input: [3, 32, 32],
                layers: vec![
                    LayerSpec::conv(32, 7),
                    Relu,
                    LayerSpec::conv(32, 5),
                    Relu,
                    LayerSpec::pool2(),
                    LayerSpec::conv(64, 5),
                    Relu,
                    LayerSpec::pool2(),
                    Flatten,
                    LayerSpec::dense(256),
                    Relu,
                    LayerSpec::dense(10),
                ],
            },
            other => {
                return Err(Error::Param(format!(
                    "unknown network spec '{other}' (known: {})",
                    SPEC_NAMES.join(", ")
                )))
            }
        };
        Ok(spec)
    }

    /// Per-sample shape after each layer; fails on incompatible neighbours.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input.to_vec();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("empty input shape {shape:?}")));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |why: String| Error::Shape(format!("layer {i}: {why}"));
            shape = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    regularize,
                } => {
                    if shape.len() != 3 {
                        return Err(fail(format!("conv needs [D, H, W] input, got {shape:?}")));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(fail("conv needs positive channels, kernel and stride".into()));
                    }
                    if regularize && kernel % 2 == 0 {
                        return Err(fail(format!("regularized kernels must be odd, got {kernel}")));
                    }
                    let dim = |n: usize| -> Result<usize> {
                        let padded = n + 2 * padding;
                        if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
                            return Err(fail(format!("extent {n} does not tile kernel {kernel} at stride {stride}")));
                        }
                        Ok((padded - kernel) / stride + 1)
                    };
                    vec![out_channels, dim(shape[1])?, dim(shape[2])?]
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool { window, stride } => {
                    if shape.len() != 3 || window == 0 || stride == 0 || shape[1] < window || shape[2] < window {
                        return Err(fail(format!("maxpool {window}/{stride} does not fit {shape:?}")));
                    }
                    vec![shape[0], (shape[1] - window) / stride + 1, (shape[2] - window) / stride + 1]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Dense { outputs } => {
                    if shape.len() != 1 {
                        return Err(fail(format!("dense needs flattened input, got {shape:?}")));
                    }
                    if outputs == 0 {
                        return Err(fail("dense needs at least one output".into()));
                    }
                    vec![outputs]
                }
            };
            shapes.push(shape.clone());
        }
        if shape.len() != 1 {
            return Err(Error::Shape(format!("network must end in class scores, ends in {shape:?}")));
        }
        Ok(shapes)
    }

    pub fn class_count(&self) -> Result<usize> {
        Ok(self.output_shapes()?.last().map(|s| s[0]).unwrap_or(0))
    }

    /// Flat numeric form: the input shape, then six values per layer
    /// (a layer code followed by its fields, zero padded).
    pub fn encode(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.input.iter().map(|&v| v as f64).collect();
        for l in &self.layers {
            let row = match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    regularize,
                } => [0, out_channels, kernel, stride, padding, usize::from(regularize)],
                LayerSpec::Relu => [1, 0, 0, 0, 0, 0],
                LayerSpec::MaxPool { window, stride } => [2, window, stride, 0, 0, 0],
                LayerSpec::Flatten => [3, 0, 0, 0, 0, 0],
                LayerSpec::Dense { outputs } => [4, outputs, 0, 0, 0, 0],
            };
            out.extend(row.iter().map(|&v| v as f64));
        }
        out
    }

    pub fn decode(values: &[f64]) -> Result<Self> {
        let bad = || Error::Format("malformed network encoding".into());
        if values.len() < 3 || !(values.len() - 3).is_multiple_of(6) {
            return Err(bad());
        }
        let ints: Vec<usize> = values
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
                    Ok(v as usize)
                } else {
                    Err(bad())
                }
            })
            .collect::<Result<_>>()?;
        let mut layers = Vec::new();
        for r in ints[3..].chunks_exact(6) {
            layers.push(match r[0] {
                0 if r[5] <= 1 => LayerSpec::Conv {
                    out_channels: r[1],
                    kernel: r[2],
                    stride: r[3],
                    padding: r[4],
                    regularize: r[5] == 1,
                },
                1 => LayerSpec::Relu,
                2 => LayerSpec::MaxPool {
                    window: r[1],
                    stride: r[2],
                },
                3 => LayerSpec::Flatten,
                4 => LayerSpec::Dense { outputs: r[1] },
                _ => return Err(bad()),
            });
        }
        let spec = NetworkSpec {
            input: [ints[0], ints[1], ints[2]],
            layers,
        };
        spec.output_shapes()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
    Dense(DenseLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    None,
    Conv { kernels: Tensor, bias: Tensor },
    Dense { weights: Tensor, bias: Tensor },
}

/// Gradients laid out like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetworkGrads {
    pub fn zeros_like(network: &Network) -> Self {
        let layers = network
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => LayerGrads::Conv {
                    kernels: Tensor::zeros(c.kernels.shape()),
                    bias: Tensor::zeros(c.bias.shape()),
                },
                Layer::Dense(d) => LayerGrads::Dense {
                    weights: Tensor::zeros(d.weights.shape()),
                    bias: Tensor::zeros(d.bias.shape()),
                },
                _ => LayerGrads::None,
            })
            .collect();
        NetworkGrads { layers }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|g| match g {
                LayerGrads::None => vec![],
                LayerGrads::Conv { kernels, bias } => vec![kernels, bias],
                LayerGrads::Dense { weights, bias } => vec![weights, bias],
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|g| match g {
                LayerGrads::None => vec![],
                LayerGrads::Conv { kernels, bias } => vec![kernels, bias],
                LayerGrads::Dense { weights, bias } => vec![weights, bias],
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &NetworkGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Mutable kernel gradient of layer `index`, if it is convolutional.
    pub fn conv_kernels_mut(&mut self, index: usize) -> Option<&mut Tensor> {
        match self.layers.get_mut(index) {
            Some(LayerGrads::Conv { kernels, .. }) => Some(kernels),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

impl Network {
    /// Fan-in scaled normal weights, zero biases. Each layer draws from its own
    /// stream derived from `(seed, layer index)`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.output_shapes()?;
        let mut input = spec.input.to_vec();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, (ls, out)) in spec.layers.iter().zip(&shapes).enumerate() {
            let mut rng = rng::stream(seed, &[0x1a7e, i as u64]);
            layers.push(match *ls {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    regularize,
                } => {
                    let d = input[0];
                    let kernels = he_normal(&[out_channels, d, kernel, kernel], d * kernel * kernel, &mut rng);
                    Layer::Conv(ConvLayer::new(kernels, Tensor::zeros(&[out_channels]), stride, padding, regularize)?)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { window, stride } => Layer::MaxPool { window, stride },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense { outputs } => {
                    let weights = he_normal(&[outputs, input[0]], input[0], &mut rng);
                    Layer::Dense(DenseLayer::new(weights, Tensor::zeros(&[outputs]))?)
                }
            });
            input = out.clone();
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
        })
    }

    /// Rebuilds a network from a spec and parameter tensors in [`Network::params`] order.
    pub fn from_params(spec: &NetworkSpec, params: Vec<Tensor>) -> Result<Self> {
        let mut net = Network::init(spec, 0)?;
        let slots = net.params_mut();
        if slots.len() != params.len() {
            return Err(Error::Shape(format!(
                "network has {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "parameter shape {:?} does not match {:?}",
                    p.shape(),
                    slot.shape()
                )));
            }
            *slot = p;
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (usize, &ConvLayer)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Conv(c) => Some((i, c)),
            _ => None,
        })
    }

    pub fn conv_layer(&self, index: usize) -> Option<&ConvLayer> {
        match self.layers.get(index) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn conv_layer_mut(&mut self, index: usize) -> Option<&mut ConvLayer> {
        match self.layers.get_mut(index) {
            Some(Layer::Conv(c)) => Some(c),
            _ => None,
        }
    }

    /// Parameter tensors with stable names, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(c) => {
                    out.push((format!("layer{i}.kernels"), &c.kernels));
                    out.push((format!("layer{i}.bias"), &c.bias));
                }
                Layer::Dense(d) => {
                    out.push((format!("layer{i}.weights"), &d.weights));
                    out.push((format!("layer{i}.bias"), &d.bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Conv(c) => vec![&mut c.kernels, &mut c.bias],
                Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        if s.len() != 4 || s[1..] != self.spec.input {
            return Err(Error::Shape(format!(
                "network expects [N, {}, {}, {}] input, got {s:?}",
                self.spec.input[0], self.spec.input[1], self.spec.input[2]
            )));
        }
        Ok(())
    }

    fn layer_forward(layer: &Layer, x: &Tensor) -> Result<Tensor> {
        match layer {
            Layer::Conv(c) => conv2d_forward(x, c),
            Layer::Relu => Ok(relu_forward(x)),
            Layer::MaxPool { window, stride } => maxpool_forward(x, *window, *stride),
            Layer::Flatten => {
                let n = x.shape()[0];
                let rest = x.item_len();
                x.clone().reshape(&[n, rest])
            }
            Layer::Dense(d) => dense_forward(x, d),
        }
    }

    /// Output of every layer for `input`; the last entry holds the logits.
    pub fn activations(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(input)?;
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = outs.last().unwrap_or(input);
            let y = Self::layer_forward(layer, x)?;
            if !y.is_finite() {
                return Err(Error::Numeric {
                    what: format!("output of layer {i}"),
                    iteration: None,
                });
            }
            outs.push(y);
        }
        Ok(outs)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.activations(input)?.pop().unwrap_or_else(|| input.clone()))
    }

    /// Backpropagates `grad_logits` given the input and the activations from
    /// [`Network::activations`].
    pub fn backward(&self, input: &Tensor, activations: &[Tensor], grad_logits: &Tensor) -> Result<NetworkGrads> {
        if activations.len() != self.layers.len() {
            return Err(Error::Shape("activation cache does not match the network".into()));
        }
        let mut grads = vec![LayerGrads::None; self.layers.len()];
        let mut grad = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            let x = if i == 0 { input } else { &activations[i - 1] };
            grad = match &self.layers[i] {
                Layer::Conv(c) => {
                    let g = conv2d_backward(&grad, x, c)?;
                    grads[i] = LayerGrads::Conv {
                        kernels: g.kernels,
                        bias: g.bias,
                    };
                    g.input
                }
                Layer::Relu => relu_backward(&grad, x)?,
                Layer::MaxPool { window, stride } => maxpool_backward(&grad, x, *window, *stride)?,
                Layer::Flatten => grad.reshape(x.shape())?,
                Layer::Dense(d) => {
                    let g = dense_backward(&grad, x, d)?;
                    grads[i] = LayerGrads::Dense {
                        weights: g.weights,
                        bias: g.bias,
                    };
                    g.input
                }
            };
        }
        Ok(NetworkGrads { layers: grads })
    }

    /// Mean cross-entropy of a batch and the gradients of that loss.
    pub fn loss_and_grads(&self, input: &Tensor, labels: &[usize]) -> Result<(f64, NetworkGrads)> {
        let acts = self.activations(input)?;
        let (loss, grad_logits) = softmax_xent(acts.last().expect("nonempty network"), labels)?;
        let grads = self.backward(input, &acts, &grad_logits)?;
        Ok((loss, grads))
    }
}
