#![allow(dead_code)]

use fbr_core::dataio::{synthetic_dataset, LabeledDataset};
use fbr_core::filterbank::FilterBank;
use fbr_core::filterbank::union_bank;
use fbr_core::nn::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, softmax_xent, ConvLayer, DenseLayer, LayerSpec, Network, NetworkSpec,
};
use fbr_core::regularize::{
    fbr_assign, fbr_gradient, network_ortho_gradient, network_ortho_penalty, ortho_gradient,
    ortho_penalty, BankCache, MatchAssignment, OrthoVariant, RegConfig,
};
use nalgebra::DMatrix;
use fbr_core::rng;
use fbr_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

pub fn normal_vec(n: usize, r: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

pub fn normal_tensor(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::from_vec(shape, normal_vec(shape.iter().product(), r)).unwrap()
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let v = probe.data()[i];
            probe.data_mut()[i] = v + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = v - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = v;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest entry-wise deviation relative to the largest gradient magnitude.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative error over conv input, kernel and bias gradients of the
/// scalar `Σ r ⊙ conv(x)` for one random geometry.
pub fn conv_case(seed: u64) -> f64 {
    let mut r = rng::stream(seed, &[0xc0]);
    let (n, d, m) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=3));
    let stride = r.random_range(1..=2);
    let padding = r.random_range(0..=1);
    let (h, w) = (r.random_range(kh..=kh + 4), r.random_range(kw..=kw + 4));
    let (h, w) = (h + (h + 2 * padding - kh) % stride, w + (w + 2 * padding - kw) % stride);
    let x = normal_tensor(&[n, d, h, w], &mut r);
    let layer = ConvLayer::new(normal_tensor(&[m, d, kh, kw], &mut r), normal_tensor(&[m], &mut r), stride, padding, false)
        .unwrap();
    let out = conv2d_forward(&x, &layer).unwrap();
    let weights = normal_tensor(out.shape(), &mut r);
    let g = conv2d_backward(&weights, &x, &layer).unwrap();

    let gx = numeric_grad(&x, |xp| dot(conv2d_forward(xp, &layer).unwrap().data(), weights.data()));
    let gk = numeric_grad(&layer.kernels, |kp| {
        let l = ConvLayer { kernels: kp.clone(), ..layer.clone() };
        dot(conv2d_forward(&x, &l).unwrap().data(), weights.data())
    });
    let gb = numeric_grad(&layer.bias, |bp| {
        let l = ConvLayer { bias: bp.clone(), ..layer.clone() };
        dot(conv2d_forward(&x, &l).unwrap().data(), weights.data())
    });
    relative_error(g.input.data(), &gx)
        .max(relative_error(g.kernels.data(), &gk))
        .max(relative_error(g.bias.data(), &gb))
}

pub fn dense_case(seed: u64) -> f64 {
    let mut r = rng::stream(seed, &[0xde]);
    let (n, i, o) = (r.random_range(1..=3), r.random_range(1..=6), r.random_range(1..=6));
    let x = normal_tensor(&[n, i], &mut r);
    let layer = DenseLayer::new(normal_tensor(&[o, i], &mut r), normal_tensor(&[o], &mut r)).unwrap();
    let weights = normal_tensor(&[n, o], &mut r);
    let g = dense_backward(&weights, &x, &layer).unwrap();
    let loss = |x: &Tensor, l: &DenseLayer| dot(dense_forward(x, l).unwrap().data(), weights.data());
    let gx = numeric_grad(&x, |xp| loss(xp, &layer));
    let gw = numeric_grad(&layer.weights, |wp| loss(&x, &DenseLayer { weights: wp.clone(), ..layer.clone() }));
    let gb = numeric_grad(&layer.bias, |bp| loss(&x, &DenseLayer { bias: bp.clone(), ..layer.clone() }));
    relative_error(g.input.data(), &gx)
        .max(relative_error(g.weights.data(), &gw))
        .max(relative_error(g.bias.data(), &gb))
}

/// Inputs are kept at least 1e-3 away from the kink.
pub fn relu_case(seed: u64) -> f64 {
    let mut r = rng::stream(seed, &[0x7e1]);
    let shape = [r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4)];
    let mut x = normal_tensor(&shape, &mut r);
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v += 2e-3f64.copysign(*v);
        }
    }
    let weights = normal_tensor(&shape, &mut r);
    let g = relu_backward(&weights, &x).unwrap();
    let gx = numeric_grad(&x, |xp| dot(relu_forward(xp).data(), weights.data()));
    relative_error(g.data(), &gx)
}

/// Inputs are a shuffled grid with spacing 1e-2 so no window has a near tie.
pub fn maxpool_case(seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let mut r = rng::stream(seed, &[0x9001]);
    let window = r.random_range(1..=3);
    let stride = r.random_range(1..=window);
    let outs = (r.random_range(1..=3), r.random_range(1..=3));
    let (h, w) = ((outs.0 - 1) * stride + window, (outs.1 - 1) * stride + window);
    let shape = [r.random_range(1..=2), r.random_range(1..=2), h, w];
    let count: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..count).map(|i| i as f64 * 1e-2 - 0.3).collect();
    values.shuffle(&mut r);
    let x = Tensor::from_vec(&shape, values).unwrap();
    let out = maxpool_forward(&x, window, stride).unwrap();
    let weights = normal_tensor(out.shape(), &mut r);
    let g = maxpool_backward(&weights, &x, window, stride).unwrap();
    let gx = numeric_grad(&x, |xp| dot(maxpool_forward(xp, window, stride).unwrap().data(), weights.data()));
    relative_error(g.data(), &gx)
}

pub fn softmax_case(seed: u64) -> f64 {
    let mut r = rng::stream(seed, &[0x50f]);
    let (n, c) = (r.random_range(1..=4), r.random_range(2..=6));
    let logits = normal_tensor(&[n, c], &mut r);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let (_, g) = softmax_xent(&logits, &labels).unwrap();
    let gl = numeric_grad(&logits, |lp| softmax_xent(lp, &labels).unwrap().0);
    relative_error(g.data(), &gl)
}

/// FBR gradient against differences of the frozen-assignment penalty over
/// every kernel entry of a small network.
pub fn fbr_case(seed: u64) -> f64 {
    let spec = NetworkSpec {
        input: [2, 9, 9],
        layers: vec![LayerSpec::conv(3, 5), LayerSpec::Relu, LayerSpec::conv(2, 5), LayerSpec::Flatten],
    };
    let net = Network::init(&spec, seed).unwrap();
    let mut r = rng::stream(seed, &[0xfb]);
    let config = RegConfig {
        lambda_fbr: r.random_range(0.1..2.0),
        bank_scale: r.random_range(0.5..1.5),
        ..RegConfig::default()
    };
    let bank = union_bank(5, 5).unwrap();
    let cache = BankCache::for_network(bank.clone(), &net, &config).unwrap();
    let assignment = fbr_assign(&net, &cache, &config).unwrap();
    let analytic = fbr_gradient(&net, &assignment, &cache, &config).unwrap();
    let mut worst = 0.0f64;
    for (layer, _) in net.conv_layers() {
        let kernels = net.conv_layer(layer).unwrap().kernels.clone();
        let numeric = numeric_grad(&kernels, |kp| {
            let mut probe = net.clone();
            probe.conv_layer_mut(layer).unwrap().kernels = kp.clone();
            frozen_penalty(&probe, &assignment, &bank, config.lambda_fbr, config.bank_scale)
        });
        let a = match &analytic.layers[layer] {
            fbr_core::nn::LayerGrads::Conv { kernels, .. } => kernels.data().to_vec(),
            _ => unreachable!(),
        };
        worst = worst.max(relative_error(&a, &numeric));
    }
    worst
}

/// SO and DSO gradients of a random (rows x cols) matrix, plain and squared.
pub fn ortho_case(seed: u64) -> f64 {
    let mut r = rng::stream(seed, &[0x0c7]);
    let (rows, cols) = (r.random_range(2..=7), r.random_range(2..=5));
    let w = DMatrix::from_vec(rows, cols, normal_vec(rows * cols, &mut r));
    let flat = Tensor::from_vec(&[rows * cols], w.as_slice().to_vec()).unwrap();
    let mut worst = 0.0f64;
    for variant in [OrthoVariant::So, OrthoVariant::Dso] {
        let analytic = ortho_gradient(&w, variant);
        let numeric = numeric_grad(&flat, |p| ortho_penalty(&DMatrix::from_vec(rows, cols, p.data().to_vec()), variant));
        worst = worst.max(relative_error(analytic.as_slice(), &numeric));
    }
    // the network-level squared variants, through a conv layer
    let spec = NetworkSpec {
        input: [2, 5, 5],
        layers: vec![LayerSpec::conv(3, 5), LayerSpec::Flatten],
    };
    let net = Network::init(&spec, seed).unwrap();
    for variant in [OrthoVariant::So, OrthoVariant::Dso] {
        let config = RegConfig {
            ortho_variant: variant,
            ortho_squared: true,
            ..RegConfig::default()
        };
        let g = network_ortho_gradient(&net, &config);
        let kernels = net.conv_layer(0).unwrap().kernels.clone();
        let numeric = numeric_grad(&kernels, |kp| {
            let mut probe = net.clone();
            probe.conv_layer_mut(0).unwrap().kernels = kp.clone();
            network_ortho_penalty(&probe, &config)
        });
        worst = worst.max(relative_error(g.tensors()[0].data(), &numeric));
    }
    worst
}

/// Whole-network cross-entropy gradient on a small classifier.
pub fn network_case(seed: u64) -> f64 {
    let net = Network::init(&small_spec(), seed).unwrap();
    let data = small_data(3, seed);
    let (_, grads) = net.loss_and_grads(&data.images, &data.labels).unwrap();
    let mut worst = 0.0f64;
    for (i, p) in net.params().iter().enumerate() {
        let numeric = numeric_grad(p, |pp| {
            let mut probe = net.clone();
            *probe.params_mut()[i] = pp.clone();
            let logits = probe.forward(&data.images).unwrap();
            softmax_xent(&logits, &data.labels).unwrap().0
        });
        worst = worst.max(relative_error(grads.tensors()[i].data(), &numeric));
    }
    worst
}

/// Frozen-assignment penalty computed directly from the definition.
pub fn frozen_penalty(net: &Network, assignment: &MatchAssignment, bank: &FilterBank, lambda: f64, scale: f64) -> f64 {
    let mut total = 0.0;
    for e in &assignment.entries {
        let conv = net.conv_layer(e.layer).unwrap();
        let (h, w) = (conv.kernel_height(), conv.kernel_width());
        let d = conv.in_channels();
        let f = bank.filters()[e.bank_index].coefficients();
        for y in 0..h {
            for x in 0..w {
                let k = conv.kernels.data()[((e.kernel * d + e.channel) * h + y) * w + x];
                total += (k - scale * f[y * w + x]).powi(2);
            }
        }
    }
    lambda * total
}

/// Exhaustive nearest-member search written independently of the library.
pub fn brute_force_match(slice: &[f64], bank: &FilterBank, scale: f64) -> (usize, f64) {
    let mut best_index = usize::MAX;
    let mut best = f64::INFINITY;
    for index in 0..bank.len() {
        let coeffs = bank.filters()[index].coefficients();
        let mut sum = 0.0;
        for j in 0..slice.len() {
            let diff = scale * coeffs[j] - slice[j];
            sum += diff * diff;
        }
        if best_index == usize::MAX || sum < best {
            best_index = index;
            best = sum;
        }
    }
    (best_index, best.sqrt())
}

/// A 5x5 convolution (selected under the default size rule) and a 3x3 one
/// (not selected) feeding a small classifier on 12x12 inputs.
pub fn small_spec() -> NetworkSpec {
    NetworkSpec {
        input: [1, 12, 12],
        layers: vec![
            LayerSpec::conv(3, 5),
            LayerSpec::Relu,
            LayerSpec::pool2(),
            LayerSpec::conv(4, 3),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::dense(10),
        ],
    }
}

pub fn small_data(n: usize, seed: u64) -> LabeledDataset {
    synthetic_dataset(n, 10, [1, 12, 12], 0.3, seed).unwrap()
}

pub fn mnist_like_data(n: usize, seed: u64) -> LabeledDataset {
    synthetic_dataset(n, 10, [1, 28, 28], 0.6, seed).unwrap()
}
