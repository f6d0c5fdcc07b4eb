use super::gemm::{gemm, Mat};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "relu gradient {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

fn pool_geometry(input: &Tensor, window: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("maxpool expects [N, C, H, W], got {s:?}")));
    }
    if window == 0 || stride == 0 || s[2] < window || s[3] < window {
        return Err(Error::Shape(format!(
            "maxpool window {window} stride {stride} does not fit {}x{}",
            s[2], s[3]
        )));
    }
    let out_h = (s[2] - window) / stride + 1;
    let out_w = (s[3] - window) / stride + 1;
    Ok((s[0], s[1], s[2], s[3], out_h, out_w))
}

/// Flat input offset of the first maximum in each window, scanning row-major.
fn pool_argmax(input: &Tensor, window: usize, stride: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (n, c, h, w, out_h, out_w) = pool_geometry(input, window, stride)?;
    let data = input.data();
    let mut arg = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                arg.push(best);
            }
        }
    }
    Ok((arg, vec![n, c, out_h, out_w]))
}

pub fn maxpool_forward(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (arg, shape) = pool_argmax(input, window, stride)?;
    let data = arg.iter().map(|&i| input.data()[i]).collect();
    Tensor::from_vec(&shape, data)
}

pub fn maxpool_backward(grad_out: &Tensor, input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (arg, shape) = pool_argmax(input, window, stride)?;
    if grad_out.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "maxpool gradient {:?} vs output {shape:?}",
            grad_out.shape()
        )));
    }
    let mut grad = Tensor::zeros(input.shape());
    let g = grad.data_mut();
    for (&i, &v) in arg.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 2 || bias.shape() != [s[0]] {
            return Err(Error::Shape(format!(
                "dense weights {s:?} and bias {:?} disagree",
                bias.shape()
            )));
        }
        Ok(DenseLayer { weights, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let s = input.shape();
        if s.len() != 2 || s[1] != self.inputs() {
            return Err(Error::Shape(format!("dense expects [N, {}], got {s:?}", self.inputs())));
        }
        Ok(s[0])
    }
}

/// `y = x · Wᵀ + b` for `x: [N, in]`.
pub fn dense_forward(input: &Tensor, layer: &DenseLayer) -> Result<Tensor> {
    let n = layer.check_input(input)?;
    let (o, i) = (layer.outputs(), layer.inputs());
    let mut out = Tensor::zeros(&[n, o]);
    for row in out.data_mut().chunks_exact_mut(o) {
        row.copy_from_slice(layer.bias.data());
    }
    gemm(Mat::new(input.data(), n, i), Mat::t(layer.weights.data(), i, o), 1.0, out.data_mut());
    Ok(out)
}

pub fn dense_backward(grad_out: &Tensor, input: &Tensor, layer: &DenseLayer) -> Result<DenseGrads> {
    let n = layer.check_input(input)?;
    let (o, i) = (layer.outputs(), layer.inputs());
    if grad_out.shape() != [n, o] {
        return Err(Error::Shape(format!("dense gradient {:?} vs output [{n}, {o}]", grad_out.shape())));
    }
    let mut weights = Tensor::zeros(&[o, i]);
    gemm(Mat::t(grad_out.data(), o, n), Mat::new(input.data(), n, i), 0.0, weights.data_mut());
    let mut bias = Tensor::zeros(&[o]);
    for row in grad_out.data().chunks_exact(o) {
        for (b, g) in bias.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut grad_input = Tensor::zeros(&[n, i]);
    gemm(Mat::new(grad_out.data(), n, o), Mat::new(layer.weights.data(), o, i), 0.0, grad_input.data_mut());
    Ok(DenseGrads {
        input: grad_input,
        weights,
        bias,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::Shape(format!("softmax expects [N, C], got {s:?}")));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(s[1]) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood over the batch and its gradient w.r.t. the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits {s:?} do not match {} labels",
            labels.len()
        )));
    }
    let (n, c) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} outside {c} classes")));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[n, c]);
    for ((row, g), &label) in logits.data().chunks_exact(c).zip(grad.data_mut().chunks_exact_mut(c)).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_total = total.ln();
        loss += log_total - (row[label] - max);
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp() / total / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::filled(&[4, 10], 2.5);
        let (loss, grad) = softmax_xent(&logits, &[0, 3, 9, 5]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        let row_sums: Vec<f64> = grad.data().chunks(10).map(|r| r.iter().sum()).collect();
        assert!(row_sums.iter().all(|s| s.abs() < 1e-15));
    }

    #[test]
    fn softmax_xent_rejects_out_of_range_labels() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(softmax_xent(&logits, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let logits = Tensor::from_vec(&[1, 3], vec![1000.0, 1000.0, -1000.0]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        let p = softmax(&logits).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn relu_blocks_negative_inputs() {
        let x = Tensor::from_vec(&[4], vec![-1.0, 2.0, 0.0, -0.5]).unwrap();
        let g = relu_backward(&Tensor::filled(&[4], 3.0), &x).unwrap();
        assert_eq!(g.data(), &[0.0, 3.0, 0.0, 0.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_ties_go_to_lowest_index() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let g = maxpool_backward(&Tensor::filled(&[1, 1, 1, 1], 1.0), &x, 2, 2).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_forward_values() {
        let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let y = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn dense_forward_matches_manual() {
        let l = DenseLayer::new(
            Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap(),
            Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap(),
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 3], vec![1., 0., -1.]).unwrap();
        assert_eq!(dense_forward(&x, &l).unwrap().data(), &[-1.5, -2.5]);
    }
}
