//! 2D cross-correlation lowered to GEMM through im2col.

use super::gemm::{gemm, Mat};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[M, D, H, W]`: M kernels over D input channels.
    pub kernels: Tensor,
    /// One bias per kernel.
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    /// Eligible for filter-bank matching.
    pub regularize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    in_h: usize,
    in_w: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

impl ConvLayer {
    pub fn new(kernels: Tensor, bias: Tensor, stride: usize, padding: usize, regularize: bool) -> Result<Self> {
        let s = kernels.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::Shape(format!("conv kernels must be [M, D, H, W] with M ≥ 1, got {s:?}")));
        }
        if bias.shape() != [s[0]] {
            return Err(Error::Shape(format!("conv bias {:?} does not match {} kernels", bias.shape(), s[0])));
        }
        if stride == 0 {
            return Err(Error::Shape("conv stride must be positive".into()));
        }
        if regularize && (s[2].is_multiple_of(2) || s[3].is_multiple_of(2)) {
            return Err(Error::Shape(format!(
                "regularized kernels must have odd spatial size, got {}x{}",
                s[2], s[3]
            )));
        }
        Ok(ConvLayer { kernels, bias, stride, padding, regularize })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_height(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn kernel_width(&self) -> usize {
        self.kernels.shape()[3]
    }

    /// Output spatial size for an input of `in_h x in_w`.
    pub fn output_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        let dim = |n: usize, k: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < k || !(padded - k).is_multiple_of(self.stride) {
                return Err(Error::Shape(format!(
                    "input extent {n} with padding {} and stride {} does not tile kernel extent {k}",
                    self.padding, self.stride
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((dim(in_h, self.kernel_height())?, dim(in_w, self.kernel_width())?))
    }

    fn geometry(&self, input: &Tensor) -> Result<(usize, Geometry)> {
        let s = input.shape();
        if s.len() != 4 || s[1] != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects [N, {}, H, W] input, got {s:?}",
                self.in_channels()
            )));
        }
        let (out_h, out_w) = self.output_size(s[2], s[3])?;
        Ok((
            s[0],
            Geometry {
                channels: s[1],
                in_h: s[2],
                in_w: s[3],
                k_h: self.kernel_height(),
                k_w: self.kernel_width(),
                out_h,
                out_w,
                stride: self.stride,
                pad: self.padding,
            },
        ))
    }
}

fn im2col(image: &[f64], g: &Geometry, cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.channels {
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y as usize >= g.in_h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &image[(c * g.in_h + y as usize) * g.in_w..][..g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if x < 0 || x as usize >= g.in_w { 0.0 } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, image: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.channels {
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.in_h {
                        continue;
                    }
                    let dst = &mut image[(c * g.in_h + y as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && (x as usize) < g.in_w {
                            dst[x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation plus bias: `[N, D, H, W] -> [N, M, H', W']`.
pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let (n, g) = layer.geometry(input)?;
    let m = layer.out_channels();
    let (k, p) = (g.patch_len(), g.positions());
    let mut out = Tensor::zeros(&[n, m, g.out_h, g.out_w]);
    let mut cols = vec![0.0; k * p];
    for i in 0..n {
        im2col(input.item(i), &g, &mut cols);
        let dst = out.item_mut(i);
        for (row, &b) in dst.chunks_exact_mut(p).zip(layer.bias.data()) {
            row.fill(b);
        }
        gemm(Mat::new(layer.kernels.data(), m, k), Mat::new(&cols, k, p), 1.0, dst);
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to its input, kernels and bias.
pub fn conv2d_backward(grad_out: &Tensor, input: &Tensor, layer: &ConvLayer) -> Result<ConvGrads> {
    let (n, g) = layer.geometry(input)?;
    let m = layer.out_channels();
    if grad_out.shape() != [n, m, g.out_h, g.out_w] {
        return Err(Error::Shape(format!(
            "conv gradient {:?} does not match output [{n}, {m}, {}, {}]",
            grad_out.shape(),
            g.out_h,
            g.out_w
        )));
    }
    let (k, p) = (g.patch_len(), g.positions());
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_kernels = Tensor::zeros(layer.kernels.shape());
    let mut grad_bias = Tensor::zeros(&[m]);
    let mut cols = vec![0.0; k * p];
    let mut grad_cols = vec![0.0; k * p];
    for i in 0..n {
        let gout = grad_out.item(i);
        im2col(input.item(i), &g, &mut cols);
        gemm(Mat::new(gout, m, p), Mat::t(&cols, p, k), 1.0, grad_kernels.data_mut());
        for (b, row) in grad_bias.data_mut().iter_mut().zip(gout.chunks_exact(p)) {
            *b += row.iter().sum::<f64>();
        }
        gemm(Mat::t(layer.kernels.data(), k, m), Mat::new(gout, m, p), 0.0, &mut grad_cols);
        col2im(&grad_cols, &g, grad_input.item_mut(i));
    }
    Ok(ConvGrads {
        input: grad_input,
        kernels: grad_kernels,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(kernels: Tensor, padding: usize) -> ConvLayer {
        let m = kernels.shape()[0];
        ConvLayer::new(kernels, Tensor::zeros(&[m]), 1, padding, false).unwrap()
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let input = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let l = layer(Tensor::filled(&[1, 1, 1, 1], 1.0), 0);
        assert_eq!(conv2d_forward(&input, &l).unwrap(), input);
    }

    #[test]
    fn centered_delta_with_same_padding_is_identity() {
        let input = Tensor::from_vec(&[1, 1, 4, 5], (0..20).map(|v| f64::from(v) * 0.5 - 3.0).collect()).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        assert_eq!(conv2d_forward(&input, &layer(k, 1)).unwrap(), input);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let input = Tensor::filled(&[2, 2, 5, 5], 0.3);
        let l = layer(Tensor::filled(&[3, 2, 3, 3], 0.1), 0);
        let g = conv2d_backward(&Tensor::zeros(&[2, 3, 3, 3]), &input, &l).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.kernels.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_output_kernel_gradient_is_the_patch() {
        let input = Tensor::from_vec(&[1, 2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        let l = layer(Tensor::filled(&[1, 2, 3, 3], 0.5), 0);
        let grad = Tensor::filled(&[1, 1, 1, 1], 2.5);
        let g = conv2d_backward(&grad, &input, &l).unwrap();
        let expected: Vec<f64> = input.data().iter().map(|v| v * 2.5).collect();
        assert_eq!(g.kernels.data(), expected.as_slice());
        assert_eq!(g.bias.data(), &[2.5]);
    }

    #[test]
    fn strided_padded_shapes() {
        let l = ConvLayer::new(Tensor::zeros(&[4, 3, 3, 3]), Tensor::zeros(&[4]), 2, 1, false).unwrap();
        let out = conv2d_forward(&Tensor::zeros(&[2, 3, 7, 7]), &l).unwrap();
        assert_eq!(out.shape(), &[2, 4, 4, 4]);
        assert!(conv2d_forward(&Tensor::zeros(&[2, 3, 6, 6]), &l).is_err());
        assert!(conv2d_forward(&Tensor::zeros(&[2, 2, 7, 7]), &l).is_err());
    }

    #[test]
    fn regularized_kernels_must_be_odd() {
        assert!(ConvLayer::new(Tensor::zeros(&[1, 1, 4, 4]), Tensor::zeros(&[1]), 1, 0, true).is_err());
        assert!(ConvLayer::new(Tensor::zeros(&[1, 1, 4, 4]), Tensor::zeros(&[1]), 1, 0, false).is_ok());
    }
}
