use nalgebra::DMatrix;

use crate::nn::ConvLayer;

/// Below this penalty value the gradient is taken as zero.
const PSI_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthoVariant {
    /// `‖WᵀW − I‖_F`
    So,
    /// `‖WᵀW − I‖_F + ‖WWᵀ − I‖_F`
    Dso,
}

impl OrthoVariant {
    pub fn name(self) -> &'static str {
        match self {
            OrthoVariant::So => "so",
            OrthoVariant::Dso => "dso",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "so" => Some(OrthoVariant::So),
            "dso" => Some(OrthoVariant::Dso),
            _ => None,
        }
    }
}

/// Columns are the layer's vectorized 3D kernels: `(D·H·W) x M`.
pub fn layer_weight_matrix(layer: &ConvLayer) -> DMatrix<f64> {
    let m = layer.out_channels();
    let rows = layer.kernels.len() / m;
    DMatrix::from_column_slice(rows, m, layer.kernels.data())
}

fn gram_residual(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = w.transpose() * w;
    for i in 0..a.nrows() {
        a[(i, i)] -= 1.0;
    }
    a
}

fn outer_residual(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut b = w * w.transpose();
    for i in 0..b.nrows() {
        b[(i, i)] -= 1.0;
    }
    b
}

pub fn ortho_penalty(w: &DMatrix<f64>, variant: OrthoVariant) -> f64 {
    let so = gram_residual(w).norm();
    match variant {
        OrthoVariant::So => so,
        OrthoVariant::Dso => so + outer_residual(w).norm(),
    }
}

/// `2·W·(WᵀW − I)/ψ` (plus `2·(WWᵀ − I)·W/φ` for DSO), zero where the
/// respective norm is at its minimum.
pub fn ortho_gradient(w: &DMatrix<f64>, variant: OrthoVariant) -> DMatrix<f64> {
    let a = gram_residual(w);
    let psi = a.norm();
    let mut g = if psi > PSI_FLOOR {
        w * &a * (2.0 / psi)
    } else {
        DMatrix::zeros(w.nrows(), w.ncols())
    };
    if variant == OrthoVariant::Dso {
        let b = outer_residual(w);
        let phi = b.norm();
        if phi > PSI_FLOOR {
            g += &b * w * (2.0 / phi);
        }
    }
    g
}

/// Gradient of `(‖WᵀW − I‖_F + ‖WWᵀ − I‖_F)²`.
pub(crate) fn squared_dso_gradient(w: &DMatrix<f64>) -> DMatrix<f64> {
    ortho_gradient(w, OrthoVariant::Dso) * (2.0 * ortho_penalty(w, OrthoVariant::Dso))
}
