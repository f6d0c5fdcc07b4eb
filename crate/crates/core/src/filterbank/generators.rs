use std::f64::consts::{PI, SQRT_2};

use super::{check_odd, normalize_filter, Family, Filter, FilterBank};
use crate::error::{Error, Result};

/// Orientation count of the Leung–Malik derivative filters.
pub const LM_ORIENTATIONS: usize = 6;
/// Along-axis sigmas of the Leung–Malik derivative filters (cross-axis is 3x).
pub const LM_DERIV_SCALES: [f64; 3] = [SQRT_2, 2.0, 2.0 * SQRT_2];
pub const LM_LOG_SCALES: [f64; 8] = [
    SQRT_2,
    2.0,
    2.0 * SQRT_2,
    4.0,
    3.0 * SQRT_2,
    6.0,
    6.0 * SQRT_2,
    12.0,
];
pub const LM_GAUSSIAN_SCALES: [f64; 4] = [SQRT_2, 2.0, 2.0 * SQRT_2, 4.0];
const LM_ELONGATION: f64 = 3.0;

/// Parameters of the real part of a Gabor function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaborParams {
    wavelength: f64,
    orientation: f64,
    phase: f64,
    envelope_sigma: f64,
    aspect: f64,
}

impl GaborParams {
    /// Validates the parameters and folds the orientation into `[0, π)`.
    ///
    /// Folding by an odd multiple of π mirrors the carrier, so the phase is
    /// negated to keep the sampled filter unchanged.
    pub fn new(wavelength: f64, orientation: f64, phase: f64, envelope_sigma: f64, aspect: f64) -> Result<Self> {
        for (name, v) in [
            ("wavelength", wavelength),
            ("envelope sigma", envelope_sigma),
            ("aspect", aspect),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("gabor {name} must be positive, got {v}")));
            }
        }
        if !orientation.is_finite() || !phase.is_finite() {
            return Err(Error::Param("gabor orientation and phase must be finite".into()));
        }
        let turns = (orientation / PI).floor();
        let mut folded = orientation - turns * PI;
        if !(0.0..PI).contains(&folded) {
            folded = 0.0;
        }
        let phase = if turns.rem_euclid(2.0) == 1.0 { -phase } else { phase };
        Ok(GaborParams {
            wavelength,
            orientation: folded,
            phase,
            envelope_sigma,
            aspect,
        })
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn orientation(&self) -> f64 {
        self.orientation
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }

    pub fn envelope_sigma(&self) -> f64 {
        self.envelope_sigma
    }

    pub fn aspect(&self) -> f64 {
        self.aspect
    }
}

/// Samples `f(x, y)` on the centered odd grid, rows top to bottom.
fn sample_grid(width: usize, height: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let cx = (width / 2) as isize;
    let cy = (height / 2) as isize;
    let mut out = Vec::with_capacity(width * height);
    for row in 0..height as isize {
        for col in 0..width as isize {
            out.push(f((col - cx) as f64, (row - cy) as f64));
        }
    }
    out
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Param(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

fn flag_undersized(filter: Filter, largest_sigma: f64) -> Filter {
    let half = (filter.width().min(filter.height()) / 2) as f64;
    if 3.0 * largest_sigma > half {
        filter.with_param("undersized", 1.0)
    } else {
        filter
    }
}

/// Raw real-part Gabor samples; the center equals `cos(phase)`.
pub fn gabor_filter(params: &GaborParams, width: usize, height: usize) -> Result<Filter> {
    check_odd(width, height)?;
    let (sin_t, cos_t) = params.orientation.sin_cos();
    let two_sigma_sq = 2.0 * params.envelope_sigma * params.envelope_sigma;
    let aspect_sq = params.aspect * params.aspect;
    let coefficients = sample_grid(width, height, |x, y| {
        let xr = x * cos_t + y * sin_t;
        let yr = -x * sin_t + y * cos_t;
        (-(xr * xr + aspect_sq * yr * yr) / two_sigma_sq).exp()
            * (2.0 * PI * xr / params.wavelength + params.phase).cos()
    });
    Ok(Filter::new(width, height, coefficients, Family::Gabor)?
        .with_param("wavelength", params.wavelength)
        .with_param("orientation", params.orientation)
        .with_param("phase", params.phase)
        .with_param("sigma", params.envelope_sigma)
        .with_param("aspect", params.aspect))
}

/// Geometric frequency grid from 0.05 to 0.35 cycles/pixel.
pub fn default_gabor_frequencies(count: usize) -> Vec<f64> {
    const LOW: f64 = 0.05;
    const HIGH: f64 = 0.35;
    match count {
        0 => Vec::new(),
        1 => vec![(LOW * HIGH).sqrt()],
        n => (0..n)
            .map(|i| LOW * (HIGH / LOW).powf(i as f64 / (n - 1) as f64))
            .collect(),
    }
}

/// Finalized Gabor bank, orientation-major then frequency, with σ = λ = 1/f.
pub fn build_gabor_bank(orientations: usize, frequencies: &[f64], width: usize, height: usize) -> Result<FilterBank> {
    if orientations == 0 {
        return Err(Error::Param("gabor bank needs at least one orientation".into()));
    }
    if frequencies.is_empty() {
        return Err(Error::Param("gabor bank needs at least one frequency".into()));
    }
    if let Some(f) = frequencies.iter().find(|&&f| !(f > 0.0 && f <= 0.5)) {
        return Err(Error::Param(format!("gabor frequency {f} outside (0, 0.5]")));
    }
    check_odd(width, height)?;
    let mut filters = Vec::with_capacity(orientations * frequencies.len());
    for i in 0..orientations {
        let theta = i as f64 * PI / orientations as f64;
        for &f in frequencies {
            let params = GaborParams::new(1.0 / f, theta, 0.0, 1.0 / f, 1.0)?;
            let raw = gabor_filter(&params, width, height)?.with_param("frequency", f);
            filters.push(normalize_filter(&raw)?);
        }
    }
    FilterBank::new(filters)
}

/// Raw first or second directional derivative of an elongated Gaussian.
///
/// The derivative axis points along `orientation`; the cross axis uses
/// `elongation * sigma`.
pub fn gaussian_derivative_filter(
    order: u32,
    orientation: f64,
    sigma: f64,
    elongation: f64,
    width: usize,
    height: usize,
) -> Result<Filter> {
    if order != 1 && order != 2 {
        return Err(Error::Param(format!("derivative order must be 1 or 2, got {order}")));
    }
    check_sigma(sigma)?;
    if !(elongation > 0.0 && elongation.is_finite()) {
        return Err(Error::Param(format!("elongation must be positive, got {elongation}")));
    }
    check_odd(width, height)?;
    let (sin_t, cos_t) = orientation.sin_cos();
    let su2 = sigma * sigma;
    let cross = elongation * sigma;
    let sv2 = cross * cross;
    let norm = 1.0 / (2.0 * PI * sigma * cross);
    let coefficients = sample_grid(width, height, |x, y| {
        let u = x * cos_t + y * sin_t;
        let v = -x * sin_t + y * cos_t;
        let g = norm * (-(u * u) / (2.0 * su2) - (v * v) / (2.0 * sv2)).exp();
        if order == 1 {
            -u / su2 * g
        } else {
            (u * u - su2) / (su2 * su2) * g
        }
    });
    let family = if order == 1 { Family::GaussDeriv1 } else { Family::GaussDeriv2 };
    Ok(Filter::new(width, height, coefficients, family)?
        .with_param("orientation", orientation)
        .with_param("sigma", sigma)
        .with_param("elongation", elongation))
}

/// Raw Laplacian of Gaussian, `-1/(πσ⁴)(1 - r²/2σ²)exp(-r²/2σ²)`.
pub fn log_filter(sigma: f64, width: usize, height: usize) -> Result<Filter> {
    check_sigma(sigma)?;
    check_odd(width, height)?;
    let s2 = sigma * sigma;
    let coefficients = sample_grid(width, height, |x, y| {
        let q = (x * x + y * y) / (2.0 * s2);
        -1.0 / (PI * s2 * s2) * (1.0 - q) * (-q).exp()
    });
    Ok(Filter::new(width, height, coefficients, Family::Log)?.with_param("sigma", sigma))
}

/// Raw isotropic Gaussian.
pub fn gaussian_filter(sigma: f64, width: usize, height: usize) -> Result<Filter> {
    check_sigma(sigma)?;
    check_odd(width, height)?;
    let s2 = sigma * sigma;
    let coefficients = sample_grid(width, height, |x, y| {
        (-(x * x + y * y) / (2.0 * s2)).exp() / (2.0 * PI * s2)
    });
    Ok(Filter::new(width, height, coefficients, Family::Gaussian)?.with_param("sigma", sigma))
}

/// The 48-member Leung–Malik bank: first derivatives, second derivatives,
/// LoG, then Gaussians. Derivative blocks are scale-major.
pub fn build_lm_bank(width: usize, height: usize) -> Result<FilterBank> {
    check_odd(width, height)?;
    let mut filters = Vec::with_capacity(48);
    for order in [1, 2] {
        for &sigma in &LM_DERIV_SCALES {
            for k in 0..LM_ORIENTATIONS {
                let theta = k as f64 * PI / LM_ORIENTATIONS as f64;
                let raw = gaussian_derivative_filter(order, theta, sigma, LM_ELONGATION, width, height)?;
                filters.push(normalize_filter(&flag_undersized(raw, LM_ELONGATION * sigma))?);
            }
        }
    }
    for &sigma in &LM_LOG_SCALES {
        let raw = log_filter(sigma, width, height)?;
        filters.push(normalize_filter(&flag_undersized(raw, sigma))?);
    }
    for &sigma in &LM_GAUSSIAN_SCALES {
        let raw = gaussian_filter(sigma, width, height)?;
        filters.push(normalize_filter(&flag_undersized(raw, sigma))?);
    }
    FilterBank::new(filters)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gabor(wavelength: f64, theta: f64, phase: f64, sigma: f64, aspect: f64, size: usize) -> Filter {
        gabor_filter(&GaborParams::new(wavelength, theta, phase, sigma, aspect).unwrap(), size, size).unwrap()
    }

    #[test]
    fn gabor_center_and_offset_values() {
        let f = gabor(4.0, 0.0, 0.0, 2.0, 1.0, 7);
        assert_eq!(f.at(0, 0), 1.0);
        // exp(-4/8) * cos(2π·2/4)
        let expected = (-0.5f64).exp() * PI.cos();
        assert!((f.at(2, 0) - expected).abs() < 1e-15);
        assert!((f.at(2, 0) + 0.606_530_659_712_633_4).abs() < 1e-12);
    }

    #[test]
    fn gabor_quarter_turn_is_transpose() {
        let a = gabor(4.0, 0.0, 0.0, 2.0, 1.0, 7);
        let b = gabor(4.0, PI / 2.0, 0.0, 2.0, 1.0, 7);
        for y in -3..=3 {
            for x in -3..=3 {
                assert!((a.at(x, y) - b.at(y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gabor_half_turn_negates_phase() {
        let a = gabor(5.0, 0.4, -0.9, 2.5, 0.7, 9);
        let b = gabor(5.0, 0.4 + PI, 0.9, 2.5, 0.7, 9);
        for (p, q) in a.coefficients().iter().zip(b.coefficients()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn gabor_rejects_bad_parameters() {
        assert!(GaborParams::new(0.0, 0.0, 0.0, 1.0, 1.0).is_err());
        assert!(GaborParams::new(1.0, 0.0, 0.0, -1.0, 1.0).is_err());
        assert!(GaborParams::new(1.0, 0.0, 0.0, 1.0, 0.0).is_err());
        let p = GaborParams::new(4.0, 0.0, 0.0, 2.0, 1.0).unwrap();
        assert!(matches!(gabor_filter(&p, 6, 7), Err(Error::Dimension(_))));
    }

    #[test]
    fn gabor_bank_order_is_orientation_major() {
        let bank = build_gabor_bank(2, &[0.1, 0.2], 7, 7).unwrap();
        let got: Vec<(f64, f64)> = bank
            .filters()
            .iter()
            .map(|f| (f.param("orientation").unwrap(), f.param("frequency").unwrap()))
            .collect();
        assert_eq!(got, vec![(0.0, 0.1), (0.0, 0.2), (PI / 2.0, 0.1), (PI / 2.0, 0.2)]);
    }

    #[test]
    fn gabor_bank_validates_inputs() {
        assert!(build_gabor_bank(3, &[], 7, 7).is_err());
        assert!(build_gabor_bank(0, &[0.1], 7, 7).is_err());
        assert!(build_gabor_bank(3, &[0.6], 7, 7).is_err());
        let single = build_gabor_bank(1, &[0.25], 7, 7).unwrap();
        assert_eq!(single.len(), 1);
        assert!((single.filters()[0].norm() - 1.0).abs() < 1e-12);
        assert!(single.filters()[0].mean().abs() < 1e-12);
    }

    #[test]
    fn default_frequencies_span_range() {
        let f = default_gabor_frequencies(7);
        assert_eq!(f.len(), 7);
        assert!((f[0] - 0.05).abs() < 1e-15);
        assert!((f[6] - 0.35).abs() < 1e-15);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn first_derivative_parity() {
        let f = gaussian_derivative_filter(1, 0.0, 2.0, 3.0, 9, 9).unwrap();
        assert_eq!(f.at(0, 0), 0.0);
        for y in -4..=4 {
            for x in -4..=4 {
                assert!((f.at(x, y) + f.at(-x, y)).abs() < 1e-15);
            }
        }
        let g = gaussian_derivative_filter(1, 1.1, 1.5, 3.0, 9, 9).unwrap();
        assert!(g.at(0, 0).abs() < 1e-18);
    }

    #[test]
    fn second_derivative_matches_dense_analytic_expression() {
        let f = gaussian_derivative_filter(2, 0.0, 1.0, 3.0, 19, 19).unwrap();
        // d²/dx² of exp(-x²/2 - y²/18) / (6π), evaluated independently
        for y in -9..=9 {
            for x in -9..=9 {
                let (xf, yf) = (x as f64, y as f64);
                let g = (-xf * xf / 2.0 - yf * yf / 18.0).exp() / (6.0 * PI);
                let expected = (xf * xf - 1.0) * g;
                assert!((f.at(x, y) - expected).abs() < 1e-15, "({x},{y})");
            }
        }
    }

    #[test]
    fn second_derivative_agrees_with_finite_differences_of_gaussian() {
        let (sigma, elong, theta) = (1.5, 3.0, 0.7f64);
        let f = gaussian_derivative_filter(2, theta, sigma, elong, 11, 11).unwrap();
        let g = |x: f64, y: f64| {
            let u = x * theta.cos() + y * theta.sin();
            let v = -x * theta.sin() + y * theta.cos();
            (-(u * u) / (2.0 * sigma * sigma) - v * v / (2.0 * (elong * sigma).powi(2))).exp()
                / (2.0 * PI * sigma * elong * sigma)
        };
        let h = 1e-3;
        for y in -5..=5 {
            for x in -5..=5 {
                let (xf, yf) = (x as f64, y as f64);
                let (dx, dy) = (h * theta.cos(), h * theta.sin());
                let fd = (g(xf + dx, yf + dy) - 2.0 * g(xf, yf) + g(xf - dx, yf - dy)) / (h * h);
                assert!((f.at(x, y) - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_derivative_order() {
        assert!(matches!(
            gaussian_derivative_filter(3, 0.0, 1.0, 3.0, 7, 7),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn log_center_value_and_symmetry() {
        let f = log_filter(1.0, 9, 9).unwrap();
        assert!((f.at(0, 0) + 1.0 / PI).abs() < 1e-15);
        for y in -4..=4 {
            for x in -4..=4 {
                assert_eq!(f.at(x, y), f.at(-x, -y));
                assert_eq!(f.at(x, y), f.at(y, x));
            }
        }
        assert!(log_filter(0.0, 9, 9).is_err());
    }

    #[test]
    fn wide_log_still_finalizes() {
        let raw = log_filter(50.0, 5, 5).unwrap();
        let f = normalize_filter(&raw).unwrap();
        assert!((f.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_peak_and_ratio() {
        let f = gaussian_filter(1.0, 7, 7).unwrap();
        let peak = f.at(0, 0);
        assert!(f.coefficients().iter().all(|&c| c <= peak && c > 0.0));
        assert!((f.at(1, 0) / peak - (-0.5f64).exp()).abs() < 1e-15);
        let fin = normalize_filter(&f).unwrap();
        assert!((fin.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lm_bank_layout() {
        let bank = build_lm_bank(19, 19).unwrap();
        assert_eq!(bank.len(), 48);
        let families: Vec<Family> = bank.filters().iter().map(|f| f.family()).collect();
        assert!(families[..18].iter().all(|&f| f == Family::GaussDeriv1));
        assert!(families[18..36].iter().all(|&f| f == Family::GaussDeriv2));
        assert!(families[36..44].iter().all(|&f| f == Family::Log));
        assert!(families[44..].iter().all(|&f| f == Family::Gaussian));
        // the largest LoG (σ=12) cannot fit a 19x19 grid
        assert_eq!(bank.filters()[43].param("undersized"), Some(1.0));
        assert_eq!(bank.filters()[36].param("undersized"), None);
    }
}
