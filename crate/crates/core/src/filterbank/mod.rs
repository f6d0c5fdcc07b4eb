//! Structured 2D filter banks used as regularization references.
//!
//! Every bank member lives on an odd-sized grid whose center pixel is the
//! origin. Generators return raw samples; [`normalize_filter`] finalizes them
//! (zero mean for band-pass families, unit L2 norm for all).

mod generators;
mod io;

use std::collections::BTreeMap;
use std::path::Path;

pub use generators::{
    build_gabor_bank, build_lm_bank, default_gabor_frequencies, gabor_filter,
    gaussian_derivative_filter, gaussian_filter, log_filter, GaborParams, LM_DERIV_SCALES,
    LM_GAUSSIAN_SCALES, LM_LOG_SCALES, LM_ORIENTATIONS,
};
pub use io::{decode_bank, encode_bank, load_bank, save_bank, BANK_MAGIC, BANK_VERSION};

use crate::error::{Error, Result};
use crate::render::{render_grid, GrayImage};

/// Generator family of a filter. The numeric codes are part of the bank file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Gabor,
    GaussDeriv1,
    GaussDeriv2,
    Log,
    Gaussian,
    External,
}

impl Family {
    pub fn code(self) -> u32 {
        match self {
            Family::Gabor => 0,
            Family::GaussDeriv1 => 1,
            Family::GaussDeriv2 => 2,
            Family::Log => 3,
            Family::Gaussian => 4,
            Family::External => 5,
        }
    }

    pub fn from_code(code: u32) -> Option<Family> {
        Some(match code {
            0 => Family::Gabor,
            1 => Family::GaussDeriv1,
            2 => Family::GaussDeriv2,
            3 => Family::Log,
            4 => Family::Gaussian,
            5 => Family::External,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gabor => "gabor",
            Family::GaussDeriv1 => "gauss_deriv1",
            Family::GaussDeriv2 => "gauss_deriv2",
            Family::Log => "log",
            Family::Gaussian => "gaussian",
            Family::External => "external",
        }
    }

    /// Whether finalization removes the mean. Gaussians are low-pass by nature
    /// and external filters are taken as given.
    pub fn is_zero_mean(self) -> bool {
        !matches!(self, Family::Gaussian | Family::External)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    width: usize,
    height: usize,
    coefficients: Vec<f64>,
    family: Family,
    params: BTreeMap<String, f64>,
}

impl Filter {
    pub fn new(width: usize, height: usize, coefficients: Vec<f64>, family: Family) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("empty filter grid {width}x{height}")));
        }
        if coefficients.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} filter needs {} coefficients, got {}",
                width * height,
                coefficients.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::Param("filter coefficients must be finite".into()));
        }
        Ok(Filter {
            width,
            height,
            coefficients,
            family,
            params: BTreeMap::new(),
        })
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }

    /// Coefficient at integer offset (x, y) from the grid center.
    pub fn at(&self, x: isize, y: isize) -> f64 {
        let cx = (self.width / 2) as isize;
        let cy = (self.height / 2) as isize;
        self.coefficients[((y + cy) as usize) * self.width + (x + cx) as usize]
    }

    pub fn norm(&self) -> f64 {
        self.coefficients.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.coefficients.iter().sum::<f64>() / self.coefficients.len() as f64
    }
}

/// Zero-means (per family rule) and unit-normalizes a filter.
pub fn normalize_filter(filter: &Filter) -> Result<Filter> {
    let before = filter.norm();
    if before == 0.0 {
        return Err(Error::DegenerateFilter);
    }
    let mut coefficients = filter.coefficients.clone();
    if filter.family.is_zero_mean() {
        let mean = filter.mean();
        for c in &mut coefficients {
            *c -= mean;
        }
    }
    let norm = coefficients.iter().map(|c| c * c).sum::<f64>().sqrt();
    // mean removal of a constant grid leaves only rounding residue
    if norm <= 1e-10 * before {
        return Err(Error::DegenerateFilter);
    }
    for c in &mut coefficients {
        *c /= norm;
    }
    Ok(Filter {
        coefficients,
        ..filter.clone()
    })
}

/// An ordered, nonempty set of equally sized filters.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    filters: Vec<Filter>,
    width: usize,
    height: usize,
}

impl FilterBank {
    pub fn new(filters: Vec<Filter>) -> Result<Self> {
        let first = filters
            .first()
            .ok_or_else(|| Error::Param("a filter bank needs at least one filter".into()))?;
        let (width, height) = (first.width, first.height);
        if let Some(bad) = filters.iter().position(|f| f.width != width || f.height != height) {
            return Err(Error::Dimension(format!(
                "filter {bad} is {}x{}, bank is {width}x{height}",
                filters[bad].width, filters[bad].height
            )));
        }
        Ok(FilterBank {
            filters,
            width,
            height,
        })
    }

    pub fn filters(&self) -> &[Filter] {
        &self.filters
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, index: usize) -> Option<&Filter> {
        self.filters.get(index)
    }

    pub fn family_counts(&self) -> BTreeMap<Family, usize> {
        let mut counts = BTreeMap::new();
        for f in &self.filters {
            *counts.entry(f.family).or_insert(0) += 1;
        }
        counts
    }

    /// Tiles the bank into a grayscale grid image.
    pub fn render(&self) -> GrayImage {
        let tiles: Vec<&[f64]> = self.filters.iter().map(|f| f.coefficients()).collect();
        render_grid(&tiles, self.width, self.height)
    }
}

pub const STANDARD_GABOR_ORIENTATIONS: usize = 10;
pub const STANDARD_GABOR_FREQUENCIES: usize = 7;

/// 10 orientations by 7 frequencies.
pub fn standard_gabor_bank(width: usize, height: usize) -> Result<FilterBank> {
    build_gabor_bank(
        STANDARD_GABOR_ORIENTATIONS,
        &default_gabor_frequencies(STANDARD_GABOR_FREQUENCIES),
        width,
        height,
    )
}

/// The standard Gabor bank followed by the Leung–Malik bank.
pub fn union_bank(width: usize, height: usize) -> Result<FilterBank> {
    merge_banks(&standard_gabor_bank(width, height)?, &build_lm_bank(width, height)?)
}

/// Concatenates two banks of equal size, `a` first.
pub fn merge_banks(a: &FilterBank, b: &FilterBank) -> Result<FilterBank> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Dimension(format!(
            "cannot merge {}x{} bank with {}x{} bank",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut filters = a.filters.clone();
    filters.extend(b.filters.iter().cloned());
    FilterBank::new(filters)
}

/// Bilinearly resamples every filter onto a new odd grid, stretching the
/// source extent onto the target extent, then re-finalizes.
pub fn resample_bank(bank: &FilterBank, new_width: usize, new_height: usize) -> Result<FilterBank> {
    check_odd(new_width, new_height)?;
    if new_width == bank.width && new_height == bank.height {
        return Ok(bank.clone());
    }
    let filters = bank
        .filters
        .iter()
        .map(|f| {
            let resampled = Filter {
                width: new_width,
                height: new_height,
                coefficients: resample_grid(&f.coefficients, f.width, f.height, new_width, new_height),
                family: f.family,
                params: f.params.clone(),
            };
            normalize_filter(&resampled)
        })
        .collect::<Result<Vec<_>>>()?;
    FilterBank::new(filters)
}

fn resample_grid(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let ratio = |s: usize, d: usize| {
        if d <= 1 {
            0.0
        } else {
            (s - 1) as f64 / (d - 1) as f64
        }
    };
    let (rx, ry) = (ratio(sw, dw), ratio(sh, dh));
    let (scx, scy) = ((sw / 2) as f64, (sh / 2) as f64);
    let (dcx, dcy) = ((dw / 2) as isize, (dh / 2) as isize);
    let sample = |col: isize, row: isize| -> f64 {
        if col < 0 || row < 0 || col as usize >= sw || row as usize >= sh {
            0.0
        } else {
            src[row as usize * sw + col as usize]
        }
    };
    let mut out = Vec::with_capacity(dw * dh);
    for row in 0..dh as isize {
        let v = scy + (row - dcy) as f64 * ry;
        let v0 = v.floor();
        let fy = v - v0;
        for col in 0..dw as isize {
            let u = scx + (col - dcx) as f64 * rx;
            let u0 = u.floor();
            let fx = u - u0;
            let (c0, r0) = (u0 as isize, v0 as isize);
            let top = sample(c0, r0) * (1.0 - fx) + sample(c0 + 1, r0) * fx;
            let bottom = sample(c0, r0 + 1) * (1.0 - fx) + sample(c0 + 1, r0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub(crate) fn check_odd(width: usize, height: usize) -> Result<()> {
    if width.is_multiple_of(2) || height.is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "filter grids must have odd sides, got {width}x{height}"
        )));
    }
    Ok(())
}

/// Writes a PGM grid rendering of `bank` to `path`.
pub fn render_bank_grid(bank: &FilterBank, path: impl AsRef<Path>) -> Result<()> {
    bank.render().save_pgm(path)
}
