//! Nearest-filter matching and the resulting quadratic penalty.
//!
//! Each iteration every selected 2D kernel slice is matched to its closest
//! scaled bank member; the match is then frozen while the penalty
//! `λ Σ ‖k − ρ f*‖²` and its gradient `2λ (k − ρ f*)` are evaluated.

use std::collections::BTreeMap;

use super::RegConfig;
use crate::error::{Error, Result};
use crate::filterbank::{resample_bank, FilterBank};
use crate::nn::{Network, NetworkGrads};

/// Tolerance for detecting that weights moved since an assignment was made.
const STALE_TOLERANCE: f64 = 1e-9;

/// A base bank plus its resampled copies, one per kernel size.
#[derive(Debug, Clone)]
pub struct BankCache {
    base: FilterBank,
    sized: BTreeMap<(usize, usize), FilterBank>,
}

impl BankCache {
    pub fn new(base: FilterBank) -> Self {
        let mut sized = BTreeMap::new();
        sized.insert((base.height(), base.width()), base.clone());
        BankCache { base, sized }
    }

    /// Builds the cache and resamples the bank for every selected layer of `network`.
    pub fn for_network(base: FilterBank, network: &Network, config: &RegConfig) -> Result<Self> {
        let mut cache = BankCache::new(base);
        for (_, c) in network.conv_layers() {
            if config.selects(c) {
                cache.prepare(c.kernel_height(), c.kernel_width())?;
            }
        }
        Ok(cache)
    }

    pub fn base(&self) -> &FilterBank {
        &self.base
    }

    pub fn prepare(&mut self, height: usize, width: usize) -> Result<&FilterBank> {
        if !self.sized.contains_key(&(height, width)) {
            let bank = resample_bank(&self.base, width, height)?;
            self.sized.insert((height, width), bank);
        }
        Ok(&self.sized[&(height, width)])
    }

    pub fn get(&self, height: usize, width: usize) -> Result<&FilterBank> {
        self.sized.get(&(height, width)).ok_or_else(|| {
            Error::Shape(format!("no bank prepared for {width}x{height} kernels"))
        })
    }
}

fn squared_distance(slice: &[f64], filter: &[f64], scale: f64) -> f64 {
    slice
        .iter()
        .zip(filter)
        .map(|(&k, &f)| {
            let d = scale * f - k;
            d * d
        })
        .sum()
}

/// Index of the bank filter closest to `slice` after scaling by `scale`, and
/// that distance. Ties go to the lowest index.
pub fn match_filter(slice: &[f64], height: usize, width: usize, bank: &FilterBank, scale: f64) -> Result<(usize, f64)> {
    if height != bank.height() || width != bank.width() || slice.len() != height * width {
        return Err(Error::Shape(format!(
            "{width}x{height} slice ({} values) vs {}x{} bank",
            slice.len(),
            bank.width(),
            bank.height()
        )));
    }
    let mut best = (0, f64::INFINITY);
    for (i, f) in bank.filters().iter().enumerate() {
        let d = squared_distance(slice, f.coefficients(), scale);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok((best.0, best.1.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchEntry {
    pub layer: usize,
    pub kernel: usize,
    pub channel: usize,
    pub bank_index: usize,
    pub distance: f64,
}

/// Matches for every selected `(layer, kernel, channel)` slice, in network order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchAssignment {
    pub entries: Vec<MatchEntry>,
}

impl MatchAssignment {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mean_distance(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.distance).sum::<f64>() / self.entries.len() as f64
    }

    /// Shannon entropy (nats) of the chosen bank indices.
    pub fn index_entropy(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.bank_index).or_insert(0) += 1;
        }
        let n = self.entries.len() as f64;
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }
}

fn slice_of(kernels: &[f64], kernel: usize, channel: usize, channels: usize, area: usize) -> &[f64] {
    let start = (kernel * channels + channel) * area;
    &kernels[start..start + area]
}

/// Matches every slice of every selected layer against the bank prepared for its size.
pub fn fbr_assign(network: &Network, banks: &BankCache, config: &RegConfig) -> Result<MatchAssignment> {
    let mut entries = Vec::new();
    for (layer, conv) in network.conv_layers() {
        if !config.selects(conv) {
            continue;
        }
        let (h, w) = (conv.kernel_height(), conv.kernel_width());
        let bank = banks.get(h, w)?;
        let (m, d) = (conv.out_channels(), conv.in_channels());
        let data = conv.kernels.data();
        for kernel in 0..m {
            for channel in 0..d {
                let slice = slice_of(data, kernel, channel, d, h * w);
                let (bank_index, distance) = match_filter(slice, h, w, bank, config.bank_scale)?;
                entries.push(MatchEntry {
                    layer,
                    kernel,
                    channel,
                    bank_index,
                    distance,
                });
            }
        }
    }
    Ok(MatchAssignment { entries })
}

/// Visits each entry with its current slice and matched filter, rejecting
/// assignments that no longer describe the weights.
fn for_each_match(
    network: &Network,
    assignment: &MatchAssignment,
    banks: &BankCache,
    mut visit: impl FnMut(&MatchEntry, &[f64], &[f64]),
) -> Result<()> {
    for e in &assignment.entries {
        let conv = network
            .conv_layer(e.layer)
            .ok_or_else(|| Error::Shape(format!("assignment names layer {} which is not convolutional", e.layer)))?;
        let (h, w) = (conv.kernel_height(), conv.kernel_width());
        let (m, d) = (conv.out_channels(), conv.in_channels());
        if e.kernel >= m || e.channel >= d {
            return Err(Error::Shape(format!(
                "assignment slice ({}, {}) outside layer {} of {m}x{d}",
                e.kernel, e.channel, e.layer
            )));
        }
        let bank = banks.get(h, w)?;
        let filter = bank
            .get(e.bank_index)
            .ok_or_else(|| Error::Shape(format!("bank index {} outside bank of {}", e.bank_index, bank.len())))?;
        let slice = slice_of(conv.kernels.data(), e.kernel, e.channel, d, h * w);
        visit(e, slice, filter.coefficients());
    }
    Ok(())
}

/// `λ Σ ‖k − ρ f*‖²` over the assignment.
pub fn fbr_penalty(network: &Network, assignment: &MatchAssignment, banks: &BankCache, config: &RegConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut stale = None;
    for_each_match(network, assignment, banks, |e, slice, filter| {
        let sq = squared_distance(slice, filter, config.bank_scale);
        let current = sq.sqrt();
        if stale.is_none() && (current - e.distance).abs() > STALE_TOLERANCE {
            stale = Some(Error::StaleAssignment {
                layer: e.layer,
                kernel: e.kernel,
                channel: e.channel,
                recorded: e.distance,
                current,
            });
        }
        total += sq;
    })?;
    match stale {
        Some(err) => Err(err),
        None => Ok(config.lambda_fbr * total),
    }
}

/// `2λ (k − ρ f*)` on matched slices, zero elsewhere.
pub fn fbr_gradient(
    network: &Network,
    assignment: &MatchAssignment,
    banks: &BankCache,
    config: &RegConfig,
) -> Result<NetworkGrads> {
    // validates freshness with the same rule as the penalty
    fbr_penalty(network, assignment, banks, config)?;
    let mut grads = NetworkGrads::zeros_like(network);
    let factor = 2.0 * config.lambda_fbr;
    for_each_match(network, assignment, banks, |e, slice, filter| {
        let conv = network.conv_layer(e.layer).expect("checked");
        let area = conv.kernel_height() * conv.kernel_width();
        let start = (e.kernel * conv.in_channels() + e.channel) * area;
        let dst = grads.conv_kernels_mut(e.layer).expect("conv layer");
        for ((g, &k), &f) in dst.data_mut()[start..start + area].iter_mut().zip(slice).zip(filter) {
            *g = factor * (k - config.bank_scale * f);
        }
    })?;
    Ok(grads)
}
