//! Dataset ingestion (MNIST IDX, CIFAR-10 binary), normalization,
//! augmentation and stratified subsampling.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Per-channel statistics used to standardize images.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `[N, D, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Statistics applied to `images`, if any.
    pub stats: Option<NormStats>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::Data(format!("images must be a nonempty [N, D, H, W] tensor, got {s:?}")));
        }
        if labels.len() != s[0] {
            return Err(Error::Data(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {bad} outside {class_count} classes")));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.stats.is_some()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Items at `indices`, keeping normalization metadata.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            stats: self.stats.clone(),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses IDX image and label buffers into `[N, 1, rows, cols]` values in `[0, 1]`.
pub fn parse_mnist_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0, "image file")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("image file magic {magic:#010x}, expected 0x00000803")));
    }
    let n = be_u32(images, 4, "image file")? as usize;
    let rows = be_u32(images, 8, "image file")? as usize;
    let cols = be_u32(images, 12, "image file")? as usize;
    let magic = be_u32(labels, 0, "label file")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("label file magic {magic:#010x}, expected 0x00000801")));
    }
    let n_labels = be_u32(labels, 4, "label file")? as usize;
    if n != n_labels {
        return Err(Error::Format(format!("{n} images but {n_labels} labels")));
    }
    let pixels = n * rows * cols;
    if images.len() != 16 + pixels {
        return Err(Error::Format(format!(
            "image file holds {} payload bytes, header implies {pixels}",
            images.len().saturating_sub(16)
        )));
    }
    if labels.len() != 8 + n {
        return Err(Error::Format(format!(
            "label file holds {} payload bytes, header implies {n}",
            labels.len().saturating_sub(8)
        )));
    }
    let data = images[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let label_values: Vec<usize> = labels[8..].iter().map(|&b| usize::from(b)).collect();
    if let Some(bad) = label_values.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("label byte {bad} is not a digit")));
    }
    LabeledDataset::new(Tensor::from_vec(&[n, 1, rows, cols], data)?, label_values, 10)
}

pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    parse_mnist_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Parses concatenated CIFAR-10 records: a label byte then R, G, B planes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(Error::Format(format!(
            "CIFAR-10 data length {} is not a multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    for record in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        if record[0] > 9 {
            return Err(Error::Format(format!("CIFAR-10 label byte {} is out of range", record[0])));
        }
        labels.push(usize::from(record[0]));
        data.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    LabeledDataset::new(Tensor::from_vec(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels, 10)
}

pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<LabeledDataset> {
    if batch_paths.is_empty() {
        return Err(Error::Data("no CIFAR-10 batch files given".into()));
    }
    let mut bytes = Vec::new();
    for p in batch_paths {
        let chunk = fs::read(p)?;
        if chunk.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD_LEN}",
                p.as_ref().display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes)
}

/// Inverse of [`parse_mnist_idx`] for single-channel data; values are
/// quantized to bytes.
pub fn encode_mnist_idx(dataset: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = dataset.images.shape();
    if s[1] != 1 {
        return Err(Error::Data(format!("IDX images need one channel, got {}", s[1])));
    }
    if dataset.labels.iter().any(|&l| l > 255) {
        return Err(Error::Data("labels do not fit in a byte".into()));
    }
    let mut images = Vec::with_capacity(16 + dataset.images.len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(dataset.images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + s[0]);
    for v in [IDX_LABELS_MAGIC, s[0] as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend(dataset.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

/// Noisy copies of one random template per class, values in `[0, 1]`.
/// Labels cycle through the classes so every class is equally represented.
pub fn synthetic_dataset(n: usize, classes: usize, shape: [usize; 3], noise: f64, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || classes == 0 {
        return Err(Error::Data("synthetic dataset needs items and classes".into()));
    }
    let area: usize = shape.iter().product();
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut r = rng::stream(seed, &[0x7e3d, c as u64]);
            (0..area).map(|_| r.random::<f64>()).collect()
        })
        .collect();
    let mut r = rng::stream(seed, &[0x7e3d, u64::MAX]);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * area);
    for &l in &labels {
        data.extend(templates[l].iter().map(|&t| (t + noise * (r.random::<f64>() - 0.5)).clamp(0.0, 1.0)));
    }
    LabeledDataset::new(Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], data)?, labels, classes)
}

/// Per-channel mean and population standard deviation.
pub fn channel_stats(images: &Tensor) -> Result<NormStats> {
    let s = images.shape();
    let (n, d, plane) = (s[0], s[1], s[2] * s[3]);
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for c in 0..d {
        let values = || (0..n).flat_map(move |i| images.item(i)[c * plane..(c + 1) * plane].iter());
        let m = values().sum::<f64>() / count;
        let var = values().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
        if var.is_nan() || var <= 0.0 {
            return Err(Error::Data(format!("channel {c} has zero variance")));
        }
        mean[c] = m;
        std[c] = var.sqrt();
    }
    Ok(NormStats { mean, std })
}

/// Standardizes `images` in place with `stats`. Not idempotent.
pub fn apply_normalization(images: &mut Tensor, stats: &NormStats) -> Result<()> {
    let s = images.shape().to_vec();
    if stats.mean.len() != s[1] || stats.std.len() != s[1] {
        return Err(Error::Data(format!(
            "stats for {} channels applied to {} channels",
            stats.mean.len(),
            s[1]
        )));
    }
    if stats.std.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(Error::Data("zero standard deviation in normalization stats".into()));
    }
    let plane = s[2] * s[3];
    for i in 0..s[0] {
        for (c, chunk) in images.item_mut(i).chunks_exact_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - stats.mean[c]) / stats.std[c];
            }
        }
    }
    Ok(())
}

/// Standardizes per channel. With `stats` absent they are computed from this
/// dataset (the training split); the test split should pass the training stats.
pub fn normalize(dataset: &LabeledDataset, stats: Option<&NormStats>) -> Result<(LabeledDataset, NormStats)> {
    if dataset.is_normalized() {
        return Err(Error::Data("dataset is already normalized".into()));
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => channel_stats(&dataset.images)?,
    };
    let mut out = dataset.clone();
    apply_normalization(&mut out.images, &stats)?;
    out.stats = Some(stats.clone());
    Ok((out, stats))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub max_shift: usize,
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig {
        flip_probability: 0.0,
        max_shift: 0,
    };
    /// Translations only; mirrored digits change meaning.
    pub const MNIST: AugmentConfig = AugmentConfig {
        flip_probability: 0.0,
        max_shift: 2,
    };
    pub const CIFAR: AugmentConfig = AugmentConfig {
        flip_probability: 0.5,
        max_shift: 2,
    };

    pub fn is_identity(&self) -> bool {
        self.flip_probability == 0.0 && self.max_shift == 0
    }
}

/// Horizontal mirror of every plane of one image.
pub fn flip_horizontal(image: &mut [f64], width: usize) {
    for row in image.chunks_exact_mut(width) {
        row.reverse();
    }
}

/// Translates every plane by `(dx, dy)` pixels, filling with zeros.
pub fn shift_image(image: &[f64], height: usize, width: usize, dx: isize, dy: isize) -> Vec<f64> {
    let plane = height * width;
    let mut out = vec![0.0; image.len()];
    for (src, dst) in image.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        for y in 0..height as isize {
            let sy = y - dy;
            if sy < 0 || sy >= height as isize {
                continue;
            }
            for x in 0..width as isize {
                let sx = x - dx;
                if sx >= 0 && sx < width as isize {
                    dst[(y as usize) * width + x as usize] = src[(sy as usize) * width + sx as usize];
                }
            }
        }
    }
    out
}

/// Independent random flip and integer shift per image.
pub fn augment_batch(batch: &Tensor, config: &AugmentConfig, rng: &mut impl Rng) -> Tensor {
    if config.is_identity() {
        return batch.clone();
    }
    let s = batch.shape();
    let (h, w) = (s[2], s[3]);
    let mut out = batch.clone();
    let m = config.max_shift as i64;
    for i in 0..s[0] {
        let flip = config.flip_probability > 0.0 && rng.random::<f64>() < config.flip_probability;
        let (dx, dy) = if m > 0 {
            (rng.random_range(-m..=m) as isize, rng.random_range(-m..=m) as isize)
        } else {
            (0, 0)
        };
        let item = out.item_mut(i);
        if flip {
            flip_horizontal(item, w);
        }
        if dx != 0 || dy != 0 {
            let shifted = shift_image(item, h, w, dx, dy);
            item.copy_from_slice(&shifted);
        }
    }
    out
}

/// Stratified sample of `per_class` items from every class, in shuffled order.
pub fn subset(dataset: &LabeledDataset, per_class: usize, seed: u64) -> Result<LabeledDataset> {
    let mut by_class = vec![Vec::new(); dataset.class_count];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut chosen = Vec::with_capacity(per_class * dataset.class_count);
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(Error::Data(format!(
                "class {class} has {} items, {per_class} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng::stream(seed, &[0x5b5e7, class as u64]));
        chosen.extend_from_slice(&members[..per_class]);
    }
    chosen.shuffle(&mut rng::stream(seed, &[0x5b5e7, u64::MAX]));
    Ok(dataset.select(&chosen))
}
