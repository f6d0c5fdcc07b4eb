//! Flat `key = value` experiment files. `#` starts a comment; unknown and
//! repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fbr_core::dataio::NormStats;
use fbr_core::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankRecipe {
    None,
    Gabor,
    Lm,
    Union,
    External,
}

impl BankRecipe {
    fn name(self) -> &'static str {
        match self {
            BankRecipe::None => "none",
            BankRecipe::Gabor => "gabor",
            BankRecipe::Lm => "lm",
            BankRecipe::Union => "union",
            BankRecipe::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub dataset: DatasetKind,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// CIFAR-10 training batch files.
    pub cifar_train: Vec<String>,
    pub cifar_test: String,
    /// Stratified subsample of the training split; 0 keeps everything.
    pub train_per_class: usize,
    pub subset_seed: u64,
    pub bank: BankRecipe,
    pub bank_path: String,
    /// Side of the generated bank; 0 means the largest regularized kernel.
    pub bank_size: usize,
    pub gabor_orientations: usize,
    pub gabor_frequencies: usize,
    pub output_dir: String,
    /// Normalization statistics; computed from the training split when absent.
    pub norm: Option<NormStats>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            dataset: DatasetKind::Mnist,
            train_images: "data/mnist/train-images-idx3-ubyte".into(),
            train_labels: "data/mnist/train-labels-idx1-ubyte".into(),
            test_images: "data/mnist/t10k-images-idx3-ubyte".into(),
            test_labels: "data/mnist/t10k-labels-idx1-ubyte".into(),
            cifar_train: (1..=5).map(|i| format!("data/cifar10/data_batch_{i}.bin")).collect(),
            cifar_test: "data/cifar10/test_batch.bin".into(),
            train_per_class: 0,
            subset_seed: 0,
            bank: BankRecipe::Gabor,
            bank_path: String::new(),
            bank_size: 0,
            gabor_orientations: 10,
            gabor_frequencies: 7,
            output_dir: "run".into(),
            norm: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow!("{key}: cannot parse '{value}'"))
}

fn float_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.train.set(key, value)? {
            return Ok(());
        }
        let v = value.trim();
        match key {
            "dataset" => {
                self.dataset = match v {
                    "mnist" => DatasetKind::Mnist,
                    "cifar10" => DatasetKind::Cifar10,
                    _ => bail!("unknown dataset '{v}' (mnist, cifar10)"),
                }
            }
            "train_images" => self.train_images = v.into(),
            "train_labels" => self.train_labels = v.into(),
            "test_images" => self.test_images = v.into(),
            "test_labels" => self.test_labels = v.into(),
            "cifar_train" => self.cifar_train = v.split(',').map(|p| p.trim().to_string()).collect(),
            "cifar_test" => self.cifar_test = v.into(),
            "train_per_class" => self.train_per_class = parse(key, v)?,
            "subset_seed" => self.subset_seed = parse(key, v)?,
            "bank" => {
                self.bank = match v {
                    "none" => BankRecipe::None,
                    "gabor" => BankRecipe::Gabor,
                    "lm" => BankRecipe::Lm,
                    "union" => BankRecipe::Union,
                    "external" => BankRecipe::External,
                    _ => bail!("unknown bank recipe '{v}' (none, gabor, lm, union, external)"),
                }
            }
            "bank_path" => self.bank_path = v.into(),
            "bank_size" => self.bank_size = parse(key, v)?,
            "gabor_orientations" => self.gabor_orientations = parse(key, v)?,
            "gabor_frequencies" => self.gabor_frequencies = parse(key, v)?,
            "output_dir" => self.output_dir = v.into(),
            "norm_mean" | "norm_std" => {
                let values = float_list(key, v)?;
                let stats = self.norm.get_or_insert_with(|| NormStats {
                    mean: Vec::new(),
                    std: Vec::new(),
                });
                if key == "norm_mean" {
                    stats.mean = values;
                } else {
                    stats.std = values;
                }
            }
            _ => bail!("unknown key '{key}'"),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                bail!("line {}: '{key}' given twice", i + 1);
            }
            config.set(key, value).with_context(|| format!("line {}", i + 1))?;
        }
        if let Some(n) = &config.norm {
            if n.mean.len() != n.std.len() {
                bail!("norm_mean and norm_std must be given together with equal lengths");
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Every key with its effective value.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.train.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        let dataset = match self.dataset {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        };
        let rest = [
            ("dataset", dataset.to_string()),
            ("train_images", self.train_images.clone()),
            ("train_labels", self.train_labels.clone()),
            ("test_images", self.test_images.clone()),
            ("test_labels", self.test_labels.clone()),
            ("cifar_train", self.cifar_train.join(",")),
            ("cifar_test", self.cifar_test.clone()),
            ("train_per_class", self.train_per_class.to_string()),
            ("subset_seed", self.subset_seed.to_string()),
            ("bank", self.bank.name().to_string()),
            ("bank_path", self.bank_path.clone()),
            ("bank_size", self.bank_size.to_string()),
            ("gabor_orientations", self.gabor_orientations.to_string()),
            ("gabor_frequencies", self.gabor_frequencies.to_string()),
            ("output_dir", self.output_dir.clone()),
        ];
        for (k, v) in rest {
            writeln!(out, "{k} = {v}").unwrap();
        }
        if let Some(n) = &self.norm {
            writeln!(out, "norm_mean = {}", join_floats(&n.mean)).unwrap();
            writeln!(out, "norm_std = {}", join_floats(&n.std)).unwrap();
        }
        out
    }
}
