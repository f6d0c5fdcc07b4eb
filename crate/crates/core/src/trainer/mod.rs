//! The regularized training loop.
//!
//! Every iteration first matches the current kernels against the bank and
//! evaluates the penalties, then draws a batch, backpropagates the batch loss,
//! adds the penalty gradients and takes one optimizer step. Randomness comes
//! from streams keyed by `(seed, epoch, batch)`, so a run is a pure function of
//! its configuration and data, and resuming at an epoch boundary needs only
//! the counters.

mod checkpoint;
mod metrics;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use metrics::{format_g9, metrics_csv, parse_metrics_csv, write_metrics_csv, MetricsRow, METRICS_HEADER};
pub use optim::{rmsprop_step, sgd_step, Optimizer, OptimizerKind, RMSPROP_EPS, RMSPROP_RHO};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::dataio::{augment_batch, AugmentConfig, LabeledDataset};
use crate::error::{Error, Result};
use crate::filterbank::FilterBank;
use crate::nn::{softmax_xent, Network, NetworkGrads};
use crate::regularize::{total_regularized_loss, BankCache, OrthoVariant, RegConfig};
use crate::rng;

const EVAL_BATCH: usize = 250;

/// How a batch is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Consecutive slices of a per-epoch permutation.
    Epoch,
    /// An independent draw without replacement for every batch.
    Random,
}

impl Sampling {
    pub fn name(self) -> &'static str {
        match self {
            Sampling::Epoch => "epoch",
            Sampling::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "epoch" => Some(Sampling::Epoch),
            "random" => Some(Sampling::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Name of the architecture, see [`crate::nn::NetworkSpec::named`].
    pub spec: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Per-update rate decay of RMSProp.
    pub rmsprop_decay: f64,
    pub step_decay_period: usize,
    pub step_decay_factor: f64,
    pub seed: u64,
    /// Extra metrics rows every this many iterations; 0 logs at epoch ends only.
    pub eval_every: u64,
    pub sampling: Sampling,
    pub augment: AugmentConfig,
    /// When false the batch loss is still logged but contributes no gradient.
    pub classification_loss: bool,
    pub reg: RegConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            spec: "mnist-small".into(),
            epochs: 5,
            batch_size: 64,
            optimizer: OptimizerKind::RmsProp,
            learning_rate: 1e-3,
            rmsprop_decay: 1e-6,
            step_decay_period: 10,
            step_decay_factor: 0.5,
            seed: 0,
            eval_every: 0,
            sampling: Sampling::Epoch,
            augment: AugmentConfig::NONE,
            classification_loss: true,
            reg: RegConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Param(format!("{key}: cannot parse '{value}'")))
}

impl TrainConfig {
    /// Keys accepted by [`TrainConfig::set`], in canonical order.
    pub const KEYS: [&'static str; 22] = [
        "spec",
        "epochs",
        "batch_size",
        "optimizer",
        "learning_rate",
        "rmsprop_decay",
        "step_decay_period",
        "step_decay_factor",
        "seed",
        "eval_every",
        "sampling",
        "flip_probability",
        "max_shift",
        "classification_loss",
        "lambda_fbr",
        "gamma_ortho",
        "l1_coeff",
        "l2_coeff",
        "ortho_variant",
        "ortho_squared",
        "min_regularized_kernel",
        "bank_scale",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Param(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.rmsprop_decay.is_finite() && self.rmsprop_decay >= 0.0) {
            return Err(Error::Param(format!("rmsprop_decay must be non-negative, got {}", self.rmsprop_decay)));
        }
        if self.step_decay_period == 0 {
            return Err(Error::Param("step_decay_period must be at least 1".into()));
        }
        if !(self.step_decay_factor > 0.0 && self.step_decay_factor <= 1.0) {
            return Err(Error::Param(format!(
                "step_decay_factor must lie in (0, 1], got {}",
                self.step_decay_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_probability) {
            return Err(Error::Param("flip_probability must lie in [0, 1]".into()));
        }
        self.reg.validate()
    }

    /// Sets one field from its text form. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "spec" => self.spec = v.to_string(),
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "optimizer" => {
                self.optimizer =
                    OptimizerKind::parse(v).ok_or_else(|| Error::Param(format!("unknown optimizer '{v}'")))?
            }
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "rmsprop_decay" => self.rmsprop_decay = parse_value(key, v)?,
            "step_decay_period" => self.step_decay_period = parse_value(key, v)?,
            "step_decay_factor" => self.step_decay_factor = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "eval_every" => self.eval_every = parse_value(key, v)?,
            "sampling" => {
                self.sampling =
                    Sampling::parse(v).ok_or_else(|| Error::Param(format!("unknown sampling mode '{v}'")))?
            }
            "flip_probability" => self.augment.flip_probability = parse_value(key, v)?,
            "max_shift" => self.augment.max_shift = parse_value(key, v)?,
            "classification_loss" => self.classification_loss = parse_value(key, v)?,
            "lambda_fbr" => self.reg.lambda_fbr = parse_value(key, v)?,
            "gamma_ortho" => self.reg.gamma_ortho = parse_value(key, v)?,
            "l1_coeff" => self.reg.l1_coeff = parse_value(key, v)?,
            "l2_coeff" => self.reg.l2_coeff = parse_value(key, v)?,
            "ortho_variant" => {
                self.reg.ortho_variant = OrthoVariant::parse(v)
                    .ok_or_else(|| Error::Param(format!("unknown orthogonality variant '{v}'")))?
            }
            "ortho_squared" => self.reg.ortho_squared = parse_value(key, v)?,
            "min_regularized_kernel" => self.reg.min_regularized_kernel = parse_value(key, v)?,
            "bank_scale" => self.reg.bank_scale = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every training field as `(key, value)`; floats use the shortest
    /// representation that parses back exactly.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let r = &self.reg;
        vec![
            ("spec", self.spec.clone()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("optimizer", self.optimizer.name().into()),
            ("learning_rate", float(self.learning_rate)),
            ("rmsprop_decay", float(self.rmsprop_decay)),
            ("step_decay_period", self.step_decay_period.to_string()),
            ("step_decay_factor", float(self.step_decay_factor)),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("sampling", self.sampling.name().into()),
            ("flip_probability", float(self.augment.flip_probability)),
            ("max_shift", self.augment.max_shift.to_string()),
            ("classification_loss", self.classification_loss.to_string()),
            ("lambda_fbr", float(r.lambda_fbr)),
            ("gamma_ortho", float(r.gamma_ortho)),
            ("l1_coeff", float(r.l1_coeff)),
            ("l2_coeff", float(r.l2_coeff)),
            ("ortho_variant", r.ortho_variant.name().into()),
            ("ortho_squared", r.ortho_squared.to_string()),
            ("min_regularized_kernel", r.min_regularized_kernel.to_string()),
            ("bank_scale", float(r.bank_scale)),
        ]
    }

    pub fn canonical_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of [`TrainConfig::canonical_text`].
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }
}

/// Shortest text that parses back to `v` exactly.
fn float(v: f64) -> String {
    format!("{v:?}")
}

/// `lr0 · factor^⌊epoch / period⌋`
pub fn step_decay(lr0: f64, epoch: usize, period: usize, factor: f64) -> f64 {
    assert!(period >= 1, "step decay period must be positive");
    lr0 * factor.powi((epoch / period) as i32)
}

/// Mean cross-entropy and top-1 accuracy over the whole dataset.
pub fn evaluate(network: &Network, dataset: &LabeledDataset) -> Result<(f64, f64)> {
    let n = dataset.len();
    let (mut ce, mut correct) = (0.0, 0usize);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let x = dataset.images.select(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
        let logits = network.forward(&x)?;
        let (loss, _) = softmax_xent(&logits, &labels)?;
        ce += loss * chunk.len() as f64;
        for (row, &l) in logits.data().chunks_exact(logits.item_len()).zip(&labels) {
            if argmax(row) == l {
                correct += 1;
            }
        }
    }
    Ok((ce / n as f64, correct as f64 / n as f64))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn tag_iteration(err: Error, iteration: u64) -> Error {
    match err {
        Error::Numeric { what, iteration: None } => Error::Numeric {
            what,
            iteration: Some(iteration),
        },
        other => other,
    }
}

fn numeric(what: &str, iteration: u64) -> Error {
    Error::Numeric {
        what: what.into(),
        iteration: Some(iteration),
    }
}

/// Running mean of the batch loss between two metrics rows.
#[derive(Debug, Clone, Default)]
struct Window {
    sum: f64,
    count: usize,
}

#[derive(Debug, Clone)]
struct Snapshot {
    fbr_term: f64,
    ortho_term: f64,
    decay_term: f64,
    mean_match_distance: Option<f64>,
    match_entropy: Option<f64>,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    network: Network,
    optimizer: Optimizer,
    banks: Option<BankCache>,
    train: &'a LabeledDataset,
    test: Option<&'a LabeledDataset>,
    epoch: usize,
    iteration: u64,
    log: Vec<MetricsRow>,
    window: Window,
    best: Option<(f64, Network)>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        network: Network,
        bank: Option<&FilterBank>,
        train: &'a LabeledDataset,
        test: Option<&'a LabeledDataset>,
    ) -> Result<Self> {
        let optimizer = Optimizer::new(config.optimizer, config.rmsprop_decay, &network);
        Self::assemble(config, network, optimizer, bank, train, test, 0, 0)
    }

    /// Continues from a checkpoint taken at an epoch boundary. The second
    /// value warns when the checkpoint was written under a different config.
    pub fn resume(
        config: TrainConfig,
        checkpoint: Checkpoint,
        bank: Option<&FilterBank>,
        train: &'a LabeledDataset,
        test: Option<&'a LabeledDataset>,
    ) -> Result<(Self, Option<String>)> {
        let warning = digest_warning(&checkpoint, &config);
        if checkpoint.optimizer.kind() != config.optimizer {
            return Err(Error::Param(format!(
                "checkpoint was trained with {}, config asks for {}",
                checkpoint.optimizer.kind().name(),
                config.optimizer.name()
            )));
        }
        let trainer = Self::assemble(
            config,
            checkpoint.network,
            checkpoint.optimizer,
            bank,
            train,
            test,
            checkpoint.epoch,
            checkpoint.iteration,
        )?;
        Ok((trainer, warning))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        network: Network,
        optimizer: Optimizer,
        bank: Option<&FilterBank>,
        train: &'a LabeledDataset,
        test: Option<&'a LabeledDataset>,
        epoch: usize,
        iteration: u64,
    ) -> Result<Self> {
        config.validate()?;
        let classes = network.spec().class_count()?;
        for (name, d) in std::iter::once(("training", train)).chain(test.map(|t| ("test", t))) {
            if d.images.shape()[1..] != network.spec().input {
                return Err(Error::Data(format!(
                    "{name} images have shape {:?}, network expects {:?}",
                    &d.images.shape()[1..],
                    network.spec().input
                )));
            }
            if d.class_count > classes {
                return Err(Error::Data(format!(
                    "{name} data has {} classes, network predicts {classes}",
                    d.class_count
                )));
            }
        }
        let banks = bank
            .map(|b| BankCache::for_network(b.clone(), &network, &config.reg))
            .transpose()?;
        if banks.is_none() && config.reg.lambda_fbr > 0.0 {
            return Err(Error::Param("lambda_fbr > 0 requires a filter bank".into()));
        }
        Ok(Trainer {
            config,
            network,
            optimizer,
            banks,
            train,
            test,
            epoch,
            iteration,
            log: Vec::new(),
            window: Window::default(),
            best: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn log(&self) -> &[MetricsRow] {
        &self.log
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size)
    }

    /// Network with the lowest test cross-entropy at an epoch end so far.
    pub fn best(&self) -> Option<(f64, &Network)> {
        self.best.as_ref().map(|(ce, n)| (*ce, n))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            iteration: self.iteration,
            config_digest: self.config.digest(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        step_decay(
            self.config.learning_rate,
            self.epoch,
            self.config.step_decay_period,
            self.config.step_decay_factor,
        )
    }

    fn batch_indices(&self, permutation: &[usize], batch: usize) -> Vec<usize> {
        let n = self.train.len();
        let size = self.config.batch_size.min(n);
        match self.config.sampling {
            Sampling::Epoch => {
                let start = batch * self.config.batch_size;
                permutation[start..(start + self.config.batch_size).min(n)].to_vec()
            }
            Sampling::Random => {
                let mut r = rng::stream(self.config.seed, &[0xba7c, self.epoch as u64, batch as u64]);
                rand::seq::index::sample(&mut r, n, size).into_vec()
            }
        }
    }

    /// One iteration: penalties on the current weights, then the batch, then
    /// the update.
    fn step(&mut self, indices: &[usize], batch: usize, lr: f64) -> Result<Snapshot> {
        let t = self.iteration;
        let reg = total_regularized_loss(0.0, &self.network, self.banks.as_ref(), &self.config.reg)
            .map_err(|e| tag_iteration(e, t))?;

        let mut x = self.train.images.select(indices);
        if !self.config.augment.is_identity() {
            let mut r = rng::stream(self.config.seed, &[0xa06e, self.epoch as u64, batch as u64]);
            x = augment_batch(&x, &self.config.augment, &mut r);
        }
        let labels: Vec<usize> = indices.iter().map(|&i| self.train.labels[i]).collect();
        let (batch_loss, mut grads) = if self.config.classification_loss {
            self.network.loss_and_grads(&x, &labels).map_err(|e| tag_iteration(e, t))?
        } else {
            let logits = self.network.forward(&x).map_err(|e| tag_iteration(e, t))?;
            (softmax_xent(&logits, &labels)?.0, NetworkGrads::zeros_like(&self.network))
        };
        let total = batch_loss + reg.fbr_term + reg.ortho_term + reg.decay_term;
        if !total.is_finite() {
            return Err(numeric("loss", t));
        }
        reg.accumulate_into(&mut grads);
        if !grads.is_finite() {
            return Err(numeric("gradient", t));
        }
        self.optimizer.step(&mut self.network, &grads, lr)?;
        if self.network.params().iter().any(|p| !p.is_finite()) {
            return Err(numeric("parameters after update", t));
        }
        self.window.sum += batch_loss;
        self.window.count += 1;
        self.iteration += 1;
        Ok(Snapshot {
            fbr_term: reg.fbr_term,
            ortho_term: reg.ortho_term,
            decay_term: reg.decay_term,
            mean_match_distance: reg.assignment.as_ref().map(|a| a.mean_distance()),
            match_entropy: reg.assignment.as_ref().map(|a| a.index_entropy()),
        })
    }

    fn emit(&mut self, snap: &Snapshot, lr: f64, epoch_end: bool) -> Result<()> {
        let (test_ce, test_accuracy) = match self.test {
            Some(d) => {
                let (ce, acc) = evaluate(&self.network, d).map_err(|e| tag_iteration(e, self.iteration - 1))?;
                (Some(ce), Some(acc))
            }
            None => (None, None),
        };
        if epoch_end {
            if let Some(ce) = test_ce {
                if self.best.as_ref().is_none_or(|(b, _)| ce < *b) {
                    self.best = Some((ce, self.network.clone()));
                }
            }
        }
        let w = std::mem::take(&mut self.window);
        self.log.push(MetricsRow {
            epoch: self.epoch,
            iteration: self.iteration - 1,
            train_ce: w.sum / w.count as f64,
            fbr_term: snap.fbr_term,
            ortho_term: snap.ortho_term,
            decay_term: snap.decay_term,
            test_ce,
            test_accuracy,
            learning_rate: lr,
            mean_match_distance: snap.mean_match_distance,
            match_histogram_entropy: snap.match_entropy,
        });
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let lr = self.learning_rate();
        let mut permutation: Vec<usize> = (0..self.train.len()).collect();
        if self.config.sampling == Sampling::Epoch {
            permutation.shuffle(&mut rng::stream(self.config.seed, &[0xe90c, self.epoch as u64]));
        }
        let batches = self.iterations_per_epoch();
        for b in 0..batches {
            let indices = self.batch_indices(&permutation, b);
            let snap = self.step(&indices, b, lr)?;
            let at_eval = self.config.eval_every > 0 && self.iteration.is_multiple_of(self.config.eval_every);
            let epoch_end = b + 1 == batches;
            if at_eval || epoch_end {
                self.emit(&snap, lr, epoch_end)?;
            }
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }
}

/// Trains a fresh run and returns the final network with its metrics log.
pub fn train(
    config: &TrainConfig,
    network: Network,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    bank: Option<&FilterBank>,
) -> Result<(Network, Vec<MetricsRow>)> {
    let mut trainer = Trainer::new(config.clone(), network, bank, train, test)?;
    trainer.run()?;
    let log = trainer.log.clone();
    Ok((trainer.into_network(), log))
}

/// Message for a checkpoint whose recorded digest differs from `config`'s.
pub fn digest_warning(checkpoint: &Checkpoint, config: &TrainConfig) -> Option<String> {
    (checkpoint.config_digest != config.digest())
        .then(|| "checkpoint was written under a different training configuration".to_string())
}
