//! `FBCK` files: magic, u32 version, 32-byte config digest, u32 tensor count,
//! then per tensor a u32 name length, the UTF-8 name, a u32 rank, u64 dims
//! and little-endian f64 values.

use std::fs;
use std::path::Path;

use super::optim::{Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const META_NETWORK: &str = "meta.network";
const META_COUNTERS: &str = "meta.counters";
const META_OPTIMIZER: &str = "meta.optimizer";
const MEAN_SQUARE_PREFIX: &str = "optimizer.mean_square.";

/// Everything needed to evaluate a network or continue training it at an
/// epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: u64,
    pub config_digest: [u8; 32],
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let spec = ckpt.network.spec().encode();
    tensors.push((META_NETWORK.into(), vec![spec.len()], spec));
    tensors.push((
        META_COUNTERS.into(),
        vec![2],
        vec![ckpt.epoch as f64, ckpt.iteration as f64],
    ));
    let opt = &ckpt.optimizer;
    let kind = match opt.kind() {
        OptimizerKind::RmsProp => 0.0,
        OptimizerKind::Sgd => 1.0,
    };
    tensors.push((
        META_OPTIMIZER.into(),
        vec![3],
        vec![kind, opt.decay(), opt.updates() as f64],
    ));
    let named = ckpt.network.named_params();
    for (name, t) in &named {
        tensors.push((name.clone(), t.shape().to_vec(), t.data().to_vec()));
    }
    for ((name, _), v) in named.iter().zip(opt.mean_square()) {
        tensors.push((format!("{MEAN_SQUARE_PREFIX}{name}"), v.shape().to_vec(), v.data().to_vec()));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.config_digest);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        push_tensor(&mut out, name, shape, data);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn counter(value: f64, what: &str) -> Result<u64> {
    if value >= 0.0 && value.fract() == 0.0 && value < 2f64.powi(53) {
        Ok(value as u64)
    } else {
        Err(Error::Format(format!("checkpoint {what} is not a counter: {value}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let count = r.u32()? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format(format!("tensor '{name}' has an impossible shape {shape:?}")))?;
        let data: Vec<f64> = r
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
    }

    let mut take = |name: &str| -> Result<Tensor> {
        let i = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))?;
        Ok(tensors.remove(i).1)
    };
    let spec = NetworkSpec::decode(take(META_NETWORK)?.data())?;
    let counters = take(META_COUNTERS)?;
    let opt_meta = take(META_OPTIMIZER)?;
    if counters.len() != 2 || opt_meta.len() != 3 {
        return Err(Error::Format("malformed checkpoint metadata".into()));
    }
    let epoch = counter(counters.data()[0], "epoch")? as usize;
    let iteration = counter(counters.data()[1], "iteration")?;
    let kind = match opt_meta.data()[0] {
        0.0 => OptimizerKind::RmsProp,
        1.0 => OptimizerKind::Sgd,
        other => return Err(Error::Format(format!("unknown optimizer code {other}"))),
    };
    let decay = opt_meta.data()[1];
    let updates = counter(opt_meta.data()[2], "update count")?;

    let template = Network::init(&spec, 0)?;
    let names: Vec<String> = template.named_params().into_iter().map(|(n, _)| n).collect();
    let params = names.iter().map(|n| take(n)).collect::<Result<Vec<_>>>()?;
    let network = Network::from_params(&spec, params)?;
    let mean_square = match kind {
        OptimizerKind::RmsProp => {
            let v = names
                .iter()
                .map(|n| take(&format!("{MEAN_SQUARE_PREFIX}{n}")))
                .collect::<Result<Vec<_>>>()?;
            for (t, p) in v.iter().zip(network.params()) {
                if t.shape() != p.shape() {
                    return Err(Error::Format("optimizer state shape does not match parameters".into()));
                }
            }
            v
        }
        OptimizerKind::Sgd => Vec::new(),
    };
    if let Some((extra, _)) = tensors.first() {
        return Err(Error::Format(format!("unexpected tensor '{extra}'")));
    }
    if network.params().iter().any(|t| !t.is_finite()) {
        return Err(Error::Format("checkpoint holds non-finite parameters".into()));
    }
    Ok(Checkpoint {
        network,
        optimizer: Optimizer::from_parts(kind, decay, mean_square, updates),
        epoch,
        iteration,
        config_digest,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
