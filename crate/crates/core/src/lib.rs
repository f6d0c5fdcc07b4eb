//! Filter-bank regularization for small convolutional networks.
//!
//! Kernels of selected convolution layers are pulled towards their nearest
//! member of a fixed bank of hand-crafted filters (Gabor, Leung–Malik, or
//! anything loaded from disk). The crate holds the filter generators, a small
//! CPU network with analytic gradients, the penalties, dataset loaders and
//! the training loop.

pub mod dataio;
pub mod error;
pub mod filterbank;
pub mod nn;
pub mod regularize;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use filterbank::{Family, Filter, FilterBank};
pub use nn::{Network, NetworkSpec};
pub use regularize::{BankCache, MatchAssignment, RegConfig};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, Trainer};
