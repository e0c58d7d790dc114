//! Unsupervised model selection for domain adaptation.
//!
//! The crate scores candidate checkpoints using only their predictions on
//! unlabeled target data. The main criterion is soft neighborhood density
//! ([`snd`]): the mean entropy of each target sample's temperature-softmaxed
//! similarity distribution over the other target samples. Higher is better.
//! Class-output entropy, source risk, IWV and DEV are provided as baselines.
//!
//! - [`feature_store`]: binary/CSV dumps, labels and experiment manifests.
//! - [`snd`]: the blocked density kernel, its dense reference and the
//!   segmentation subsampling variant.
//! - [`baselines`]: comparison criteria and the domain discriminator.
//! - [`selection`]: scoring manifests, picking winners, writing reports.
//! - [`toy`]: Gaussian toy experiments with a small domain-adversarial network.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod feature_store;
pub mod selection;
pub mod snd;
pub mod stats;
pub mod toy;

pub use error::{Error, Result};
