//! Private federated learning of neural language models with a tokenizer
//! that is retrained from model samples.
//!
//! The pipeline trains a small LSTM language model under differentially
//! private federated averaging using a (possibly stale) public tokenizer,
//! samples a synthetic corpus from the model, trains a new byte-level BPE
//! tokenizer on the samples, remaps the embedding matrix to the new
//! vocabulary and continues training. Because the new tokenizer is a
//! function of the privatized model only, the update costs no privacy
//! budget beyond what training already spent.
//!
//! Module map:
//!
//! - [`corpus`]: user-partitioned corpora, per-user caps, train/test splits.
//! - [`tokenizer`]: word-level and byte-level BPE tokenizers.
//! - [`lm`]: LSTM language model with manual backpropagation and sampling.
//! - [`dp`]: clipping, Gaussian noise and the RDP accountant.
//! - [`fedavg`]: the federated averaging loop with central DP.
//! - [`retokenize`]: sample → train tokenizer → remap embeddings.
//! - [`heavy_hitters`]: local-DP frequency estimation baseline.
//! - [`metrics`]: per-word perplexity, word accuracy and unigram KL.
//! - [`synth`]: synthetic public/private corpora with distribution shift.
//! - [`experiment`]: configuration, protocols and run artifacts.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod corpus;
pub mod dp;
mod error;
pub mod experiment;
pub mod fedavg;
pub mod heavy_hitters;
pub mod lm;
pub mod metrics;
pub mod retokenize;
pub mod rng;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
