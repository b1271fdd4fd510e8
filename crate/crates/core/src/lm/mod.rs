//! A small LSTM language model with hand-written backpropagation.
//!
//! Parameters live in one flat `f64` vector so that client updates,
//! clipping, noise and server optimizers all operate on plain slices. The
//! layout is, in order:
//!
//! | block        | shape                         |
//! |--------------|-------------------------------|
//! | embedding    | `vocab × embed`               |
//! | layer `l` W  | `4·hidden × (in_l + hidden)`  |
//! | layer `l` b  | `4·hidden`                    |
//! | projection   | `embed × hidden`              |
//! | output bias  | `vocab`                       |
//!
//! Gates are stacked `[input, forget, cell, output]`. The output layer is tied
//! to the embedding: `logits = E · (P · h_top) + bias`, so remapping the
//! embedding rows updates both ends of the model at once.

mod lstm;
mod sample;
mod train;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from;
use crate::{Error, Result};

pub use lstm::{backward, forward_log_probs, forward_nll, loss_and_gradient, LstmState};
pub use sample::{sample_sentence, sample_tokens};
pub use train::{local_train, local_train_encoded, prepare_sequences, LocalConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.num_layers == 0
            || self.max_seq_len < 2
        {
            return Err(Error::InvalidArgument(format!(
                "all LmConfig sizes must be positive (max_seq_len >= 2): {self:?}"
            )));
        }
        Ok(())
    }

    pub fn with_vocab(self, vocab_size: usize) -> Self {
        LmConfig { vocab_size, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerLayout {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub in_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub embedding: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub proj: Range<usize>,
    pub out_bias: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &LmConfig) -> Self {
        let (v, e, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim);
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let embedding = take(v * e);
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let in_dim = if l == 0 { e } else { h };
                LayerLayout {
                    w: take(4 * h * (in_dim + h)),
                    b: take(4 * h),
                    in_dim,
                }
            })
            .collect();
        let proj = take(e * h);
        let out_bias = take(v);
        Layout {
            embedding,
            layers,
            proj,
            out_bias,
            total: off,
        }
    }
}

/// Model parameters: a config plus one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    cfg: LmConfig,
    pub(crate) layout: Layout,
    data: Vec<f64>,
}

impl LmParams {
    pub fn zeros(cfg: LmConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let data = vec![0.0; layout.total];
        Ok(LmParams { cfg, layout, data })
    }

    /// Uniform in `[-1/sqrt(hidden), 1/sqrt(hidden)]`, output bias zero.
    pub fn init(cfg: LmConfig, seed: u64) -> Result<Self> {
        let mut p = LmParams::zeros(cfg)?;
        let bound = 1.0 / (cfg.hidden_dim as f64).sqrt();
        let mut rng = rng_from(seed, &[0x1417]);
        let bias = p.layout.out_bias.clone();
        for (i, x) in p.data.iter_mut().enumerate() {
            if !bias.contains(&i) {
                *x = rng.random_range(-bound..=bound);
            }
        }
        Ok(p)
    }

    pub fn from_flat(cfg: LmConfig, data: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if data.len() != layout.total {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters for {cfg:?}, got {}",
                layout.total,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(LmParams { cfg, layout, data })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn embedding(&self) -> &[f64] {
        &self.data[self.layout.embedding.clone()]
    }

    pub fn embedding_row(&self, token: usize) -> &[f64] {
        let e = self.cfg.embed_dim;
        &self.embedding()[token * e..(token + 1) * e]
    }

    pub fn output_bias(&self) -> &[f64] {
        &self.data[self.layout.out_bias.clone()]
    }

    /// Everything except the embedding and output bias.
    pub fn core_weights(&self) -> &[f64] {
        &self.data[self.layout.embedding.end..self.layout.out_bias.start]
    }

    /// Same core weights with a different vocabulary-sized embedding and bias.
    pub fn with_vocab_blocks(&self, embedding: Vec<f64>, output_bias: Vec<f64>) -> Result<Self> {
        let e = self.cfg.embed_dim;
        let v = output_bias.len();
        if embedding.len() != v * e {
            return Err(Error::DimensionMismatch(format!(
                "embedding has {} entries, expected {v} x {e}",
                embedding.len()
            )));
        }
        let cfg = self.cfg.with_vocab(v);
        let mut data = embedding;
        data.extend_from_slice(self.core_weights());
        data.extend_from_slice(&output_bias);
        LmParams::from_flat(cfg, data)
    }

    pub fn add_scaled(&mut self, scale: f64, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::DimensionMismatch(format!(
                "delta has {} entries, model has {}",
                delta.len(),
                self.data.len()
            )));
        }
        for (p, d) in self.data.iter_mut().zip(delta) {
            *p += scale * d;
        }
        Ok(())
    }
}

/// A flat vector aligned with [`LmParams`], with its L2 norm cached.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    norm: f64,
}

impl GradientVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        let norm = l2_norm(&values);
        GradientVector { values, norm }
    }

    pub fn zeros(len: usize) -> Self {
        GradientVector {
            values: vec![0.0; len],
            norm: 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn scale(&mut self, factor: f64) {
        self.update(|v| v.iter_mut().for_each(|x| *x *= factor));
    }

    pub fn add_assign(&mut self, other: &GradientVector) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "cannot add vectors of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        self.update(|v| v.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b));
        Ok(())
    }

    /// Mutates the entries and refreshes the cached norm.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.values);
        self.norm = l2_norm(&self.values);
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
