//! Client-side SGD.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_gradient, GradientVector, LmParams};
use crate::corpus::UserDataset;
use crate::tokenizer::{TokenSeq, Tokenizer};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            epochs: 1,
            batch_size: 16,
            lr: 0.1,
        }
    }
}

/// Encodes sentences, truncating any sequence longer than `max_len` to its
/// first `max_len - 1` tokens followed by EOS.
pub fn prepare_sequences<S: AsRef<str>>(sentences: &[S], tok: &Tokenizer, max_len: usize) -> Vec<TokenSeq> {
    sentences
        .iter()
        .map(|s| {
            let seq = tok.encode(s.as_ref());
            if seq.len() <= max_len {
                seq
            } else {
                let mut ids = seq.into_ids();
                ids.truncate(max_len - 1);
                ids.push(tok.eos());
                TokenSeq::from_ids(ids)
            }
        })
        .collect()
}

/// Runs local SGD from `params` and returns the model delta
/// (final minus initial parameters) and the mean minibatch loss.
pub fn local_train_encoded<R: Rng + ?Sized>(
    params: &LmParams,
    seqs: &[TokenSeq],
    cfg: &LocalConfig,
    rng: &mut R,
) -> Result<(GradientVector, f64)> {
    let mut local = params.clone();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let (mut loss_sum, mut batches) = (0.0, 0usize);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<TokenSeq> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let (loss, grad) = loss_and_gradient(&local, &batch)?;
            local.add_scaled(-cfg.lr, grad.values())?;
            loss_sum += loss;
            batches += 1;
        }
    }
    let delta: Vec<f64> = local
        .as_slice()
        .iter()
        .zip(params.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    let mean_loss = if batches == 0 { 0.0 } else { loss_sum / batches as f64 };
    Ok((GradientVector::from_vec(delta), mean_loss))
}

/// [`local_train_encoded`] on a raw user dataset.
pub fn local_train<R: Rng + ?Sized>(
    params: &LmParams,
    user: &UserDataset,
    tok: &Tokenizer,
    cfg: &LocalConfig,
    rng: &mut R,
) -> Result<GradientVector> {
    let seqs = prepare_sequences(&user.sentences, tok, params.config().max_seq_len);
    local_train_encoded(params, &seqs, cfg, rng).map(|(d, _)| d)
}
