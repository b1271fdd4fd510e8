//! Replacing a model's tokenizer without touching user data.
//!
//! The model trained under the public tokenizer is sampled to build a
//! synthetic corpus, a new BPE tokenizer is trained on that corpus, and each
//! new token's embedding (and output bias) is set to the mean of the old
//! embeddings of the tokens its surface splits into under the old tokenizer.
//! Everything here reads only model parameters and tokenizers, so the
//! result is post-processing of the private model.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::lm::{sample_sentence, LmParams};
use crate::rng::rng_from;
use crate::tokenizer::{train_bpe, TokenId, Tokenizer, TokenizerKind};
use crate::{Error, Result};

const SAMPLE_TAG: u64 = 0x5a3b1e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub corpus_size: usize,
    pub l_max: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.corpus_size == 0 || self.l_max == 0 {
            return Err(Error::InvalidArgument(format!(
                "sampling needs corpus_size >= 1 and l_max >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Draws `cfg.corpus_size` sentences from the model. Sentence `i` uses its
/// own stream derived from `(seed, i)`, so the corpus does not depend on
/// thread scheduling. Line breaks inside a sample become spaces.
pub fn generate_corpus(params: &LmParams, tok: &Tokenizer, cfg: &SamplingConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    if params.config().vocab_size != tok.vocab_size() {
        return Err(Error::DimensionMismatch(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            params.config().vocab_size,
            tok.vocab_size()
        )));
    }
    (0..cfg.corpus_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from(cfg.seed, &[SAMPLE_TAG, i as u64]);
            let s = sample_sentence(params, tok, cfg.l_max, &mut rng)?;
            Ok(s.replace(['\n', '\r'], " "))
        })
        .collect()
}

/// SHA-256 of the corpus as written by [`write_corpus`].
pub fn corpus_hash<S: AsRef<str>>(corpus: &[S]) -> String {
    let mut h = Sha256::new();
    for s in corpus {
        h.update(s.as_ref().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn write_corpus<S: AsRef<str>>(path: &Path, corpus: &[S]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in corpus {
        writeln!(w, "{}", s.as_ref()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a corpus written by [`write_corpus`], one sentence per line.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Sparse `new × old` matrix. Row `i` lists the old tokens that new token
/// `i` splits into, with repetition; every occurrence carries weight
/// `1 / row.len()`, so a repeated token accumulates its share.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemapMatrix {
    old_size: usize,
    rows: Vec<Vec<TokenId>>,
}

impl RemapMatrix {
    pub fn from_rows(old_size: usize, rows: Vec<Vec<TokenId>>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::Invariant(format!("new token {i} has no constituents")));
            }
            if let Some(&bad) = r.iter().find(|&&j| j as usize >= old_size) {
                return Err(Error::TokenOutOfRange {
                    id: bad,
                    vocab_size: old_size,
                });
            }
        }
        Ok(RemapMatrix { old_size, rows })
    }

    pub fn new_size(&self) -> usize {
        self.rows.len()
    }

    pub fn old_size(&self) -> usize {
        self.old_size
    }

    pub fn constituents(&self, new_id: usize) -> &[TokenId] {
        &self.rows[new_id]
    }

    /// `(old_id, weight)` pairs of one row, one per occurrence.
    pub fn row(&self, new_id: usize) -> Vec<(TokenId, f64)> {
        let r = &self.rows[new_id];
        let w = 1.0 / r.len() as f64;
        r.iter().map(|&j| (j, w)).collect()
    }

    /// `{new_id: [[old_id, weight], ...]}`.
    pub fn to_json(&self) -> String {
        let m: BTreeMap<usize, Vec<(TokenId, f64)>> = (0..self.rows.len()).map(|i| (i, self.row(i))).collect();
        serde_json::to_string(&m).expect("remap serializes")
    }
}

/// Splits every token of `new` into tokens of `old` by encoding its surface.
/// BOS and EOS map to their old counterparts.
pub fn build_remap(old: &Tokenizer, new: &Tokenizer) -> Result<RemapMatrix> {
    if new.kind() != TokenizerKind::Bpe {
        return Err(Error::InvalidArgument("the replacement tokenizer must be BPE".into()));
    }
    let rows = (0..new.vocab_size() as TokenId)
        .map(|id| {
            if id == new.bos() {
                return Ok(vec![old.bos()]);
            }
            if id == new.eos() {
                return Ok(vec![old.eos()]);
            }
            let parts = old.encode_surface(new.surface(id)?);
            if parts.is_empty() {
                return Err(Error::Invariant(format!("token {id} has an empty surface")));
            }
            Ok(parts)
        })
        .collect::<Result<Vec<_>>>()?;
    RemapMatrix::from_rows(old.vocab_size(), rows)
}

/// Rewrites the embedding and output bias through `map`; all other
/// parameters are copied unchanged.
pub fn apply_remap(params: &LmParams, map: &RemapMatrix) -> Result<LmParams> {
    let v_old = params.config().vocab_size;
    if map.old_size() != v_old {
        return Err(Error::DimensionMismatch(format!(
            "remap expects {} old tokens, model has {v_old}",
            map.old_size()
        )));
    }
    let e = params.config().embed_dim;
    let bias = params.output_bias();
    let mut embedding = vec![0.0; map.new_size() * e];
    let mut out_bias = vec![0.0; map.new_size()];
    for (i, row) in embedding.chunks_mut(e).enumerate() {
        let parts = map.constituents(i);
        if let [only] = parts {
            row.copy_from_slice(params.embedding_row(*only as usize));
            out_bias[i] = bias[*only as usize];
            continue;
        }
        let w = 1.0 / parts.len() as f64;
        for &j in parts {
            for (r, x) in row.iter_mut().zip(params.embedding_row(j as usize)) {
                *r += w * x;
            }
            out_bias[i] += w * bias[j as usize];
        }
    }
    params.with_vocab_blocks(embedding, out_bias)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub sampling: SamplingConfig,
    /// Vocabulary size of the new BPE tokenizer.
    pub vocab_size: usize,
}

#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub params: LmParams,
    pub tokenizer: Tokenizer,
    pub remap: RemapMatrix,
    pub corpus: Vec<String>,
    pub corpus_hash: String,
}

/// Samples a corpus from the model, trains a BPE tokenizer on it and
/// remaps the model onto that tokenizer. Takes no user data.
pub fn update(params: &LmParams, old: &Tokenizer, cfg: &UpdateConfig) -> Result<UpdateOutcome> {
    let corpus = generate_corpus(params, old, &cfg.sampling)?;
    update_with_corpus(params, old, corpus, cfg.vocab_size)
}

/// [`update`] with a previously sampled corpus instead of fresh samples.
pub fn update_with_corpus(
    params: &LmParams,
    old: &Tokenizer,
    corpus: Vec<String>,
    vocab_size: usize,
) -> Result<UpdateOutcome> {
    let tokenizer = retrain(&corpus, vocab_size)?;
    let remap = build_remap(old, &tokenizer)?;
    let params = apply_remap(params, &remap)?;
    log::info!(
        "tokenizer update: {} sampled sentences, {} -> {} tokens",
        corpus.len(),
        old.vocab_size(),
        tokenizer.vocab_size()
    );
    Ok(UpdateOutcome {
        params,
        tokenizer,
        remap,
        corpus_hash: corpus_hash(&corpus),
        corpus,
    })
}

fn retrain(corpus: &[String], vocab_size: usize) -> Result<Tokenizer> {
    if corpus.iter().all(|s| s.trim().is_empty()) {
        // A model that only ever emits EOS still gets a byte-level tokenizer.
        return train_bpe(&[" "], vocab_size);
    }
    train_bpe(corpus, vocab_size)
}
