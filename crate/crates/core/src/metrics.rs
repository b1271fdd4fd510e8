//! Tokenizer-independent evaluation: per-word perplexity, per-word accuracy
//! and unigram KL divergence between corpora.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lm::{LmParams, LstmState};
use crate::tokenizer::{Tokenizer, TokenizerKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct SentenceScore {
    nll: f64,
    words: usize,
    correct: usize,
}

/// Teacher-forced pass over one sentence: total NLL of every target
/// (including EOS), the number of words, and how many words had every
/// token predicted by argmax.
fn score_sentence(params: &LmParams, tok: &Tokenizer, sentence: &str) -> Result<SentenceScore> {
    let enc = tok.encode_with_words(sentence);
    let ids = enc.seq.ids();
    let mut state = LstmState::new(params);
    let mut nll = 0.0;
    // hit[k]: argmax at step k equals target ids[k + 1].
    let mut hit = Vec::with_capacity(ids.len() - 1);
    for k in 0..ids.len() - 1 {
        let lp = state.step(params, ids[k])?;
        let target = ids[k + 1] as usize;
        nll -= lp[target];
        let best = lp
            .iter()
            .enumerate()
            .fold(
                (0usize, f64::NEG_INFINITY),
                |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc },
            )
            .0;
        hit.push(best == target);
    }
    let oov = tok.specials().oov;
    let correct = enc
        .words
        .iter()
        .filter(|span| {
            let reference_oov = (*span).clone().any(|p| Some(ids[p]) == oov);
            !reference_oov && (*span).clone().all(|p| hit[p - 1])
        })
        .count();
    Ok(SentenceScore {
        nll,
        words: enc.words.len(),
        correct,
    })
}

fn score_corpus<S: AsRef<str> + Sync>(params: &LmParams, tok: &Tokenizer, corpus: &[S]) -> Result<SentenceScore> {
    if params.config().vocab_size != tok.vocab_size() {
        return Err(Error::DimensionMismatch(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            params.config().vocab_size,
            tok.vocab_size()
        )));
    }
    let scores = corpus
        .par_iter()
        .map(|s| score_sentence(params, tok, s.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().fold(SentenceScore::default(), |a, s| SentenceScore {
        nll: a.nll + s.nll,
        words: a.words + s.words,
        correct: a.correct + s.correct,
    }))
}

/// `exp(total NLL / total words)` over the whole corpus.
pub fn perplexity_per_word<S: AsRef<str> + Sync>(params: &LmParams, tok: &Tokenizer, corpus: &[S]) -> Result<f64> {
    let s = score_corpus(params, tok, corpus)?;
    if s.words == 0 {
        return Err(Error::InvalidArgument("perplexity of a corpus with no words".into()));
    }
    Ok((s.nll / s.words as f64).exp())
}

/// Share of words whose every token is the teacher-forced argmax. Returns 0
/// for a corpus without words.
pub fn word_accuracy<S: AsRef<str> + Sync>(params: &LmParams, tok: &Tokenizer, corpus: &[S]) -> Result<f64> {
    let s = score_corpus(params, tok, corpus)?;
    Ok(if s.words == 0 {
        0.0
    } else {
        s.correct as f64 / s.words as f64
    })
}

fn word_counts<S: AsRef<str>>(corpus: &[S]) -> HashMap<&str, u64> {
    let mut counts = HashMap::new();
    for s in corpus {
        for w in s.as_ref().split_whitespace() {
            *counts.entry(w).or_insert(0u64) += 1;
        }
    }
    counts
}

/// `D(p ‖ q)` in nats, where `p` and `q` are add-one smoothed unigram
/// frequencies over the `top_k` most frequent reference words.
pub fn unigram_kld<R: AsRef<str>, C: AsRef<str>>(reference: &[R], candidate: &[C], top_k: usize) -> Result<f64> {
    let ref_counts = word_counts(reference);
    if ref_counts.is_empty() || top_k == 0 {
        return Err(Error::InvalidArgument(
            "KLD needs a non-empty reference and top_k >= 1".into(),
        ));
    }
    let mut support: Vec<(&str, u64)> = ref_counts.iter().map(|(&w, &c)| (w, c)).collect();
    support.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    support.truncate(top_k);
    let cand_counts = word_counts(candidate);
    let p: Vec<f64> = support.iter().map(|&(_, c)| c as f64 + 1.0).collect();
    let q: Vec<f64> = support
        .iter()
        .map(|(w, _)| cand_counts.get(w).copied().unwrap_or(0) as f64 + 1.0)
        .collect();
    let (zp, zq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
    let d = p
        .iter()
        .zip(&q)
        .map(|(a, b)| {
            let (a, b) = (a / zp, b / zq);
            a * (a / b).ln()
        })
        .sum::<f64>();
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub perplexity_per_word: f64,
    pub word_accuracy: f64,
    pub oov_rate: Option<f64>,
    pub tokens_per_word: f64,
    pub kld: Option<f64>,
}

/// Perplexity, accuracy, OOV rate (word-level only) and tokens per word in
/// a single pass over the model.
pub fn evaluate<S: AsRef<str> + Sync>(params: &LmParams, tok: &Tokenizer, corpus: &[S]) -> Result<MetricsReport> {
    let s = score_corpus(params, tok, corpus)?;
    if s.words == 0 {
        return Err(Error::InvalidArgument("evaluation corpus has no words".into()));
    }
    let oov_rate = match tok.kind() {
        TokenizerKind::WordLevel => Some(tok.oov_rate(corpus)?),
        TokenizerKind::Bpe => None,
    };
    Ok(MetricsReport {
        perplexity_per_word: (s.nll / s.words as f64).exp(),
        word_accuracy: s.correct as f64 / s.words as f64,
        oov_rate,
        tokens_per_word: tok.tokens_per_word(corpus)?,
        kld: None,
    })
}
