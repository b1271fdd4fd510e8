//! Ancestral sampling at temperature 1.

use rand::Rng;

use super::{LmParams, LstmState};
use crate::tokenizer::{TokenId, TokenSeq, Tokenizer};
use crate::{Error, Result};

/// Draws tokens after `prefix` until EOS or until `l_max` tokens have been
/// drawn, in which case EOS is appended.
pub fn sample_tokens<R: Rng + ?Sized>(
    params: &LmParams,
    prefix: &[TokenId],
    eos: TokenId,
    l_max: usize,
    rng: &mut R,
) -> Result<TokenSeq> {
    if prefix.is_empty() {
        return Err(Error::InvalidArgument("sampling prefix must start with BOS".into()));
    }
    if l_max == 0 {
        return Err(Error::InvalidArgument("l_max must be at least 1".into()));
    }
    let mut state = LstmState::new(params);
    let mut log_probs = Vec::new();
    for &t in prefix {
        log_probs = state.step(params, t)?;
    }
    let mut ids = prefix.to_vec();
    for drawn in 1..=l_max {
        let next = draw(&log_probs, rng);
        ids.push(next);
        if next == eos {
            return Ok(TokenSeq::from_ids(ids));
        }
        if drawn < l_max {
            log_probs = state.step(params, next)?;
        }
    }
    ids.push(eos);
    Ok(TokenSeq::from_ids(ids))
}

/// Inverse-CDF draw from a log-distribution.
pub(crate) fn draw<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i as TokenId;
        }
    }
    // Rounding left a sliver of mass uncovered: fall back to the last
    // token with non-zero probability.
    log_probs
        .iter()
        .rposition(|lp| lp.is_finite())
        .unwrap_or(log_probs.len() - 1) as TokenId
}

/// Samples one sentence from `[BOS]` and decodes it with `tok`.
pub fn sample_sentence<R: Rng + ?Sized>(
    params: &LmParams,
    tok: &Tokenizer,
    l_max: usize,
    rng: &mut R,
) -> Result<String> {
    let seq = sample_tokens(params, &[tok.bos()], tok.eos(), l_max, rng)?;
    tok.decode(seq.ids())
}
