use std::collections::HashMap;

use super::{Specials, Tokenizer, TokenizerKind, BOS_SURFACE, EOS_SURFACE, OOV_SURFACE, WORD_SPECIALS};
use crate::{Error, Result};

/// Keeps the `vocab_size - 3` most frequent words; ties go to the
/// lexicographically smaller word.
pub fn train_word_level<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Tokenizer> {
    if vocab_size <= WORD_SPECIALS {
        return Err(Error::InvalidArgument(format!(
            "word-level vocab_size must exceed {WORD_SPECIALS}, got {vocab_size}"
        )));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in corpus {
        for w in s.as_ref().split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot train a word-level tokenizer on an empty corpus".into(),
        ));
    }
    let specials_surface = [BOS_SURFACE, EOS_SURFACE, OOV_SURFACE];
    let mut ranked: Vec<(&str, u64)> = counts
        .into_iter()
        .filter(|(w, _)| !specials_surface.contains(w))
        .collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(vocab_size - WORD_SPECIALS);

    let mut tokens: Vec<Vec<u8>> = specials_surface.iter().map(|s| s.as_bytes().to_vec()).collect();
    tokens.extend(ranked.into_iter().map(|(w, _)| w.as_bytes().to_vec()));
    let specials = Specials {
        bos: 0,
        eos: 1,
        oov: Some(2),
    };
    Tokenizer::from_parts(TokenizerKind::WordLevel, tokens, Vec::new(), specials)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_most_frequent_words() {
        let tok = train_word_level(&["a a b"], 4).unwrap();
        assert_eq!(tok.vocab_size(), 4);
        assert!(tok.token_id(b"a").is_some());
        assert!(tok.token_id(b"b").is_none());
    }

    #[test]
    fn ties_go_to_lexicographically_first() {
        let tok = train_word_level(&["a a c b"], 5).unwrap();
        assert!(tok.token_id(b"b").is_some());
        assert!(tok.token_id(b"c").is_none());
    }

    #[test]
    fn full_coverage_means_no_oov() {
        let corpus = ["x y z", "y z"];
        let tok = train_word_level(&corpus, 100).unwrap();
        assert_eq!(tok.oov_rate(&corpus).unwrap(), 0.0);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(train_word_level(&["a"], 3).is_err());
        assert!(train_word_level::<&str>(&[], 10).is_err());
    }
}
