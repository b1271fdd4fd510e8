//! Word-level and byte-level BPE tokenizers.
//!
//! Both kinds wrap every sentence in `BOS ... EOS`. Words are maximal runs of
//! non-whitespace characters, the same definition used by
//! [`crate::corpus::word_count`] and every metric.
//!
//! The BPE tokenizer pre-tokenizes a sentence into *pieces*: a run of
//! whitespace followed by a run of non-whitespace (`"hello  covid"` becomes
//! `["hello", "  covid"]`). Merges never cross a piece, so they never cross a
//! word boundary, and because the whitespace travels with the word the
//! encoding is lossless for every string.

mod bpe;
mod escape;
mod word;

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub use bpe::train_bpe;
pub use escape::{escape_bytes, unescape_bytes};
pub use word::train_word_level;

pub type TokenId = u32;

pub const BOS_SURFACE: &str = "<bos>";
pub const EOS_SURFACE: &str = "<eos>";
pub const OOV_SURFACE: &str = "<unk>";
/// What an out-of-vocabulary word decodes to.
pub const UNK_LITERAL: &str = "⟨unk⟩";

/// Number of special tokens in a BPE vocabulary (BOS, EOS).
pub const BPE_SPECIALS: usize = 2;
/// Number of special tokens in a word-level vocabulary (BOS, EOS, OOV).
pub const WORD_SPECIALS: usize = 3;
/// Smallest BPE vocabulary: specials plus one token per byte.
pub const BPE_MIN_VOCAB: usize = 256 + BPE_SPECIALS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenizerKind {
    #[serde(rename = "word")]
    WordLevel,
    #[serde(rename = "bpe")]
    Bpe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub bos: TokenId,
    pub eos: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oov: Option<TokenId>,
}

/// A token sequence as fed to the language model.
///
/// Sequences produced by [`Tokenizer::encode`] start with BOS and end with EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// An encoded sentence together with the token span of every word.
///
/// Spans index into `seq` (so they never include position 0, the BOS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub seq: TokenSeq,
    pub words: Vec<Range<usize>>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    kind: TokenizerKind,
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, TokenId>,
    merges: Vec<(TokenId, TokenId)>,
    /// pair -> (rank, merged token)
    merge_lookup: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    byte_ids: Vec<TokenId>,
    specials: Specials,
}

/// On-disk form: `{"kind", "vocab": {token: id}, "merges": [[l, r]], "specials"}`.
#[derive(Debug, Serialize, Deserialize)]
struct TokenizerFile {
    kind: TokenizerKind,
    vocab: BTreeMap<String, TokenId>,
    merges: Vec<(String, String)>,
    specials: Specials,
}

impl Tokenizer {
    /// Builds a tokenizer from its parts, validating every structural
    /// invariant. `merges` must be in application order.
    pub fn from_parts(
        kind: TokenizerKind,
        tokens: Vec<Vec<u8>>,
        merges: Vec<(TokenId, TokenId)>,
        specials: Specials,
    ) -> Result<Self> {
        let n = tokens.len();
        let mut index = HashMap::with_capacity(n);
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id as TokenId).is_some() {
                return Err(Error::InvalidTokenizer(format!(
                    "duplicate token {:?}",
                    escape_bytes(t)
                )));
            }
        }
        let in_range = |id: TokenId| (id as usize) < n;
        if !in_range(specials.bos) || !in_range(specials.eos) || specials.bos == specials.eos {
            return Err(Error::InvalidTokenizer("bad BOS/EOS ids".into()));
        }
        let mut byte_ids = Vec::new();
        match kind {
            TokenizerKind::WordLevel => {
                match specials.oov {
                    Some(oov) if in_range(oov) && oov != specials.bos && oov != specials.eos => {}
                    _ => {
                        return Err(Error::InvalidTokenizer(
                            "word-level tokenizer needs a distinct OOV id".into(),
                        ))
                    }
                }
                if !merges.is_empty() {
                    return Err(Error::InvalidTokenizer(
                        "word-level tokenizer cannot have merges".into(),
                    ));
                }
            }
            TokenizerKind::Bpe => {
                if specials.oov.is_some() {
                    return Err(Error::InvalidTokenizer("BPE tokenizer has no OOV".into()));
                }
                for b in 0..=255u8 {
                    let id = *index
                        .get(&[b][..])
                        .ok_or_else(|| Error::InvalidTokenizer(format!("missing base token for byte {b:#04x}")))?;
                    if id == specials.bos || id == specials.eos {
                        return Err(Error::InvalidTokenizer("byte token is special".into()));
                    }
                    byte_ids.push(id);
                }
            }
        }

        let mut available = vec![false; n];
        for &id in &byte_ids {
            available[id as usize] = true;
        }
        let mut merge_lookup = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            if !in_range(l) || !in_range(r) || !available[l as usize] || !available[r as usize] {
                return Err(Error::InvalidTokenizer(format!(
                    "merge {rank} uses a token not built by earlier merges"
                )));
            }
            let mut joined = tokens[l as usize].clone();
            joined.extend_from_slice(&tokens[r as usize]);
            let merged = *index
                .get(&joined)
                .ok_or_else(|| Error::InvalidTokenizer(format!("merge {rank} result is not in the vocabulary")))?;
            if merge_lookup.insert((l, r), (rank, merged)).is_some() {
                return Err(Error::InvalidTokenizer(format!("merge {rank} is repeated")));
            }
            available[merged as usize] = true;
        }

        Ok(Tokenizer {
            kind,
            tokens,
            index,
            merges,
            merge_lookup,
            byte_ids,
            specials,
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn bos(&self) -> TokenId {
        self.specials.bos
    }

    pub fn eos(&self) -> TokenId {
        self.specials.eos
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.specials.bos || id == self.specials.eos || Some(id) == self.specials.oov
    }

    /// Raw surface bytes of a token.
    pub fn surface(&self, id: TokenId) -> Result<&[u8]> {
        self.tokens
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    pub fn token_id(&self, surface: &[u8]) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn encode(&self, sentence: &str) -> TokenSeq {
        self.encode_with_words(sentence).seq
    }

    /// Encodes a sentence and records which positions belong to each word.
    pub fn encode_with_words(&self, sentence: &str) -> Encoding {
        let mut ids = vec![self.specials.bos];
        let mut words = Vec::new();
        match self.kind {
            TokenizerKind::WordLevel => {
                let oov = self.specials.oov.expect("validated");
                for w in sentence.split_whitespace() {
                    words.push(ids.len()..ids.len() + 1);
                    ids.push(self.index.get(w.as_bytes()).copied().unwrap_or(oov));
                }
            }
            TokenizerKind::Bpe => {
                for (piece, has_word) in pieces(sentence) {
                    let start = ids.len();
                    self.apply_merges(piece.as_bytes(), &mut ids);
                    if has_word {
                        words.push(start..ids.len());
                    }
                }
            }
        }
        ids.push(self.specials.eos);
        Encoding {
            seq: TokenSeq(ids),
            words,
        }
    }

    /// Encodes a raw surface string without pre-tokenization or specials.
    ///
    /// For BPE this runs the merge table over the bytes directly; for
    /// word-level it looks up the whitespace-trimmed string.
    pub fn encode_surface(&self, surface: &[u8]) -> Vec<TokenId> {
        match self.kind {
            TokenizerKind::Bpe => {
                let mut out = Vec::new();
                self.apply_merges(surface, &mut out);
                out
            }
            TokenizerKind::WordLevel => {
                let text = String::from_utf8_lossy(surface);
                text.split_whitespace()
                    .map(|w| {
                        self.index
                            .get(w.as_bytes())
                            .copied()
                            .unwrap_or(self.specials.oov.expect("validated"))
                    })
                    .collect()
            }
        }
    }

    /// Applies merges by rank: at every step the adjacent pair with the
    /// lowest merge rank is merged everywhere in the piece.
    fn apply_merges(&self, bytes: &[u8], out: &mut Vec<TokenId>) {
        let mut symbols: Vec<TokenId> = bytes.iter().map(|&b| self.byte_ids[b as usize]).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_lookup.get(&(w[0], w[1])).map(|&m| (m, (w[0], w[1]))))
                .min_by_key(|&((rank, _), _)| rank);
            let Some(((_, merged), pair)) = best else {
                break;
            };
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend_from_slice(&symbols);
    }

    /// Inverse of [`encode`](Self::encode): specials are dropped, and for the
    /// word-level kind an OOV token decodes to [`UNK_LITERAL`].
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        for &id in ids {
            if id as usize >= self.tokens.len() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: self.tokens.len(),
                });
            }
        }
        let body = ids
            .iter()
            .copied()
            .filter(|&id| id != self.specials.bos && id != self.specials.eos);
        Ok(match self.kind {
            TokenizerKind::WordLevel => body
                .map(|id| {
                    if Some(id) == self.specials.oov {
                        UNK_LITERAL.to_string()
                    } else {
                        String::from_utf8_lossy(&self.tokens[id as usize]).into_owned()
                    }
                })
                .collect::<Vec<_>>()
                .join(" "),
            TokenizerKind::Bpe => {
                let bytes: Vec<u8> = body.flat_map(|id| self.tokens[id as usize].iter().copied()).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
        })
    }

    /// Share of word occurrences that map to the OOV token.
    pub fn oov_rate<S: AsRef<str>>(&self, corpus: &[S]) -> Result<f64> {
        let oov = match (self.kind, self.specials.oov) {
            (TokenizerKind::WordLevel, Some(oov)) => oov,
            _ => {
                return Err(Error::InvalidArgument(
                    "oov_rate is only defined for word-level tokenizers".into(),
                ))
            }
        };
        let (mut words, mut unseen) = (0usize, 0usize);
        for s in corpus {
            for w in s.as_ref().split_whitespace() {
                words += 1;
                if self.index.get(w.as_bytes()).is_none_or(|&id| id == oov) {
                    unseen += 1;
                }
            }
        }
        if words == 0 {
            return Err(Error::InvalidArgument("oov_rate of an empty corpus".into()));
        }
        Ok(unseen as f64 / words as f64)
    }

    /// Non-special tokens emitted per word occurrence.
    pub fn tokens_per_word<S: AsRef<str>>(&self, corpus: &[S]) -> Result<f64> {
        let (mut words, mut tokens) = (0usize, 0usize);
        for s in corpus {
            let enc = self.encode_with_words(s.as_ref());
            words += enc.words.len();
            tokens += enc
                .seq
                .ids()
                .iter()
                .filter(|&&id| id != self.specials.bos && id != self.specials.eos)
                .count();
        }
        if words == 0 {
            return Err(Error::InvalidArgument("tokens_per_word of an empty corpus".into()));
        }
        Ok(tokens as f64 / words as f64)
    }

    pub fn to_json(&self) -> String {
        let vocab = self
            .tokens
            .iter()
            .enumerate()
            .map(|(id, t)| (escape_bytes(t), id as TokenId))
            .collect();
        let merges = self
            .merges
            .iter()
            .map(|&(l, r)| {
                (
                    escape_bytes(&self.tokens[l as usize]),
                    escape_bytes(&self.tokens[r as usize]),
                )
            })
            .collect();
        let file = TokenizerFile {
            kind: self.kind,
            vocab,
            merges,
            specials: self.specials,
        };
        serde_json::to_string(&file).expect("tokenizer serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(json)?;
        let n = file.vocab.len();
        let mut tokens: Vec<Option<Vec<u8>>> = vec![None; n];
        for (surface, &id) in &file.vocab {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::InvalidTokenizer(format!("id {id} is not dense in a vocabulary of {n}")))?;
            if slot.is_some() {
                return Err(Error::InvalidTokenizer(format!("id {id} assigned twice")));
            }
            *slot = Some(unescape_bytes(surface)?);
        }
        let tokens: Vec<Vec<u8>> = tokens.into_iter().map(|t| t.expect("dense")).collect();
        let index: HashMap<&[u8], TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_slice(), i as TokenId))
            .collect();
        let mut merges = Vec::with_capacity(file.merges.len());
        for (l, r) in &file.merges {
            let lookup = |s: &str| -> Result<TokenId> {
                let bytes = unescape_bytes(s)?;
                index
                    .get(bytes.as_slice())
                    .copied()
                    .ok_or_else(|| Error::InvalidTokenizer(format!("merge operand {s:?} not in vocabulary")))
            };
            merges.push((lookup(l)?, lookup(r)?));
        }
        Tokenizer::from_parts(file.kind, tokens, merges, file.specials)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Tokenizer::from_json(&json)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Splits a sentence into `(piece, contains_word)` where each piece is a
/// whitespace run followed by a non-whitespace run.
pub fn pieces(s: &str) -> impl Iterator<Item = (&str, bool)> {
    let mut rest = s;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        let ws_end = rest
            .char_indices()
            .find(|(_, c)| !c.is_whitespace())
            .map_or(rest.len(), |(i, _)| i);
        let word_end = rest[ws_end..]
            .char_indices()
            .find(|(_, c)| c.is_whitespace())
            .map_or(rest.len(), |(i, _)| ws_end + i);
        let (piece, tail) = rest.split_at(word_end);
        rest = tail;
        Some((piece, word_end > ws_end))
    })
}
