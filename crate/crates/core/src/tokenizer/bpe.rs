//! Byte-level BPE training.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};

use super::{pieces, Specials, TokenId, Tokenizer, TokenizerKind, BOS_SURFACE, BPE_MIN_VOCAB, EOS_SURFACE};
use crate::{Error, Result};

/// A pair needs at least this many occurrences to become a merge.
pub const MIN_PAIR_FREQUENCY: i64 = 2;

type Pair = (TokenId, TokenId);

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: Pair,
}

impl Ord for Candidate {
    // Max-heap order: highest count, then lexicographically smallest (left, right).
    fn cmp(&self, other: &Self) -> Ordering {
        (self.count, Reverse(&self.left), Reverse(&self.right)).cmp(&(
            other.count,
            Reverse(&other.left),
            Reverse(&other.right),
        ))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Trains a byte-level BPE tokenizer with at most `vocab_size` tokens.
///
/// Ids 0 and 1 are BOS and EOS, ids 2..258 are the 256 bytes, and merged
/// tokens follow in merge order. Merging stops when the vocabulary is full
/// or the most frequent pair occurs fewer than [`MIN_PAIR_FREQUENCY`] times.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Tokenizer> {
    if vocab_size < BPE_MIN_VOCAB {
        return Err(Error::InvalidArgument(format!(
            "BPE vocab_size must be at least {BPE_MIN_VOCAB}, got {vocab_size}"
        )));
    }
    let mut piece_counts: HashMap<&str, i64> = HashMap::new();
    for s in corpus {
        for (piece, _) in pieces(s.as_ref()) {
            *piece_counts.entry(piece).or_default() += 1;
        }
    }
    if piece_counts.is_empty() {
        return Err(Error::InvalidArgument("cannot train BPE on an empty corpus".into()));
    }

    let mut tokens: Vec<Vec<u8>> = vec![BOS_SURFACE.as_bytes().to_vec(), EOS_SURFACE.as_bytes().to_vec()];
    tokens.extend((0..=255u8).map(|b| vec![b]));
    let mut index: HashMap<Vec<u8>, TokenId> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as TokenId))
        .collect();
    let specials = Specials {
        bos: 0,
        eos: 1,
        oov: None,
    };

    let mut entries: Vec<(&str, i64)> = piece_counts.into_iter().collect();
    entries.sort_unstable();
    let mut words: Vec<(Vec<TokenId>, i64)> = entries
        .into_iter()
        .map(|(p, c)| (p.bytes().map(|b| b as TokenId + 2).collect(), c))
        .collect();

    let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
    let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, (syms, count)) in words.iter().enumerate() {
        for w in syms.windows(2) {
            let p = (w[0], w[1]);
            *pair_counts.entry(p).or_default() += count;
            where_.entry(p).or_default().insert(wi);
        }
    }

    let candidate = |p: Pair, count: i64, tokens: &[Vec<u8>]| Candidate {
        count,
        left: tokens[p.0 as usize].clone(),
        right: tokens[p.1 as usize].clone(),
        pair: p,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts.iter().map(|(&p, &c)| candidate(p, c, &tokens)).collect();

    let mut merges: Vec<Pair> = Vec::new();
    let mut forbidden: HashSet<Pair> = HashSet::new();
    while tokens.len() < vocab_size {
        let Some(top) = heap.pop() else { break };
        let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count || forbidden.contains(&top.pair) {
            continue;
        }
        if current < MIN_PAIR_FREQUENCY {
            break;
        }
        let mut joined = top.left.clone();
        joined.extend_from_slice(&top.right);
        if joined == BOS_SURFACE.as_bytes() || joined == EOS_SURFACE.as_bytes() {
            forbidden.insert(top.pair);
            continue;
        }
        let merged = match index.get(&joined) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as TokenId;
                index.insert(joined.clone(), id);
                tokens.push(joined);
                id
            }
        };
        merges.push(top.pair);

        let mut affected: Vec<usize> = where_.remove(&top.pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        let mut changed: HashSet<Pair> = HashSet::new();
        for wi in affected {
            let (syms, count) = &mut words[wi];
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.get_mut(&p).expect("counted") -= *count;
                changed.insert(p);
            }
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == top.pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            *syms = next;
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_default() += *count;
                where_.entry(p).or_default().insert(wi);
                changed.insert(p);
            }
        }
        let mut changed: Vec<Pair> = changed.into_iter().collect();
        changed.sort_unstable();
        for p in changed {
            let c = pair_counts[&p];
            if c > 0 && p != top.pair {
                heap.push(candidate(p, c, &tokens));
            }
        }
        pair_counts.remove(&top.pair);
    }

    Tokenizer::from_parts(TokenizerKind::Bpe, tokens, merges, specials)
}
