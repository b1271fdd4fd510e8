//! Synthetic public/private corpora with a controllable distribution shift.
//!
//! Both corpora draw pseudo-words from a shared lexicon. The public unigram
//! distribution is Zipfian over the shared words. The private one reorders
//! the shared ranks by an amount growing with `shift` and moves a
//! `shift * novel_mass` share of probability onto words that never occur in
//! public text. Sentences follow a first-order chain: with probability
//! `successor_prob` the next word is the previous word's fixed successor,
//! otherwise a fresh unigram draw.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::UserDataset;
use crate::rng::{rng_from, SimRng};
use crate::{Error, Result};

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub shared_words: usize,
    pub novel_words: usize,
    /// Distribution shift in `[0, 1]`; 0 gives identical distributions.
    pub shift: f64,
    /// Private probability mass on novel words at `shift = 1`.
    pub novel_mass: f64,
    /// Scale of the log-rank jitter at `shift = 1`.
    pub rank_noise: f64,
    pub zipf_exponent: f64,
    pub successor_prob: f64,
    pub private_users: usize,
    pub public_users: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            shared_words: 400,
            novel_words: 60,
            shift: 0.3,
            novel_mass: 0.3,
            rank_noise: 1.0,
            zipf_exponent: 1.0,
            successor_prob: 0.5,
            private_users: 200,
            public_users: 1000,
            min_sentences: 4,
            max_sentences: 16,
            min_words: 4,
            max_words: 12,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.shared_words >= 2
            && (0.0..=1.0).contains(&self.shift)
            && (0.0..1.0).contains(&self.novel_mass)
            && self.rank_noise >= 0.0
            && self.zipf_exponent > 0.0
            && (0.0..1.0).contains(&self.successor_prob)
            && self.min_sentences >= 1
            && self.min_sentences <= self.max_sentences
            && self.min_words >= 1
            && self.min_words <= self.max_words
            && (self.novel_words > 0 || self.shift * self.novel_mass == 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic corpus spec: {self:?}")))
        }
    }
}

/// A word distribution with a fixed successor per word.
#[derive(Debug, Clone, PartialEq)]
pub struct WordModel {
    pub words: Vec<String>,
    pub probs: Vec<f64>,
    successors: Vec<usize>,
    cdf: Vec<f64>,
    successor_prob: f64,
}

impl WordModel {
    fn new(words: Vec<String>, probs: Vec<f64>, successor_prob: f64, seed: u64) -> Self {
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cdf.push(acc);
        }
        // Successor of word i is the inverse-CDF image of a per-word uniform
        // that is independent of the distribution, so equal distributions
        // yield equal successor maps.
        let successors = words
            .iter()
            .map(|w| {
                let u: f64 = rng_from(seed, &[0x5dcc, crate::rng::hash_str(w)]).random();
                inverse_cdf(&cdf, u * acc)
            })
            .collect();
        WordModel {
            words,
            probs,
            successors,
            cdf,
            successor_prob,
        }
    }

    fn draw(&self, rng: &mut SimRng) -> usize {
        let total = *self.cdf.last().expect("non-empty");
        inverse_cdf(&self.cdf, rng.random::<f64>() * total)
    }

    pub fn sentence(&self, len: usize, rng: &mut SimRng) -> String {
        let mut out: Vec<&str> = Vec::with_capacity(len);
        let mut prev = self.draw(rng);
        out.push(&self.words[prev]);
        while out.len() < len {
            prev = if rng.random::<f64>() < self.successor_prob {
                self.successors[prev]
            } else {
                self.draw(rng)
            };
            out.push(&self.words[prev]);
        }
        out.join(" ")
    }
}

fn inverse_cdf(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn zipf(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn pseudo_word(rng: &mut SimRng, syllables: usize) -> String {
    let mut s = String::new();
    for _ in 0..syllables {
        s.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
        s.push(*VOWELS.choose(rng).expect("non-empty") as char);
        if rng.random::<f64>() < 0.3 {
            s.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
        }
    }
    s
}

/// Unique pseudo-words, shortest first; shared words come first.
fn lexicon(spec: &SynthSpec) -> (Vec<String>, Vec<String>) {
    let mut rng = rng_from(spec.seed, &[0x1e8]);
    let mut seen = HashSet::new();
    let mut fresh = |rng: &mut SimRng, lo: usize, hi: usize| loop {
        let syllables = rng.random_range(lo..=hi);
        let w = pseudo_word(rng, syllables);
        if seen.insert(w.clone()) {
            return w;
        }
    };
    let mut shared: Vec<String> = (0..spec.shared_words).map(|_| fresh(&mut rng, 1, 3)).collect();
    shared.sort_by_key(|w| w.len());
    let novel: Vec<String> = (0..spec.novel_words).map(|_| fresh(&mut rng, 2, 3)).collect();
    (shared, novel)
}

/// The public and private word models for a spec.
pub fn word_models(spec: &SynthSpec) -> Result<(WordModel, WordModel)> {
    spec.validate()?;
    let (shared, novel) = lexicon(spec);
    let n = shared.len();
    let base = zipf(n, spec.zipf_exponent);
    let public = WordModel::new(shared.clone(), base.clone(), spec.successor_prob, spec.seed);

    // Private ranks: jitter each log-rank with Gaussian noise of scale
    // `shift * rank_noise` and re-sort.
    let mut rng = rng_from(spec.seed, &[0x9e7]);
    let mut keyed: Vec<(f64, usize)> = (0..n)
        .map(|r| {
            let z: f64 = rng.sample(StandardNormal);
            (((r + 1) as f64).ln() + spec.shift * spec.rank_noise * z, r)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mass = spec.shift * spec.novel_mass;
    let mut probs = vec![0.0; n];
    for (new_rank, &(_, word)) in keyed.iter().enumerate() {
        probs[word] = (1.0 - mass) * base[new_rank];
    }
    let mut words = shared;
    if spec.novel_words > 0 && mass > 0.0 {
        words.extend(novel);
        probs.extend(zipf(spec.novel_words, spec.zipf_exponent).into_iter().map(|p| mass * p));
    }
    let private = WordModel::new(words, probs, spec.successor_prob, spec.seed);
    Ok((public, private))
}

fn users_from(model: &WordModel, spec: &SynthSpec, n: usize, prefix: &str, tag: u64) -> Vec<UserDataset> {
    (0..n)
        .map(|u| {
            let mut rng = rng_from(spec.seed, &[tag, u as u64]);
            let count = rng.random_range(spec.min_sentences..=spec.max_sentences);
            let sentences = (0..count)
                .map(|_| {
                    let len = rng.random_range(spec.min_words..=spec.max_words);
                    model.sentence(len, &mut rng)
                })
                .collect();
            UserDataset {
                user_id: format!("{prefix}{u:06}"),
                sentences,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpora {
    pub public: Vec<UserDataset>,
    pub private: Vec<UserDataset>,
}

/// Generates both corpora. Deterministic given `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpora> {
    let (public_model, private_model) = word_models(spec)?;
    Ok(SynthCorpora {
        public: users_from(&public_model, spec, spec.public_users, "pub", 0x9b),
        private: users_from(&private_model, spec, spec.private_users, "user", 0x93),
    })
}

/// `n` extra private users, disjoint in id and random stream from the
/// users of [`generate`].
pub fn extra_private_users(spec: &SynthSpec, n: usize) -> Result<Vec<UserDataset>> {
    let (_, private_model) = word_models(spec)?;
    Ok(users_from(&private_model, spec, n, "extra", 0xe7))
}
