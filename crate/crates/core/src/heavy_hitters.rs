//! Local-DP heavy-hitters baseline over a fixed candidate word list.
//!
//! Each user privatizes its `k` most frequent candidate words with k-ary
//! randomized response at budget `epsilon / k` per word. The server
//! debiases the report histogram and samples a word corpus from it.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::UserDataset;
use crate::rng::{hash_str, rng_from};
use crate::{Error, Result};

/// Words per sentence in the corpus built from estimates.
pub const HH_SENTENCE_WORDS: usize = 16;

/// Randomized response over `domain_size` items at budget `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomizedResponse {
    pub domain_size: usize,
    pub epsilon: f64,
}

impl RandomizedResponse {
    pub fn new(domain_size: usize, epsilon: f64) -> Result<Self> {
        if domain_size < 2 || !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "randomized response needs a domain of >= 2 items and epsilon > 0, got {domain_size} and {epsilon}"
            )));
        }
        Ok(RandomizedResponse { domain_size, epsilon })
    }

    /// Probability of reporting the true item, `e^ε / (e^ε + d - 1)`.
    pub fn p_true(&self) -> f64 {
        let d = self.domain_size as f64;
        1.0 / (1.0 + (d - 1.0) * (-self.epsilon).exp())
    }

    /// Probability of reporting one particular other item.
    pub fn p_other(&self) -> f64 {
        (1.0 - self.p_true()) / (self.domain_size as f64 - 1.0)
    }

    pub fn privatize<R: Rng + ?Sized>(&self, item: usize, rng: &mut R) -> usize {
        if rng.random::<f64>() < self.p_true() {
            return item;
        }
        let other = rng.random_range(0..self.domain_size - 1);
        if other >= item {
            other + 1
        } else {
            other
        }
    }
}

/// The `size` most frequent words of a corpus (ties lexicographic), used
/// as the candidate domain.
pub fn candidate_domain<S: AsRef<str>>(corpus: &[S], size: usize) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in corpus {
        for w in s.as_ref().split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(size).map(|(w, _)| w.to_owned()).collect()
}

/// One user's privatized words, as indices into the candidate domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HhReport {
    pub user_id: String,
    pub reports: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEstimate {
    /// Debiased count per domain word, aligned with the domain.
    pub counts: Vec<f64>,
    pub total_reports: usize,
}

/// The user's `k` most frequent domain words (ties lexicographic), each
/// privatized at `epsilon_local / k`. Slots the user cannot fill with a
/// domain word get a uniformly random domain word instead.
pub fn client_report<R: Rng + ?Sized>(
    user: &UserDataset,
    k: usize,
    domain: &[String],
    epsilon_local: f64,
    rng: &mut R,
) -> Result<HhReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let index: HashMap<&str, usize> = domain.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    client_report_indexed(user, k, &index, domain, epsilon_local, rng)
}

fn client_report_indexed<R: Rng + ?Sized>(
    user: &UserDataset,
    k: usize,
    index: &HashMap<&str, usize>,
    domain: &[String],
    epsilon_local: f64,
    rng: &mut R,
) -> Result<HhReport> {
    let rr = RandomizedResponse::new(domain.len(), epsilon_local / k as f64)?;
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for s in &user.sentences {
        for w in s.split_whitespace() {
            if let Some(&i) = index.get(w) {
                *counts.entry(i).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| domain[a.0].cmp(&domain[b.0])));
    let reports = (0..k)
        .map(|slot| {
            let truth = match ranked.get(slot) {
                Some(&(i, _)) => i,
                None => rng.random_range(0..domain.len()),
            };
            rr.privatize(truth, rng)
        })
        .collect();
    Ok(HhReport {
        user_id: user.user_id.clone(),
        reports,
    })
}

/// Reports for every user, each with its own stream from `(seed, user_id)`.
pub fn collect_reports(
    users: &[UserDataset],
    k: usize,
    domain: &[String],
    epsilon_local: f64,
    seed: u64,
) -> Result<Vec<HhReport>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let index: HashMap<&str, usize> = domain.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    users
        .par_iter()
        .map(|u| {
            let mut rng = rng_from(seed, &[0x4848, hash_str(&u.user_id)]);
            client_report_indexed(u, k, &index, domain, epsilon_local, &mut rng)
        })
        .collect()
}

/// Unbiased counts `(observed - n q) / (p - q)`; `k` must match the
/// value used by the clients, since it sets the per-word budget.
pub fn aggregate(reports: &[HhReport], domain_size: usize, k: usize, epsilon_local: f64) -> Result<FrequencyEstimate> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no heavy-hitter reports".into()));
    }
    let rr = RandomizedResponse::new(domain_size, epsilon_local / k as f64)?;
    let mut observed = vec![0usize; domain_size];
    let mut n = 0usize;
    for r in reports {
        for &i in &r.reports {
            if i >= domain_size {
                return Err(Error::InvalidArgument(format!(
                    "report index {i} outside domain of {domain_size}"
                )));
            }
            observed[i] += 1;
            n += 1;
        }
    }
    let (p, q) = (rr.p_true(), rr.p_other());
    let counts = observed.iter().map(|&o| (o as f64 - n as f64 * q) / (p - q)).collect();
    Ok(FrequencyEstimate {
        counts,
        total_reports: n,
    })
}

/// Samples `size` words i.i.d. from the estimate with negatives truncated to
/// zero, as sentences of [`HH_SENTENCE_WORDS`] words.
pub fn build_hh_corpus<R: Rng + ?Sized>(
    est: &FrequencyEstimate,
    domain: &[String],
    size: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    if est.counts.len() != domain.len() {
        return Err(Error::DimensionMismatch(format!(
            "estimate has {} entries, domain has {}",
            est.counts.len(),
            domain.len()
        )));
    }
    let mut cdf = Vec::with_capacity(domain.len());
    let mut acc = 0.0;
    for &c in &est.counts {
        acc += c.max(0.0);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::InvalidArgument("all heavy-hitter estimates are zero".into()));
    }
    let words: Vec<&str> = (0..size)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let i = cdf.partition_point(|&c| c <= u).min(domain.len() - 1);
            domain[i].as_str()
        })
        .collect();
    Ok(words.chunks(HH_SENTENCE_WORDS).map(|c| c.join(" ")).collect())
}
