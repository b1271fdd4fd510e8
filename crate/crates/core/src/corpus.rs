//! User-partitioned text corpora.
//!
//! A corpus is a list of users, each owning an ordered list of sentences
//! (one post per line). Users are the unit of federated participation and of
//! the train/test split.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from;
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserDataset {
    pub user_id: String,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train_users: Vec<UserDataset>,
    pub test_users: Vec<UserDataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    Jsonl,
    PlainDir,
}

#[derive(Deserialize)]
struct Record {
    user_id: String,
    text: String,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    user_id: &'a str,
    text: &'a str,
}

/// Loads a corpus. Records sharing a `user_id` are merged in file order.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<UserDataset>> {
    match format {
        CorpusFormat::Jsonl => load_jsonl(path),
        CorpusFormat::PlainDir => load_plain_dir(path),
    }
}

fn load_jsonl(path: &Path) -> Result<Vec<UserDataset>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut users: Vec<UserDataset> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::CorpusRecord {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let idx = *slot.entry(rec.user_id.clone()).or_insert_with(|| {
            users.push(UserDataset {
                user_id: rec.user_id.clone(),
                sentences: Vec::new(),
            });
            users.len() - 1
        });
        users[idx].sentences.extend(split_sentences(&rec.text));
    }
    Ok(users)
}

fn load_plain_dir(path: &Path) -> Result<Vec<UserDataset>> {
    let mut files: Vec<_> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|f| {
            let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            let user_id = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(UserDataset {
                user_id,
                sentences: split_sentences(&text).collect(),
            })
        })
        .collect()
}

fn split_sentences(text: &str) -> impl Iterator<Item = String> + '_ {
    text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned)
}

/// Writes one JSONL record per sentence.
pub fn write_jsonl(path: &Path, users: &[UserDataset]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for u in users {
        for s in &u.sentences {
            let line = serde_json::to_string(&RecordOut {
                user_id: &u.user_id,
                text: s,
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Keeps leading sentences while the running token count (without BOS/EOS)
/// stays within `cap`; stops at the first sentence that would overflow.
pub fn cap_user_tokens(ds: &UserDataset, tok: &Tokenizer, cap: usize) -> UserDataset {
    let mut used = 0usize;
    let mut sentences = Vec::new();
    for s in &ds.sentences {
        let n = tok.encode(s).len() - 2;
        if used + n > cap {
            break;
        }
        used += n;
        sentences.push(s.clone());
    }
    UserDataset {
        user_id: ds.user_id.clone(),
        sentences,
    }
}

/// Caps every user and drops those left with no sentences.
pub fn cap_all(users: &[UserDataset], tok: &Tokenizer, cap: usize) -> Vec<UserDataset> {
    users
        .iter()
        .map(|u| cap_user_tokens(u, tok, cap))
        .filter(|u| !u.sentences.is_empty())
        .collect()
}

/// Splits users into disjoint train and test populations.
///
/// The test set has `round(test_fraction * n)` users chosen by a seeded shuffle.
pub fn split_users(datasets: Vec<UserDataset>, test_fraction: f64, seed: u64) -> Result<CorpusSplit> {
    if datasets.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 users to split, got {}",
            datasets.len()
        )));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n = datasets.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed, &[0x5b11]));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train_users, mut test_users) = (Vec::new(), Vec::new());
    for (ds, test) in datasets.into_iter().zip(is_test) {
        if test {
            test_users.push(ds);
        } else {
            train_users.push(ds);
        }
    }
    Ok(CorpusSplit {
        train_users,
        test_users,
    })
}

/// Number of maximal non-empty whitespace-delimited segments.
pub fn word_count(sentence: &str) -> usize {
    sentence.split_whitespace().count()
}

/// Flattens users into their sentences, preserving order.
pub fn sentences_of(users: &[UserDataset]) -> Vec<String> {
    users.iter().flat_map(|u| u.sentences.iter().cloned()).collect()
}
