//! Experiment configuration, protocols and run artifacts.
//!
//! A run directory holds:
//!
//! - `config.toml`: the fully resolved configuration.
//! - `tokenizer_*.json`: every tokenizer the run trained.
//! - `sampled_corpus.txt` / `hh_corpus.txt`: tokenizer training corpora
//!   built without raw user data.
//! - `remap.json`: the embedding remap of a switch run.
//! - `checkpoints/`: periodic and final model checkpoints.
//! - `metrics.jsonl`: one row per round plus evaluation rows.
//! - `privacy_ledger.jsonl`: one row per round plus tokenizer updates and
//!   local-DP releases.
//! - `summary.json`: final metrics and corpus divergences.
//! - `hashes.json`: SHA-256 of the inputs and of every artifact above.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, LineageEvent};
use crate::corpus::{cap_all, load_corpus, sentences_of, split_users, CorpusFormat, UserDataset};
use crate::dp::{calibrate_sigma, Budget, DpConfig, LedgerEntry};
use crate::fedavg::{encode_users, train, RoundReport, Schedule, ServerOptKind, ServerOptState};
use crate::heavy_hitters::{aggregate, build_hh_corpus, candidate_domain, collect_reports};
use crate::lm::{LmConfig, LmParams, LocalConfig};
use crate::metrics::{evaluate, unigram_kld, MetricsReport};
use crate::retokenize::{
    read_corpus, update, update_with_corpus, write_corpus, SamplingConfig, UpdateConfig, UpdateOutcome,
};
use crate::rng::{derive_seed, rng_from};
use crate::tokenizer::{train_bpe, train_word_level, Tokenizer, TokenizerKind, BPE_MIN_VOCAB};
use crate::{Error, Result};

const INIT_TAG: u64 = 0x1417;
const TRAIN_TAG: u64 = 0x7a41;
const SAMPLING_TAG: u64 = 0x5a4e;
const HH_TAG: u64 = 0x4848;
/// Phase tag of the model that gets evaluated, shared by all protocols so
/// that their final phases see the same cohorts.
const FINAL_PHASE: u64 = 2;
/// Cap on the default sampled corpus size.
pub const MAX_DEFAULT_CORPUS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Baseline,
    Oracle,
    SampledTwoPhase,
    HeavyHitters,
    SwitchAtRound(usize),
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Baseline => f.write_str("baseline"),
            Protocol::Oracle => f.write_str("oracle"),
            Protocol::SampledTwoPhase => f.write_str("sampled_two_phase"),
            Protocol::HeavyHitters => f.write_str("heavy_hitters"),
            Protocol::SwitchAtRound(r) => write!(f, "switch_at_round({r})"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "baseline" => return Ok(Protocol::Baseline),
            "oracle" => return Ok(Protocol::Oracle),
            "sampled_two_phase" => return Ok(Protocol::SampledTwoPhase),
            "heavy_hitters" => return Ok(Protocol::HeavyHitters),
            _ => {}
        }
        s.strip_prefix("switch_at_round(")
            .and_then(|rest| rest.strip_suffix(')'))
            .and_then(|r| r.trim().parse().ok())
            .map(Protocol::SwitchAtRound)
            .ok_or_else(|| Error::Config(format!("unknown protocol {s:?}")))
    }
}

impl Serialize for Protocol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Protocol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Full,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub public: PathBuf,
    pub private: PathBuf,
    pub format: CorpusFormat,
    pub test_fraction: f64,
    /// Per-user token cap, measured with the public tokenizer.
    pub user_token_cap: usize,
    /// Train the evaluated model on the second half of the training users
    /// only. Always on for `sampled_two_phase` and `heavy_hitters`.
    pub half_split: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub kind: TokenizerKind,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub clip_bound: f64,
    /// Calibrated to the target budget over one training phase when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_multiplier: Option<f64>,
    pub target_epsilon: f64,
    pub target_delta: f64,
    pub population: usize,
    pub cohort_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub optimizer: ServerOptKind,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub rounds: usize,
    pub eval_every: usize,
    /// 0 disables periodic checkpoints; the final model is always saved.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    /// Defaults to 10x the public sentence count, capped at
    /// [`MAX_DEFAULT_CORPUS`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_size: Option<usize>,
    pub l_max: usize,
    /// Vocabulary of the retrained BPE tokenizer; defaults to the initial one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    /// Train the new tokenizer on this persisted corpus instead of sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reuse_corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeavyHittersConfig {
    pub words_per_user: usize,
    pub epsilon_local: f64,
    /// Candidate domain: this many most frequent public words.
    pub domain_size: usize,
    pub corpus_words: usize,
    /// Reporting users; defaults to the first half of the training users.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub kld_top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub protocol: Protocol,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub privacy: PrivacyConfig,
    pub server: ServerConfig,
    pub local: LocalConfig,
    pub schedule: ScheduleConfig,
    pub sampling: SamplingSection,
    pub heavy_hitters: HeavyHittersConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Full-scale hyperparameters.
    pub fn full() -> Self {
        ExperimentConfig {
            profile: Profile::Full,
            protocol: Protocol::SampledTwoPhase,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig {
                public: PathBuf::from("data/public.jsonl"),
                private: PathBuf::from("data/private.jsonl"),
                format: CorpusFormat::Jsonl,
                test_fraction: 0.1,
                user_token_cap: 1600,
                half_split: false,
            },
            tokenizer: TokenizerConfig {
                kind: TokenizerKind::Bpe,
                vocab_size: 10_000,
            },
            model: ModelConfig {
                embed_dim: 512,
                hidden_dim: 512,
                num_layers: 3,
                max_seq_len: 128,
            },
            privacy: PrivacyConfig {
                clip_bound: 0.5,
                noise_multiplier: None,
                target_epsilon: 2.0,
                target_delta: 1e-6,
                population: 10_000_000,
                cohort_size: 20_000,
            },
            server: ServerConfig {
                optimizer: ServerOptKind::Adam,
                lr: 0.5,
            },
            local: LocalConfig {
                epochs: 1,
                batch_size: 16,
                lr: 0.1,
            },
            schedule: ScheduleConfig {
                rounds: 5000,
                eval_every: 100,
                checkpoint_every: 500,
            },
            sampling: SamplingSection {
                corpus_size: None,
                l_max: 64,
                vocab_size: None,
                reuse_corpus: None,
            },
            heavy_hitters: HeavyHittersConfig {
                words_per_user: 3,
                epsilon_local: 8.0,
                domain_size: 10_000,
                corpus_words: 1_000_000,
                population: None,
            },
            eval: EvalConfig { kld_top_k: 10_000 },
        }
    }

    /// Small model, cohort and vocabulary for single-CPU runs. Trains
    /// without noise: at this population a calibrated σ swamps the signal.
    pub fn desk() -> Self {
        let full = Self::full();
        ExperimentConfig {
            profile: Profile::Desk,
            data: DataConfig {
                test_fraction: 0.2,
                ..full.data
            },
            tokenizer: TokenizerConfig {
                kind: TokenizerKind::Bpe,
                vocab_size: 512,
            },
            model: ModelConfig {
                embed_dim: 32,
                hidden_dim: 64,
                num_layers: 1,
                max_seq_len: 64,
            },
            privacy: PrivacyConfig {
                noise_multiplier: Some(0.0),
                cohort_size: 20,
                ..full.privacy
            },
            server: ServerConfig {
                optimizer: ServerOptKind::Adam,
                lr: 0.05,
            },
            schedule: ScheduleConfig {
                rounds: 200,
                eval_every: 25,
                checkpoint_every: 100,
            },
            sampling: SamplingSection {
                corpus_size: Some(5000),
                ..full.sampling
            },
            heavy_hitters: HeavyHittersConfig {
                corpus_words: 60_000,
                ..full.heavy_hitters
            },
            ..full
        }
    }

    pub fn defaults(profile: Profile) -> Self {
        match profile {
            Profile::Full => Self::full(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Parses a TOML document layered over the defaults of its `profile`
    /// (`full` when absent). Relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let profile = match doc.get("profile") {
            None => Profile::Full,
            Some(v) => Profile::deserialize(v.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let base = toml::Table::try_from(Self::defaults(profile)).map_err(|e| Error::Config(format!("{e}")))?;
        let merged = merge(base, doc);
        let mut cfg = Self::deserialize(toml::Value::Table(merged)).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("{e}")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.public);
        fix(&mut self.data.private);
        fix(&mut self.out_dir);
        if let Some(p) = self.sampling.reuse_corpus.as_mut() {
            fix(p);
        }
        if let Some(p) = self.heavy_hitters.population.as_mut() {
            fix(p);
        }
    }

    /// Checks values and that every input path exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for p in [&self.data.public, &self.data.private] {
            if !p.exists() {
                return bad(format!("corpus {} does not exist", p.display()));
            }
        }
        for p in [&self.sampling.reuse_corpus, &self.heavy_hitters.population]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return bad(format!(
                "test_fraction must be in (0, 1), got {}",
                self.data.test_fraction
            ));
        }
        if self.data.user_token_cap == 0 {
            return bad("user_token_cap must be positive".into());
        }
        let min_vocab = match self.tokenizer.kind {
            TokenizerKind::Bpe => BPE_MIN_VOCAB,
            TokenizerKind::WordLevel => crate::tokenizer::WORD_SPECIALS + 1,
        };
        if self.tokenizer.vocab_size < min_vocab {
            return bad(format!("tokenizer.vocab_size must be at least {min_vocab}"));
        }
        if self.new_vocab_size() < BPE_MIN_VOCAB {
            return bad(format!("sampling.vocab_size must be at least {BPE_MIN_VOCAB}"));
        }
        self.model
            .lm_config(self.tokenizer.vocab_size)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let p = &self.privacy;
        if !(p.clip_bound > 0.0)
            || p.noise_multiplier.is_some_and(|s| !(s >= 0.0))
            || !(p.target_epsilon > 0.0)
            || !(p.target_delta > 0.0 && p.target_delta < 1.0)
            || p.cohort_size == 0
            || p.cohort_size > p.population
        {
            return bad(format!("invalid privacy section: {p:?}"));
        }
        if !(self.server.lr > 0.0) || !(self.local.lr > 0.0) || self.local.batch_size == 0 {
            return bad("learning rates and batch size must be positive".into());
        }
        let s = &self.schedule;
        if s.rounds == 0 || s.eval_every == 0 {
            return bad("schedule.rounds and schedule.eval_every must be positive".into());
        }
        if let Protocol::SwitchAtRound(r) = self.protocol {
            if r == 0 || r >= s.rounds {
                return bad(format!("switch round {r} must lie in 1..{}", s.rounds));
            }
        }
        if self.sampling.l_max == 0 || self.sampling.corpus_size == Some(0) {
            return bad("sampling.l_max and sampling.corpus_size must be positive".into());
        }
        let hh = &self.heavy_hitters;
        if hh.words_per_user == 0 || !(hh.epsilon_local > 0.0) || hh.domain_size < 2 || hh.corpus_words == 0 {
            return bad(format!("invalid heavy_hitters section: {hh:?}"));
        }
        if self.eval.kld_top_k == 0 {
            return bad("eval.kld_top_k must be positive".into());
        }
        Ok(())
    }

    pub fn new_vocab_size(&self) -> usize {
        self.sampling.vocab_size.unwrap_or(self.tokenizer.vocab_size)
    }

    /// Sampling settings; the default corpus size is 10x the number of
    /// public sentences the initial tokenizer saw, capped.
    pub fn sampling_config(&self, public_sentences: usize) -> SamplingConfig {
        SamplingConfig {
            corpus_size: self
                .sampling
                .corpus_size
                .unwrap_or((10 * public_sentences).clamp(1, MAX_DEFAULT_CORPUS)),
            l_max: self.sampling.l_max,
            seed: derive_seed(self.seed, &[SAMPLING_TAG]),
        }
    }

    fn uses_half_split(&self) -> bool {
        self.data.half_split || matches!(self.protocol, Protocol::SampledTwoPhase | Protocol::HeavyHitters)
    }

    /// Noise multiplier for a training phase of `rounds` rounds.
    pub fn resolve_sigma(&self, rounds: usize) -> Result<f64> {
        match self.privacy.noise_multiplier {
            Some(s) => Ok(s),
            None => {
                let p = &self.privacy;
                calibrate_sigma(
                    p.target_epsilon,
                    p.target_delta,
                    p.cohort_size as f64 / p.population as f64,
                    rounds,
                )
            }
        }
    }

    fn dp_config(&self, sigma: f64, rounds: usize) -> DpConfig {
        let p = &self.privacy;
        DpConfig {
            clip_bound: p.clip_bound,
            noise_multiplier: sigma,
            target_epsilon: p.target_epsilon,
            target_delta: p.target_delta,
            population: p.population,
            cohort_size: p.cohort_size,
            rounds,
        }
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let merged = merge(std::mem::take(b), o);
                *b = merged;
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

/// Trains the initial tokenizer of the given kind.
pub fn train_tokenizer<S: AsRef<str>>(kind: TokenizerKind, corpus: &[S], vocab_size: usize) -> Result<Tokenizer> {
    match kind {
        TokenizerKind::Bpe => train_bpe(corpus, vocab_size),
        TokenizerKind::WordLevel => train_word_level(corpus, vocab_size),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// One row of `metrics.jsonl`. Round rows carry training statistics,
/// eval rows carry held-out metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: String,
    pub kind: String,
    /// Rounds completed when the row was written.
    pub t: usize,
    pub tokenizer_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sum_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_cum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_per_word: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oov_rate: Option<f64>,
}

/// One row of `privacy_ledger.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub phase: String,
    #[serde(flatten)]
    pub entry: LedgerEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub protocol: Protocol,
    pub rounds: usize,
    pub sigma: f64,
    /// Held-out metrics of the final model; `kld` is the divergence of the
    /// private training text from the final tokenizer's training corpus.
    pub final_metrics: MetricsReport,
    pub tokenizer_hash: String,
    /// Held-out perplexity of the evaluated phase, in round order. A switch
    /// run has two points at the switch round, before and after the remap.
    pub curve: Vec<CurvePoint>,
    pub final_epsilon: Option<f64>,
    pub kld_public: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kld_sampled: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kld_hh: Option<f64>,
}

struct Jsonl {
    path: PathBuf,
    w: BufWriter<fs::File>,
}

impl Jsonl {
    fn create(path: PathBuf) -> Result<Self> {
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Jsonl {
            path,
            w: BufWriter::new(f),
        })
    }

    fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        let line = serde_json::to_string(row)?;
        writeln!(self.w, "{line}")
            .and_then(|_| self.w.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

struct Data {
    public_sentences: Vec<String>,
    train_users: Vec<UserDataset>,
    test: Vec<String>,
    public_tok: Tokenizer,
}

struct PhaseOutcome {
    params: LmParams,
    reports: Vec<RoundReport>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    metrics: Jsonl,
    ledger: Jsonl,
    curve: Vec<CurvePoint>,
    last_eval: Option<MetricsReport>,
    public_sentences: usize,
}

/// Runs `cfg.protocol` end to end and writes all artifacts to
/// `cfg.out_dir`. Artifacts written before a failure are kept.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(&out, e))?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
    let mut runner = Runner {
        cfg,
        metrics: Jsonl::create(out.join("metrics.jsonl"))?,
        ledger: Jsonl::create(out.join("privacy_ledger.jsonl"))?,
        out,
        curve: Vec::new(),
        last_eval: None,
        public_sentences: 0,
    };
    let summary = runner.run()?;
    let path = runner.out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    runner.write_hashes()?;
    Ok(summary)
}

impl Runner<'_> {
    fn load_data(&self) -> Result<Data> {
        let cfg = self.cfg;
        let public = load_corpus(&cfg.data.public, cfg.data.format)?;
        let public_sentences = sentences_of(&public);
        let public_tok = train_tokenizer(cfg.tokenizer.kind, &public_sentences, cfg.tokenizer.vocab_size)?;
        public_tok.save(&self.out.join("tokenizer_public.json"))?;
        let private = load_corpus(&cfg.data.private, cfg.data.format)?;
        let capped = cap_all(&private, &public_tok, cfg.data.user_token_cap);
        let split = split_users(capped, cfg.data.test_fraction, cfg.seed)?;
        log::info!(
            "{} public users, {} train users, {} test users",
            public.len(),
            split.train_users.len(),
            split.test_users.len()
        );
        Ok(Data {
            public_sentences,
            test: sentences_of(&split.test_users),
            train_users: split.train_users,
            public_tok,
        })
    }

    fn run(&mut self) -> Result<RunSummary> {
        let cfg = self.cfg;
        let data = self.load_data()?;
        let reference = sentences_of(&data.train_users);
        self.public_sentences = data.public_sentences.len();
        let top_k = cfg.eval.kld_top_k;
        let kld_public = unigram_kld(&reference, &data.public_sentences, top_k)?;
        let n = data.train_users.len();
        let (first, second) = data.train_users.split_at(n / 2);
        let final_users = if cfg.uses_half_split() {
            second
        } else {
            &data.train_users[..]
        };
        if final_users.is_empty() || (cfg.uses_half_split() && first.is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "{n} training users are too few to split"
            )));
        }
        let rounds = cfg.schedule.rounds;
        let sigma = cfg.resolve_sigma(rounds)?;
        let (mut kld_sampled, mut kld_hh) = (None, None);
        let mut tok_corpus_kld = Some(kld_public);

        let (tok, outcome, lineage) = match cfg.protocol {
            Protocol::Baseline | Protocol::Oracle => {
                let tok = if cfg.protocol == Protocol::Oracle {
                    tok_corpus_kld = Some(0.0);
                    let t = train_tokenizer(cfg.tokenizer.kind, &reference, cfg.tokenizer.vocab_size)?;
                    t.save(&self.out.join("tokenizer_oracle.json"))?;
                    t
                } else {
                    data.public_tok.clone()
                };
                let lineage = vec![lineage_event(0, "init", &tok, None)];
                let out = self.fresh_phase("main", &tok, final_users, sigma, &data.test, &lineage)?;
                (tok, out, lineage)
            }
            Protocol::SampledTwoPhase => {
                let lineage1 = vec![lineage_event(0, "init", &data.public_tok, None)];
                let p1 = self.phase(
                    "phase1",
                    1,
                    self.init_params(&data.public_tok, 1)?,
                    &data.public_tok,
                    first,
                    sigma,
                    0,
                    &data.test,
                    &lineage1,
                )?;
                let upd = self.tokenizer_update("phase1", &p1.params, &data.public_tok, rounds, &p1.reports)?;
                let k = unigram_kld(&reference, &upd.corpus, top_k)?;
                kld_sampled = Some(k);
                tok_corpus_kld = Some(k);
                upd.tokenizer.save(&self.out.join("tokenizer_sampled.json"))?;
                let lineage = vec![lineage_event(
                    0,
                    "sampled_tokenizer",
                    &upd.tokenizer,
                    Some(&upd.corpus_hash),
                )];
                let out = self.fresh_phase("phase2", &upd.tokenizer, second, sigma, &data.test, &lineage)?;
                (upd.tokenizer, out, lineage)
            }
            Protocol::HeavyHitters => {
                let (tok, corpus, hash) = self.heavy_hitters(&data, first)?;
                let k = unigram_kld(&reference, &corpus, top_k)?;
                kld_hh = Some(k);
                tok_corpus_kld = Some(k);
                let lineage = vec![lineage_event(0, "heavy_hitters_tokenizer", &tok, Some(&hash))];
                let out = self.fresh_phase("phase2", &tok, second, sigma, &data.test, &lineage)?;
                (tok, out, lineage)
            }
            Protocol::SwitchAtRound(r) => {
                let mut lineage = vec![lineage_event(0, "init", &data.public_tok, None)];
                let init = self.init_params(&data.public_tok, FINAL_PHASE)?;
                let mut opt = self.optimizer(init.num_params());
                let before = self.run_rounds(
                    "main",
                    FINAL_PHASE,
                    init,
                    &mut opt,
                    &data.public_tok,
                    final_users,
                    sigma,
                    Schedule {
                        rounds: r,
                        first_round: 0,
                    },
                    &data.test,
                    &lineage,
                )?;
                let upd = self.tokenizer_update("main", &before.params, &data.public_tok, r, &before.reports)?;
                let k = unigram_kld(&reference, &upd.corpus, top_k)?;
                kld_sampled = Some(k);
                tok_corpus_kld = Some(k);
                upd.tokenizer.save(&self.out.join("tokenizer_switched.json"))?;
                let remap_path = self.out.join("remap.json");
                fs::write(&remap_path, upd.remap.to_json()).map_err(|e| Error::io(&remap_path, e))?;
                lineage.push(lineage_event(r, "switch", &upd.tokenizer, Some(&upd.corpus_hash)));
                let m = self.eval_row("main", r, &upd.params, &upd.tokenizer, &data.test)?;
                self.curve.push(CurvePoint {
                    t: r,
                    perplexity: m.perplexity_per_word,
                });
                // The parameter vector changes shape, so optimizer moments restart.
                let mut opt = self.optimizer(upd.params.num_params());
                let after = self.run_rounds(
                    "main",
                    FINAL_PHASE,
                    upd.params,
                    &mut opt,
                    &upd.tokenizer,
                    final_users,
                    sigma,
                    Schedule {
                        rounds: rounds - r,
                        first_round: r,
                    },
                    &data.test,
                    &lineage,
                )?;
                let mut reports = before.reports;
                reports.extend(after.reports);
                let out = PhaseOutcome {
                    params: after.params,
                    reports,
                };
                (upd.tokenizer, out, lineage)
            }
        };

        Checkpoint::new(&outcome.params, &tok, rounds, lineage).save(&self.out.join("checkpoints/final.json"))?;
        tok.save(&self.out.join("tokenizer_final.json"))?;
        let mut final_metrics = match self.last_eval.take() {
            Some(m) => m,
            None => evaluate(&outcome.params, &tok, &data.test)?,
        };
        final_metrics.kld = tok_corpus_kld;
        Ok(RunSummary {
            protocol: cfg.protocol,
            rounds,
            sigma,
            final_metrics,
            tokenizer_hash: tok.fingerprint(),
            curve: std::mem::take(&mut self.curve),
            final_epsilon: outcome.reports.last().and_then(|r| r.cumulative_epsilon),
            kld_public,
            kld_sampled,
            kld_hh,
        })
    }

    fn init_params(&self, tok: &Tokenizer, phase: u64) -> Result<LmParams> {
        LmParams::init(
            self.cfg.model.lm_config(tok.vocab_size()),
            derive_seed(self.cfg.seed, &[INIT_TAG, phase]),
        )
    }

    fn optimizer(&self, num_params: usize) -> ServerOptState {
        ServerOptState::new(self.cfg.server.optimizer, self.cfg.server.lr, num_params)
    }

    /// The evaluated model: fresh parameters, all scheduled rounds.
    fn fresh_phase(
        &mut self,
        phase: &str,
        tok: &Tokenizer,
        users: &[UserDataset],
        sigma: f64,
        test: &[String],
        lineage: &[LineageEvent],
    ) -> Result<PhaseOutcome> {
        let init = self.init_params(tok, FINAL_PHASE)?;
        self.phase(phase, FINAL_PHASE, init, tok, users, sigma, 0, test, lineage)
    }

    #[allow(clippy::too_many_arguments)]
    fn phase(
        &mut self,
        phase: &str,
        phase_tag: u64,
        init: LmParams,
        tok: &Tokenizer,
        users: &[UserDataset],
        sigma: f64,
        first_round: usize,
        test: &[String],
        lineage: &[LineageEvent],
    ) -> Result<PhaseOutcome> {
        let mut opt = self.optimizer(init.num_params());
        let schedule = Schedule {
            rounds: self.cfg.schedule.rounds,
            first_round,
        };
        self.run_rounds(
            phase, phase_tag, init, &mut opt, tok, users, sigma, schedule, test, lineage,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn run_rounds(
        &mut self,
        phase: &str,
        phase_tag: u64,
        init: LmParams,
        opt: &mut ServerOptState,
        tok: &Tokenizer,
        users: &[UserDataset],
        sigma: f64,
        schedule: Schedule,
        test: &[String],
        lineage: &[LineageEvent],
    ) -> Result<PhaseOutcome> {
        let cfg = self.cfg;
        let encoded = encode_users(users, tok, cfg.model.max_seq_len);
        let dp = cfg.dp_config(sigma, cfg.schedule.rounds);
        let seed = derive_seed(cfg.seed, &[TRAIN_TAG, phase_tag]);
        let hash = tok.fingerprint();
        let end = schedule.first_round + schedule.rounds;
        let evaluated = phase_tag == FINAL_PHASE;
        let (params, reports) = train(
            init,
            opt,
            &encoded,
            &dp,
            &cfg.local,
            schedule,
            seed,
            |params, report| {
                let t = report.round + 1;
                self.metrics.write(&MetricsRow {
                    phase: phase.into(),
                    kind: "round".into(),
                    t,
                    tokenizer_hash: hash.clone(),
                    loss: Some(report.mean_client_nll),
                    sum_norm: Some(report.sum_norm),
                    epsilon_cum: report.cumulative_epsilon,
                    perplexity: None,
                    word_accuracy: None,
                    tokens_per_word: None,
                    oov_rate: None,
                })?;
                self.ledger.write(&LedgerRow {
                    phase: phase.into(),
                    entry: LedgerEntry {
                        round: t,
                        event: "round".into(),
                        budget: Budget::Central,
                        sigma,
                        q: dp.sampling_rate(),
                        cumulative_epsilon: report.cumulative_epsilon,
                        additional_epsilon: None,
                        delta: dp.target_delta,
                    },
                })?;
                if t % cfg.schedule.eval_every == 0 || t == end {
                    let m = self.eval_row(phase, t, params, tok, test)?;
                    if evaluated {
                        self.curve.push(CurvePoint {
                            t,
                            perplexity: m.perplexity_per_word,
                        });
                        self.last_eval = Some(m);
                    }
                }
                if cfg.schedule.checkpoint_every > 0 && t % cfg.schedule.checkpoint_every == 0 {
                    let path = self.out.join(format!("checkpoints/{phase}_round_{t:06}.json"));
                    Checkpoint::new(params, tok, t, lineage.to_vec()).save(&path)?;
                }
                Ok(())
            },
        )?;
        Ok(PhaseOutcome { params, reports })
    }

    fn eval_row(
        &mut self,
        phase: &str,
        t: usize,
        params: &LmParams,
        tok: &Tokenizer,
        test: &[String],
    ) -> Result<MetricsReport> {
        let m = evaluate(params, tok, test)?;
        log::info!(
            "{phase} t={t}: perplexity {:.3}, accuracy {:.4}",
            m.perplexity_per_word,
            m.word_accuracy
        );
        self.metrics.write(&MetricsRow {
            phase: phase.into(),
            kind: "eval".into(),
            t,
            tokenizer_hash: tok.fingerprint(),
            loss: None,
            sum_norm: None,
            epsilon_cum: None,
            perplexity: Some(m.perplexity_per_word),
            word_accuracy: Some(m.word_accuracy),
            tokens_per_word: Some(m.tokens_per_word),
            oov_rate: m.oov_rate,
        })?;
        Ok(m)
    }

    /// Samples (or reloads) a corpus and retrains the tokenizer. Records a
    /// ledger row with zero additional budget.
    fn tokenizer_update(
        &mut self,
        phase: &str,
        params: &LmParams,
        old: &Tokenizer,
        t: usize,
        reports: &[RoundReport],
    ) -> Result<UpdateOutcome> {
        let cfg = self.cfg;
        let upd = match &cfg.sampling.reuse_corpus {
            Some(path) => update_with_corpus(params, old, read_corpus(path)?, cfg.new_vocab_size())?,
            None => {
                let update_cfg = UpdateConfig {
                    sampling: cfg.sampling_config(self.public_sentences),
                    vocab_size: cfg.new_vocab_size(),
                };
                update(params, old, &update_cfg)?
            }
        };
        write_corpus(&self.out.join("sampled_corpus.txt"), &upd.corpus)?;
        let last = reports.last();
        self.ledger.write(&LedgerRow {
            phase: phase.into(),
            entry: LedgerEntry {
                round: t,
                event: "tokenizer_update".into(),
                budget: Budget::Central,
                sigma: 0.0,
                q: 0.0,
                cumulative_epsilon: last.and_then(|r| r.cumulative_epsilon),
                additional_epsilon: Some(0.0),
                delta: cfg.privacy.target_delta,
            },
        })?;
        Ok(upd)
    }

    fn heavy_hitters(&mut self, data: &Data, first: &[UserDataset]) -> Result<(Tokenizer, Vec<String>, String)> {
        let cfg = self.cfg;
        let hh = &cfg.heavy_hitters;
        let loaded;
        let reporters = match &hh.population {
            Some(path) => {
                loaded = load_corpus(path, cfg.data.format)?;
                &loaded[..]
            }
            None => first,
        };
        let domain = candidate_domain(&data.public_sentences, hh.domain_size);
        let seed = derive_seed(cfg.seed, &[HH_TAG]);
        let reports = collect_reports(reporters, hh.words_per_user, &domain, hh.epsilon_local, seed)?;
        let est = aggregate(&reports, domain.len(), hh.words_per_user, hh.epsilon_local)?;
        let corpus = build_hh_corpus(&est, &domain, hh.corpus_words, &mut rng_from(seed, &[1]))?;
        write_corpus(&self.out.join("hh_corpus.txt"), &corpus)?;
        self.ledger.write(&LedgerRow {
            phase: "heavy_hitters".into(),
            entry: LedgerEntry {
                round: 0,
                event: "heavy_hitters_release".into(),
                budget: Budget::Local,
                sigma: 0.0,
                q: 1.0,
                cumulative_epsilon: Some(hh.epsilon_local),
                additional_epsilon: Some(hh.epsilon_local),
                delta: 0.0,
            },
        })?;
        let tok = train_bpe(&corpus, cfg.new_vocab_size())?;
        tok.save(&self.out.join("tokenizer_hh.json"))?;
        let hash = crate::retokenize::corpus_hash(&corpus);
        Ok((tok, corpus, hash))
    }

    fn write_hashes(&self) -> Result<()> {
        let mut hashes = BTreeMap::new();
        hashes.insert("input:public".to_owned(), sha256_file(&self.cfg.data.public)?);
        hashes.insert("input:private".to_owned(), sha256_file(&self.cfg.data.private)?);
        for p in [&self.cfg.sampling.reuse_corpus, &self.cfg.heavy_hitters.population]
            .into_iter()
            .flatten()
        {
            hashes.insert(format!("input:{}", p.display()), sha256_file(p)?);
        }
        let mut files = Vec::new();
        collect_files(&self.out, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(&self.out).unwrap_or(&f).to_string_lossy().into_owned();
            if rel != "hashes.json" {
                hashes.insert(rel, sha256_file(&f)?);
            }
        }
        let path = self.out.join("hashes.json");
        fs::write(&path, serde_json::to_string_pretty(&hashes)?).map_err(|e| Error::io(&path, e))
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn lineage_event(round: usize, event: &str, tok: &Tokenizer, corpus_hash: Option<&str>) -> LineageEvent {
    LineageEvent {
        round,
        event: event.into(),
        tokenizer_hash: tok.fingerprint(),
        corpus_hash: corpus_hash.map(str::to_owned),
    }
}
