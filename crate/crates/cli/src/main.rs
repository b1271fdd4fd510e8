//! `pfltok`: runs private federated learning experiments with tokenizer
//! retraining, and exposes each pipeline stage as its own subcommand.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use pfltok::checkpoint::{Checkpoint, LineageEvent};
use pfltok::corpus::{load_corpus, sentences_of, write_jsonl, CorpusFormat};
use pfltok::experiment::{run_experiment, train_tokenizer, ExperimentConfig};
use pfltok::metrics::{evaluate, unigram_kld};
use pfltok::retokenize::{apply_remap, build_remap, corpus_hash, generate_corpus, write_corpus};
use pfltok::synth::{extra_private_users, generate, SynthSpec};
use pfltok::tokenizer::Tokenizer;
use pfltok::{Error, Result};

#[derive(Parser)]
#[command(name = "pfltok", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic public and private corpora.
    MakeSynth(Common),
    /// Trains the initial tokenizer on a corpus (the public one by default).
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Runs the configured protocol end to end.
    Run(Common),
    /// Evaluates a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Samples a text corpus from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
    },
    /// Moves a checkpoint onto a new tokenizer.
    Remap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        new_tokenizer: PathBuf,
    },
}

/// Configuration of `make-synth`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct MakeSynthConfig {
    synth: SynthSpec,
    /// Extra private users written to `extra.jsonl`, e.g. as a large
    /// heavy-hitters reporting population.
    extra_users: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeSynth(c) => make_synth(&c),
        Command::TrainTokenizer { common, corpus } => cmd_train_tokenizer(&common, corpus.as_deref()),
        Command::Run(c) => {
            let cfg = experiment_config(&c)?;
            let summary = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            tokenizer,
            corpus,
        } => cmd_eval(&common, &checkpoint, &tokenizer, &corpus),
        Command::Sample {
            common,
            checkpoint,
            tokenizer,
        } => cmd_sample(&common, &checkpoint, &tokenizer),
        Command::Remap {
            common,
            checkpoint,
            tokenizer,
            new_tokenizer,
        } => cmd_remap(&common, &checkpoint, &tokenizer, &new_tokenizer),
    }
}

fn require_config(c: &Common) -> Result<&Path> {
    c.config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this subcommand".into()))
}

fn require_out(c: &Common) -> Result<&Path> {
    c.out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required for this subcommand".into()))
}

fn experiment_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(require_config(c)?)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_owned(),
        source: e,
    })
}

fn make_synth(c: &Common) -> Result<()> {
    let path = require_config(c)?;
    let out = require_out(c)?;
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: MakeSynthConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = c.seed {
        cfg.synth.seed = seed;
    }
    cfg.synth.validate()?;
    create_dir(out)?;
    let corpora = generate(&cfg.synth)?;
    write_jsonl(&out.join("public.jsonl"), &corpora.public)?;
    write_jsonl(&out.join("private.jsonl"), &corpora.private)?;
    if cfg.extra_users > 0 {
        write_jsonl(
            &out.join("extra.jsonl"),
            &extra_private_users(&cfg.synth, cfg.extra_users)?,
        )?;
    }
    let kld = unigram_kld(&sentences_of(&corpora.private), &sentences_of(&corpora.public), 10_000)?;
    println!(
        "{}",
        serde_json::json!({
            "public_users": corpora.public.len(),
            "private_users": corpora.private.len(),
            "extra_users": cfg.extra_users,
            "kld_private_public": kld,
        })
    );
    Ok(())
}

fn cmd_train_tokenizer(c: &Common, corpus: Option<&Path>) -> Result<()> {
    let cfg = experiment_config(c)?;
    let out = require_out(c)?;
    let path = corpus.unwrap_or(&cfg.data.public);
    let sentences = sentences_of(&load_corpus(path, cfg.data.format)?);
    let tok = train_tokenizer(cfg.tokenizer.kind, &sentences, cfg.tokenizer.vocab_size)?;
    create_dir(out)?;
    tok.save(&out.join("tokenizer.json"))?;
    println!(
        "{}",
        serde_json::json!({ "vocab_size": tok.vocab_size(), "fingerprint": tok.fingerprint() })
    );
    Ok(())
}

fn cmd_eval(c: &Common, checkpoint: &Path, tokenizer: &Path, corpus: &Path) -> Result<()> {
    let format = match &c.config {
        Some(_) => experiment_config(c)?.data.format,
        None => CorpusFormat::Jsonl,
    };
    let tok = Tokenizer::load(tokenizer)?;
    let params = Checkpoint::load(checkpoint)?.restore(&tok)?;
    let sentences = sentences_of(&load_corpus(corpus, format)?);
    let report = evaluate(&params, &tok, &sentences)?;
    let line = serde_json::to_string(&report)?;
    println!("{line}");
    if let Some(out) = &c.out {
        create_dir(out)?;
        let path = out.join("eval.jsonl");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
        writeln!(f, "{line}").map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn cmd_sample(c: &Common, checkpoint: &Path, tokenizer: &Path) -> Result<()> {
    let cfg = experiment_config(c)?;
    let out = require_out(c)?;
    let tok = Tokenizer::load(tokenizer)?;
    let params = Checkpoint::load(checkpoint)?.restore(&tok)?;
    let public_sentences = match cfg.sampling.corpus_size {
        Some(_) => 0,
        None => sentences_of(&load_corpus(&cfg.data.public, cfg.data.format)?).len(),
    };
    let corpus = generate_corpus(&params, &tok, &cfg.sampling_config(public_sentences))?;
    create_dir(out)?;
    write_corpus(&out.join("sampled_corpus.txt"), &corpus)?;
    println!(
        "{}",
        serde_json::json!({ "sentences": corpus.len(), "corpus_hash": corpus_hash(&corpus) })
    );
    Ok(())
}

fn cmd_remap(c: &Common, checkpoint: &Path, tokenizer: &Path, new_tokenizer: &Path) -> Result<()> {
    let out = require_out(c)?;
    let old = Tokenizer::load(tokenizer)?;
    let new = Tokenizer::load(new_tokenizer)?;
    let ck = Checkpoint::load(checkpoint)?;
    let params = ck.restore(&old)?;
    let map = build_remap(&old, &new)?;
    let remapped = apply_remap(&params, &map)?;
    let mut lineage = ck.lineage.clone();
    lineage.push(LineageEvent {
        round: ck.round,
        event: "remap".into(),
        tokenizer_hash: new.fingerprint(),
        corpus_hash: None,
    });
    create_dir(out)?;
    let remap_path = out.join("remap.json");
    fs::write(&remap_path, map.to_json()).map_err(|e| Error::Io {
        path: remap_path,
        source: e,
    })?;
    Checkpoint::new(&remapped, &new, ck.round, lineage).save(&out.join("checkpoint.json"))?;
    println!(
        "{}",
        serde_json::json!({ "old_vocab": map.old_size(), "new_vocab": map.new_size() })
    );
    Ok(())
}
