//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and fails if any criterion failed.
//!
//! Criteria 6 to 9 train small models on synthetic corpora and take several
//! minutes on one CPU.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use pfltok::corpus::{write_jsonl, UserDataset};
use pfltok::dp::{accountant_epsilon, calibrate_sigma, Budget, DpConfig};
use pfltok::experiment::{run_experiment, ExperimentConfig, LedgerRow, Protocol, RunSummary};
use pfltok::fedavg::{encode_users, train, Schedule, ServerOptState};
use pfltok::heavy_hitters::{aggregate, collect_reports};
use pfltok::lm::{backward, forward_log_probs, forward_nll, sample_tokens, LmConfig, LmParams, LocalConfig, LstmState};
use pfltok::retokenize::{apply_remap, build_remap, update, UpdateConfig, UpdateOutcome};
use pfltok::rng::{hash_str, rng_from};
use pfltok::synth::{extra_private_users, generate, SynthSpec};
use pfltok::tokenizer::{train_bpe, train_word_level, TokenSeq, Tokenizer, TokenizerKind};
use pfltok::Result;

/// Rounds of every trend run.
const TREND_ROUNDS: usize = 160;
/// Switch round of the switch run.
const SWITCH_ROUND: usize = 80;
/// Rounds of the word-level runs.
const WORD_ROUNDS: usize = 100;
/// Users in the heavy-hitters reporting population.
const HH_POPULATION: usize = 1_000_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn synth_spec() -> SynthSpec {
    SynthSpec {
        shift: 0.3,
        rank_noise: 3.0,
        private_users: 200,
        public_users: 1000,
        min_sentences: 20,
        max_sentences: 60,
        seed: 2,
        ..SynthSpec::default()
    }
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_owned();
        let c = generate(&synth_spec()).unwrap();
        write_jsonl(&root.join("public.jsonl"), &c.public).unwrap();
        write_jsonl(&root.join("private.jsonl"), &c.private).unwrap();
        Workspace { _dir: dir, root }
    }

    fn config(&self, name: &str, protocol: Protocol) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.protocol = protocol;
        cfg.seed = 1;
        cfg.out_dir = self.root.join(name);
        cfg.data.public = self.root.join("public.jsonl");
        cfg.data.private = self.root.join("private.jsonl");
        cfg.schedule.rounds = TREND_ROUNDS;
        cfg.schedule.eval_every = 20;
        cfg.schedule.checkpoint_every = 0;
        cfg
    }
}

fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_experiment(cfg)
}

/// Criterion 1: backward against central differences on every parameter.
fn gradient_check() -> Result<Outcome> {
    let cfg = LmConfig {
        vocab_size: 40,
        embed_dim: 12,
        hidden_dim: 20,
        num_layers: 2,
        max_seq_len: 16,
    };
    let mut p = LmParams::init(cfg, 7)?;
    let mut rng = rng_from(7, &[]);
    let batch: Vec<TokenSeq> = (0..3)
        .map(|_| {
            let len = rng.random_range(4..12);
            let mut ids = vec![0u32];
            ids.extend((0..len).map(|_| rng.random_range(2..40)));
            ids.push(1);
            TokenSeq::from_ids(ids)
        })
        .collect();
    let g = backward(&p, &batch)?;
    let loss =
        |p: &LmParams| -> f64 { batch.iter().map(|s| forward_nll(p, s).unwrap().0).sum::<f64>() / batch.len() as f64 };
    // Smaller steps are dominated by roundoff in the summed sequence loss.
    let h = 1e-3;
    let mut worst = 0.0f64;
    for i in 0..p.num_params() {
        let x = p.as_slice()[i];
        p.as_mut_slice()[i] = x + h;
        let up = loss(&p);
        p.as_mut_slice()[i] = x - h;
        let down = loss(&p);
        p.as_mut_slice()[i] = x;
        let fd = (up - down) / (2.0 * h);
        let a = g.values()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    Ok(outcome(
        p.num_params() <= 10_000 && worst < 1e-4,
        format!("{} params, max relative error {worst:.2e} (< 1e-4)", p.num_params()),
    ))
}

/// Criterion 2: one user, no noise, no clipping, server SGD with lr 1
/// against plain minibatch SGD that accumulates its per-round deltas.
fn degenerate_fedavg() -> Result<Outcome> {
    let texts = ["a b c d", "d c b a", "b b a c", "a a d", "c c b", "b a", "d d a b c"];
    let tok = train_word_level(&texts, 20)?;
    let cfg = LmConfig {
        vocab_size: tok.vocab_size(),
        embed_dim: 5,
        hidden_dim: 6,
        num_layers: 2,
        max_seq_len: 12,
    };
    let user = UserDataset {
        user_id: "solo".into(),
        sentences: texts.iter().map(|s| s.to_string()).collect(),
    };
    let users = encode_users(std::slice::from_ref(&user), &tok, cfg.max_seq_len);
    let local = LocalConfig {
        epochs: 2,
        batch_size: 3,
        lr: 0.1,
    };
    let dp = DpConfig {
        clip_bound: f64::INFINITY,
        noise_multiplier: 0.0,
        target_epsilon: 2.0,
        target_delta: 1e-6,
        population: 1,
        cohort_size: 1,
        rounds: 10,
    };
    let seed = 5;
    let init = LmParams::init(cfg, 3)?;
    let mut trajectory = Vec::new();
    let mut opt = ServerOptState::sgd(1.0);
    train(
        init.clone(),
        &mut opt,
        &users,
        &dp,
        &local,
        Schedule::new(10),
        seed,
        |p, _| {
            trajectory.push(p.as_slice().to_vec());
            Ok(())
        },
    )?;

    let seqs = &users[0].seqs;
    let mut oracle = init.as_slice().to_vec();
    let mut continuous = init.clone();
    let mut identical = 0;
    let mut drift = 0.0f64;
    for (round, fed) in trajectory.iter().enumerate() {
        let mut rng = rng_from(seed, &[round as u64, hash_str("solo")]);
        let mut w = LmParams::from_flat(cfg, oracle.clone())?;
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        for _ in 0..local.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(local.batch_size) {
                let batch: Vec<TokenSeq> = chunk.iter().map(|&i| seqs[i].clone()).collect();
                let g = backward(&w, &batch)?;
                for (x, d) in w.as_mut_slice().iter_mut().zip(g.values()) {
                    *x -= local.lr * d;
                }
                let gc = backward(&continuous, &batch)?;
                for (x, d) in continuous.as_mut_slice().iter_mut().zip(gc.values()) {
                    *x -= local.lr * d;
                }
            }
        }
        for (o, n) in oracle.iter_mut().zip(w.as_slice()) {
            *o += *n - *o;
        }
        if fed.iter().zip(&oracle).all(|(a, b)| a.to_bits() == b.to_bits()) {
            identical += 1;
        }
        drift = drift.max(
            fed.iter()
                .zip(continuous.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    Ok(outcome(
        identical == trajectory.len() && drift < 1e-9,
        format!(
            "{identical}/{} rounds bit-identical to the SGD oracle; max drift from unrounded SGD {drift:.1e}",
            trajectory.len()
        ),
    ))
}

/// Criterion 3: clipped contributions, accountant closed form and
/// calibration round trip.
fn dp_invariants() -> Result<Outcome> {
    let texts = ["a b c", "c b a", "b b a c", "a a", "c c b", "b a"];
    let tok = train_word_level(&texts, 10)?;
    let cfg = LmConfig {
        vocab_size: tok.vocab_size(),
        embed_dim: 4,
        hidden_dim: 5,
        num_layers: 1,
        max_seq_len: 8,
    };
    let users: Vec<UserDataset> = (0..12)
        .map(|i| UserDataset {
            user_id: format!("u{i:02}"),
            sentences: (0..4).map(|k| texts[(i + k) % texts.len()].to_string()).collect(),
        })
        .collect();
    let enc = encode_users(&users, &tok, 8);
    let clip_bound = 0.05;
    let dp = DpConfig {
        clip_bound,
        noise_multiplier: 0.8,
        target_epsilon: 2.0,
        target_delta: 1e-6,
        population: 100,
        cohort_size: 5,
        rounds: 20,
    };
    let mut worst = 0.0f64;
    let mut opt = ServerOptState::adam(0.01, LmParams::zeros(cfg)?.num_params());
    let local = LocalConfig::default();
    let (_, reports) = train(
        LmParams::init(cfg, 2)?,
        &mut opt,
        &enc,
        &dp,
        &local,
        Schedule::new(20),
        9,
        |_, r| {
            worst = worst.max(r.max_clipped_norm);
            Ok(())
        },
    )?;
    let clip_ok = reports.len() == 20 && worst <= clip_bound * (1.0 + 1e-12);

    let mut closed_err = 0.0f64;
    for sigma in [0.5, 0.8, 1.0, 2.0, 5.0] {
        let closed = (5..=256)
            .map(|k| {
                let a = k as f64 / 4.0;
                a / (2.0 * sigma * sigma) + (1e6f64).ln() / (a - 1.0)
            })
            .fold(f64::INFINITY, f64::min);
        closed_err = closed_err.max((accountant_epsilon(sigma, 1.0, 1, 1e-6)? - closed).abs());
    }

    let mut slack = 0.0f64;
    for (eps, q, t) in [
        (2.0, 0.002, 5000),
        (2.0, 0.01, 100),
        (8.0, 0.05, 50),
        (1.0, 1.0, 1),
        (2.0, 2e-6, 160),
    ] {
        let sigma = calibrate_sigma(eps, 1e-6, q, t)?;
        let got = accountant_epsilon(sigma, q, t, 1e-6)?;
        if got > eps {
            slack = f64::INFINITY;
        } else {
            slack = slack.max((eps - got) / eps);
        }
    }
    Ok(outcome(
        clip_ok && closed_err < 1e-6 && slack < 0.01,
        format!(
            "max clipped norm {worst:.4} <= {clip_bound} over {} rounds; closed-form error {closed_err:.1e}; calibration slack {:.3}%",
            reports.len(),
            100.0 * slack
        ),
    ))
}

/// Criterion 4: empirical first-token distribution against the softmax.
fn sampler_fidelity() -> Result<Outcome> {
    let cfg = LmConfig {
        vocab_size: 10,
        embed_dim: 4,
        hidden_dim: 6,
        num_layers: 1,
        max_seq_len: 8,
    };
    let p = LmParams::init(cfg, 21)?;
    let exact: Vec<f64> = LstmState::new(&p).step(&p, 0)?.iter().map(|x| x.exp()).collect();
    let n = 100_000;
    let mut counts = [0usize; 10];
    let mut rng = rng_from(4, &[]);
    for _ in 0..n {
        let s = sample_tokens(&p, &[0], 1, 1, &mut rng)?;
        counts[s.ids()[1] as usize] += 1;
    }
    let l1: f64 = counts
        .iter()
        .zip(&exact)
        .map(|(&c, &q)| (c as f64 / n as f64 - q).abs())
        .sum();
    Ok(outcome(l1 < 0.05, format!("L1 {l1:.4} over {n} draws (< 0.05)")))
}

/// Criterion 5: identity remap is exact; constituent rows are equal-weight
/// convex combinations.
fn remap_algebra() -> Result<Outcome> {
    let corpus = [
        "the cat sat on the mat",
        "the dog sat on the log",
        "a cat and a dog",
        "mats and logs and cats",
    ];
    let tok = train_bpe(&corpus, 290)?;
    let cfg = LmConfig {
        vocab_size: tok.vocab_size(),
        embed_dim: 6,
        hidden_dim: 7,
        num_layers: 2,
        max_seq_len: 24,
    };
    let p = LmParams::init(cfg, 13)?;
    let same = apply_remap(&p, &build_remap(&tok, &tok)?)?;
    let mut rng = rng_from(13, &[]);
    let mut identical = 0;
    for _ in 0..100 {
        let len = rng.random_range(1..20);
        let mut ids = vec![tok.bos()];
        ids.extend((0..len).map(|_| rng.random_range(0..tok.vocab_size() as u32)));
        let seq = TokenSeq::from_ids(ids);
        let a = forward_log_probs(&p, &seq)?;
        let b = forward_log_probs(&same, &seq)?;
        if a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) {
            identical += 1;
        }
    }

    let new = train_bpe(&["cats sat on mats", "dogs and logs", "the catalog"], 300)?;
    let map = build_remap(&tok, &new)?;
    let mut rows_ok = 0;
    for i in 0..map.new_size() {
        let cons = map.constituents(i);
        let len = cons.len() as u64;
        let mut mult: BTreeMap<u32, u64> = BTreeMap::new();
        for &c in cons {
            *mult.entry(c).or_default() += 1;
        }
        // Each weight is multiplicity / len; the numerators sum to len.
        let convex = len > 0 && mult.values().sum::<u64>() == len;
        let row = map.row(i);
        let weights_match = row.len() == mult.len()
            && row.iter().all(|&(old, w)| {
                let exact = mult[&old] as f64 / len as f64;
                (w - exact).abs() <= 4.0 * f64::EPSILON * exact
            });
        if convex && weights_match {
            rows_ok += 1;
        }
    }
    Ok(outcome(
        identical == 100 && rows_ok == map.new_size(),
        format!(
            "{identical}/100 inputs bit-identical; {rows_ok}/{} rows equal-weight convex",
            map.new_size()
        ),
    ))
}

struct TrendResults {
    sampled: RunSummary,
}

/// Criterion 6: half-split comparison of public, sampled and oracle
/// tokenizers.
fn trend(ws: &Workspace) -> Result<(Outcome, TrendResults)> {
    let sampled = run(&ws.config("sampled", Protocol::SampledTwoPhase))?;
    let mut oracle_cfg = ws.config("oracle", Protocol::Oracle);
    oracle_cfg.data.half_split = true;
    let oracle = run(&oracle_cfg)?;
    let mut public_cfg = ws.config("public", Protocol::Baseline);
    public_cfg.data.half_split = true;
    let public = run(&public_cfg)?;

    let kld_s = sampled.kld_sampled.unwrap_or(f64::INFINITY);
    let kld_p = sampled.kld_public;
    let a = kld_s < 0.25 * kld_p;
    let tpw = |s: &RunSummary| s.final_metrics.tokens_per_word;
    let b = tpw(&oracle) <= tpw(&sampled) && tpw(&sampled) <= tpw(&public);
    let ppl = |s: &RunSummary| s.final_metrics.perplexity_per_word;
    let c = ppl(&sampled) <= 1.1 * ppl(&oracle) && ppl(&sampled) < ppl(&public);
    let detail = format!(
        "(a) KLD sampled {kld_s:.3} vs public {kld_p:.3} [{}]; (b) tokens/word oracle {:.3} <= sampled {:.3} <= public {:.3} [{}]; \
         (c) perplexity oracle {:.2}, sampled {:.2}, public {:.2} [{}]",
        ok_str(a),
        tpw(&oracle),
        tpw(&sampled),
        tpw(&public),
        ok_str(b),
        ppl(&oracle),
        ppl(&sampled),
        ppl(&public),
        ok_str(c),
    );
    Ok((outcome(a && b && c, detail), TrendResults { sampled }))
}

/// Criterion 7: switching mid-training ends below the never-switched run.
fn switch_shape(ws: &Workspace) -> Result<Outcome> {
    let switched = run(&ws.config("switch", Protocol::SwitchAtRound(SWITCH_ROUND)))?;
    let baseline = run(&ws.config("never_switched", Protocol::Baseline))?;
    let at = |s: &RunSummary, t: usize| {
        s.curve
            .iter()
            .filter(|p| p.t == t)
            .map(|p| p.perplexity)
            .collect::<Vec<_>>()
    };
    let end = |s: &RunSummary| s.curve.last().map(|p| p.perplexity).unwrap_or(f64::INFINITY);
    let around = at(&switched, SWITCH_ROUND);
    let jump = around.len() == 2 && around[1] != around[0];
    let pass = end(&switched) < end(&baseline);
    Ok(outcome(
        pass,
        format!(
            "final perplexity switched {:.2} vs never switched {:.2}; at round {SWITCH_ROUND}: {:.2} -> {:.2} after remap{}",
            end(&switched),
            end(&baseline),
            around.first().copied().unwrap_or(f64::NAN),
            around.get(1).copied().unwrap_or(f64::NAN),
            if jump { "" } else { " (no discontinuity recorded)" }
        ),
    ))
}

/// Criterion 8: word-level tokenizer from public text against one from
/// private text.
fn word_level(ws: &Workspace) -> Result<Outcome> {
    let mut public_cfg = ws.config("word_public", Protocol::Baseline);
    public_cfg.tokenizer.kind = TokenizerKind::WordLevel;
    public_cfg.schedule.rounds = WORD_ROUNDS;
    let mut oracle_cfg = public_cfg.clone();
    oracle_cfg.protocol = Protocol::Oracle;
    oracle_cfg.out_dir = ws.root.join("word_oracle");
    let public = run(&public_cfg)?;
    let oracle = run(&oracle_cfg)?;
    let oov = public.final_metrics.oov_rate.unwrap_or(0.0);
    let (acc_p, acc_o) = (public.final_metrics.word_accuracy, oracle.final_metrics.word_accuracy);
    Ok(outcome(
        oov > 0.0 && acc_p < acc_o,
        format!(
            "public OOV {oov:.4}; accuracy public {acc_p:.4} vs oracle {acc_o:.4} (oracle OOV {:.4})",
            oracle.final_metrics.oov_rate.unwrap_or(f64::NAN)
        ),
    ))
}

/// Criterion 9: estimator unbiasedness and the corpus divergence ordering.
fn heavy_hitters(ws: &Workspace, trend: Option<&TrendResults>) -> Result<Outcome> {
    let domain: Vec<String> = (0..5).map(|i| format!("w{i}")).collect();
    let truth = [0usize, 0, 0, 0, 1, 1, 2, 4, 4, 0];
    let users: Vec<UserDataset> = truth
        .iter()
        .enumerate()
        .map(|(k, &i)| UserDataset {
            user_id: format!("u{k}"),
            sentences: vec![domain[i].clone()],
        })
        .collect();
    let want = [5.0, 2.0, 1.0, 0.0, 2.0];
    let eps = 1.0;
    let trials = 10_000;
    let (mut sum, mut sq) = ([0.0f64; 5], [0.0f64; 5]);
    for t in 0..trials {
        let est = aggregate(&collect_reports(&users, 1, &domain, eps, t)?, 5, 1, eps)?;
        for i in 0..5 {
            sum[i] += est.counts[i];
            sq[i] += est.counts[i] * est.counts[i];
        }
    }
    let mut worst_z = 0.0f64;
    for i in 0..5 {
        let mean = sum[i] / trials as f64;
        let se = ((sq[i] / trials as f64 - mean * mean) / trials as f64).sqrt();
        worst_z = worst_z.max((mean - want[i]).abs() / se);
    }
    let unbiased = worst_z < 3.0;

    let population = ws.root.join("hh_population.jsonl");
    let spec = SynthSpec {
        min_sentences: 1,
        max_sentences: 1,
        min_words: 3,
        max_words: 6,
        ..synth_spec()
    };
    write_jsonl(&population, &extra_private_users(&spec, HH_POPULATION)?)?;
    let mut cfg = ws.config("hh", Protocol::HeavyHitters);
    cfg.heavy_hitters.population = Some(population);
    cfg.schedule.rounds = 1;
    let hh = run(&cfg)?;
    let ledger_local = read_ledger(&cfg.out_dir)
        .iter()
        .any(|r| r.entry.budget == Budget::Local && r.entry.additional_epsilon == Some(8.0));
    let kld_hh = hh.kld_hh.unwrap_or(f64::INFINITY);
    let kld_sampled = trend.and_then(|t| t.sampled.kld_sampled);
    let ordered = match kld_sampled {
        Some(s) => hh.kld_public > kld_hh && kld_hh > s,
        None => false,
    };
    Ok(outcome(
        unbiased && ordered && ledger_local,
        format!(
            "max |bias| {worst_z:.2} standard errors (< 3); KLD public {:.3} > heavy hitters {kld_hh:.3} > sampled {}",
            hh.kld_public,
            kld_sampled.map_or("unavailable".into(), |s| format!("{s:.3}"))
        ),
    ))
}

fn read_ledger(dir: &Path) -> Vec<LedgerRow> {
    fs::read_to_string(dir.join("privacy_ledger.jsonl"))
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Compile-time check: the update step's inputs are a model, a tokenizer
/// and plain numeric settings. None of them can carry a user dataset.
fn update_takes_no_user_data() {
    fn copy_only<T: Copy>() {}
    let _: fn(&LmParams, &Tokenizer, &UpdateConfig) -> Result<UpdateOutcome> = update;
    copy_only::<UpdateConfig>();
}

/// Criterion 10: zero budget for the tokenizer update.
fn zero_budget() -> Result<Outcome> {
    update_takes_no_user_data();
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SynthSpec {
        shared_words: 60,
        novel_words: 10,
        private_users: 24,
        public_users: 40,
        seed: 3,
        ..SynthSpec::default()
    };
    let c = generate(&spec)?;
    write_jsonl(&dir.path().join("public.jsonl"), &c.public)?;
    write_jsonl(&dir.path().join("private.jsonl"), &c.private)?;
    let mut cfg = ExperimentConfig::desk();
    cfg.protocol = Protocol::SwitchAtRound(2);
    cfg.out_dir = dir.path().join("run");
    cfg.data.public = dir.path().join("public.jsonl");
    cfg.data.private = dir.path().join("private.jsonl");
    cfg.tokenizer.vocab_size = 280;
    cfg.model = pfltok::experiment::ModelConfig {
        embed_dim: 4,
        hidden_dim: 6,
        num_layers: 1,
        max_seq_len: 48,
    };
    cfg.privacy.noise_multiplier = None;
    cfg.privacy.population = 1000;
    cfg.privacy.cohort_size = 4;
    cfg.schedule.rounds = 4;
    cfg.schedule.checkpoint_every = 0;
    cfg.sampling.corpus_size = Some(30);
    cfg.sampling.l_max = 16;
    run_experiment(&cfg)?;
    let ledger = read_ledger(&cfg.out_dir);
    let updates: Vec<&LedgerRow> = ledger.iter().filter(|r| r.entry.event == "tokenizer_update").collect();
    let eps_before = ledger
        .iter()
        .filter(|r| r.entry.event == "round" && r.entry.round == 2)
        .find_map(|r| r.entry.cumulative_epsilon);
    let pass = updates.len() == 1
        && updates[0].entry.additional_epsilon == Some(0.0)
        && updates[0].entry.cumulative_epsilon == eps_before
        && eps_before.is_some();
    Ok(outcome(
        pass,
        format!(
            "tokenizer_update rows {}, additional epsilon {:?}, cumulative epsilon carried over {:?}; update signature has no user data",
            updates.len(),
            updates.first().and_then(|r| r.entry.additional_epsilon),
            eps_before
        ),
    ))
}

fn ok_str(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn main() {
    let mut results: Vec<(usize, &str, Duration, Duration, Result<Outcome>)> = Vec::new();
    let mut record = |id: usize, name: &'static str, limit_s: u64, f: &mut dyn FnMut() -> Result<Outcome>| {
        let t0 = Instant::now();
        let r = f();
        results.push((id, name, t0.elapsed(), Duration::from_secs(limit_s), r));
    };
    record(1, "gradient correctness", 30, &mut gradient_check);
    record(2, "degenerate federated averaging", 10, &mut degenerate_fedavg);
    record(3, "dp invariants", 10, &mut dp_invariants);
    record(4, "sampler fidelity", 30, &mut sampler_fidelity);
    record(5, "remap algebra", 5, &mut remap_algebra);

    let ws = Workspace::new();
    let mut trend_results = None;
    record(6, "trend reproduction", 900, &mut || {
        let (o, t) = trend(&ws)?;
        trend_results = Some(t);
        Ok(o)
    });
    record(7, "switch shape", 900, &mut || switch_shape(&ws));
    record(8, "word-level degradation", 600, &mut || word_level(&ws));
    record(9, "heavy hitters", 300, &mut || {
        heavy_hitters(&ws, trend_results.as_ref())
    });
    record(10, "zero-budget update", 1, &mut zero_budget);

    let mut failed = Vec::new();
    for (id, name, took, limit, r) in &results {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = took <= limit;
        let pass = pass && in_time;
        println!(
            "[{}] criterion {id} ({name}): {detail}; {:.1}s (limit {}s{})",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", exceeded" }
        );
        if !pass {
            failed.push(*id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
