//! Simulated federated averaging with central differential privacy.
//!
//! Each round samples a cohort, trains every client locally from a shared
//! snapshot, clips each client delta, sums the clipped deltas in `user_id`
//! order, adds Gaussian noise once, averages by the cohort size and hands
//! the result to the server optimizer.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::UserDataset;
use crate::dp::{add_noise, clip, DpConfig, RdpAccountant};
use crate::lm::{local_train_encoded, prepare_sequences, GradientVector, LmParams, LocalConfig};
use crate::rng::{hash_str, rng_from};
use crate::tokenizer::{TokenSeq, Tokenizer};
use crate::{Error, Result};

const NOISE_TAG: u64 = 0x0015e;
const COHORT_TAG: u64 = 0xc0407;

/// A user's sentences, already tokenized for the current model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedUser {
    pub user_id: String,
    pub seqs: Vec<TokenSeq>,
}

pub fn encode_users(users: &[UserDataset], tok: &Tokenizer, max_len: usize) -> Vec<EncodedUser> {
    users
        .par_iter()
        .map(|u| EncodedUser {
            user_id: u.user_id.clone(),
            seqs: prepare_sequences(&u.sentences, tok, max_len),
        })
        .collect()
}

/// Uniform sample of `m` users without replacement (all users if `m` exceeds
/// the population), in population order.
pub fn select_cohort<'a, T, R: Rng + ?Sized>(users: &'a [T], m: usize, rng: &mut R) -> Vec<&'a T> {
    if m >= users.len() {
        return users.iter().collect();
    }
    let mut idx = sample(rng, users.len(), m).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &users[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerOptKind {
    Sgd,
    Adam,
}

/// Server optimizer. The averaged noisy delta is treated as an ascent
/// direction, so SGD with `lr = 1` adds it unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptState {
    pub kind: ServerOptKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl ServerOptState {
    pub fn new(kind: ServerOptKind, lr: f64, num_params: usize) -> Self {
        let moments = match kind {
            ServerOptKind::Sgd => 0,
            ServerOptKind::Adam => num_params,
        };
        ServerOptState {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: vec![0.0; moments],
            second: vec![0.0; moments],
            steps: 0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        ServerOptState::new(ServerOptKind::Sgd, lr, 0)
    }

    pub fn adam(lr: f64, num_params: usize) -> Self {
        ServerOptState::new(ServerOptKind::Adam, lr, num_params)
    }

    /// Fresh state of the same kind for a model with `num_params` parameters.
    pub fn reset(&self, num_params: usize) -> Self {
        ServerOptState {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            ..ServerOptState::new(self.kind, self.lr, num_params)
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn apply(&mut self, params: &mut LmParams, update: &[f64]) -> Result<()> {
        if update.len() != params.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "server update has {} entries, model has {}",
                update.len(),
                params.num_params()
            )));
        }
        self.steps += 1;
        match self.kind {
            ServerOptKind::Sgd => params.add_scaled(self.lr, update),
            ServerOptKind::Adam => {
                if self.first.len() != update.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "Adam moments have {} entries, update has {}",
                        self.first.len(),
                        update.len()
                    )));
                }
                let t = self.steps as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                let (b1, b2) = (self.beta1, self.beta2);
                let p = params.as_mut_slice();
                for i in 0..p.len() {
                    let g = update[i];
                    self.first[i] = b1 * self.first[i] + (1.0 - b1) * g;
                    self.second[i] = b2 * self.second[i] + (1.0 - b2) * g * g;
                    let mhat = self.first[i] / c1;
                    let vhat = self.second[i] / c2;
                    p[i] += self.lr * mhat / (vhat.sqrt() + self.eps);
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub cohort: Vec<String>,
    /// Norm of the summed clipped deltas, before noise.
    pub sum_norm: f64,
    /// Largest norm among the clipped contributions.
    pub max_clipped_norm: f64,
    pub cumulative_epsilon: Option<f64>,
    pub mean_client_nll: f64,
}

struct ClientResult<'a> {
    user_id: &'a str,
    delta: GradientVector,
    loss: Option<f64>,
}

/// One round of DP federated averaging. Client RNGs depend only on
/// `(seed, round, user_id)`, so the result does not depend on cohort order.
pub fn run_round(
    params: &LmParams,
    opt: &mut ServerOptState,
    cohort: &[&EncodedUser],
    dp: &DpConfig,
    local: &LocalConfig,
    seed: u64,
    round: usize,
) -> Result<(LmParams, RoundReport)> {
    if cohort.is_empty() {
        return Err(Error::InvalidArgument("cohort is empty".into()));
    }
    let mut results = cohort
        .par_iter()
        .map(|u| {
            let mut rng = rng_from(seed, &[round as u64, hash_str(&u.user_id)]);
            let (delta, loss) = local_train_encoded(params, &u.seqs, local, &mut rng)?;
            Ok(ClientResult {
                user_id: &u.user_id,
                delta: clip(&delta, dp.clip_bound)?,
                loss: (!u.seqs.is_empty()).then_some(loss),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| a.user_id.cmp(b.user_id));

    let mut sum = GradientVector::zeros(params.num_params());
    let mut max_clipped_norm = 0.0f64;
    for r in &results {
        if !(r.delta.norm() <= dp.clip_bound * (1.0 + 1e-12)) {
            return Err(Error::Invariant(format!(
                "client {} contributed norm {} above clip bound {}",
                r.user_id,
                r.delta.norm(),
                dp.clip_bound
            )));
        }
        max_clipped_norm = max_clipped_norm.max(r.delta.norm());
        sum.add_assign(&r.delta)?;
    }
    let sum_norm = sum.norm();
    let mut noise_rng = rng_from(seed, &[round as u64, NOISE_TAG]);
    let mut update = add_noise(&sum, dp.noise_multiplier, dp.clip_bound, &mut noise_rng).into_vec();
    let m = cohort.len() as f64;
    update.iter_mut().for_each(|x| *x /= m);
    if update.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("server update"));
    }

    let mut next = params.clone();
    opt.apply(&mut next, &update)?;
    let losses: Vec<f64> = results.iter().filter_map(|r| r.loss).collect();
    let mean_client_nll = if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    let report = RoundReport {
        round,
        cohort: results.iter().map(|r| r.user_id.to_owned()).collect(),
        sum_norm,
        max_clipped_norm,
        cumulative_epsilon: None,
        mean_client_nll,
    };
    Ok((next, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub rounds: usize,
    /// Index of the first round; rounds already spent count towards epsilon.
    pub first_round: usize,
}

impl Schedule {
    pub fn new(rounds: usize) -> Self {
        Schedule { rounds, first_round: 0 }
    }
}

/// Runs `schedule.rounds` sequential rounds. `observer` sees the model and
/// report after every round, e.g. to evaluate or checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train(
    mut params: LmParams,
    opt: &mut ServerOptState,
    users: &[EncodedUser],
    dp: &DpConfig,
    local: &LocalConfig,
    schedule: Schedule,
    seed: u64,
    mut observer: impl FnMut(&LmParams, &RoundReport) -> Result<()>,
) -> Result<(LmParams, Vec<RoundReport>)> {
    if schedule.rounds == 0 {
        return Err(Error::InvalidArgument("training needs at least one round".into()));
    }
    if users.is_empty() {
        return Err(Error::InvalidArgument("no training users".into()));
    }
    let accountant = if dp.noise_multiplier > 0.0 {
        Some(RdpAccountant::new(dp.noise_multiplier, dp.sampling_rate().min(1.0))?)
    } else {
        None
    };
    let mut reports = Vec::with_capacity(schedule.rounds);
    for round in schedule.first_round..schedule.first_round + schedule.rounds {
        let mut rng = rng_from(seed, &[round as u64, COHORT_TAG]);
        let cohort = select_cohort(users, dp.cohort_size, &mut rng);
        let (next, mut report) = run_round(&params, opt, &cohort, dp, local, seed, round)?;
        report.cumulative_epsilon = match &accountant {
            Some(a) => Some(a.epsilon(round + 1, dp.target_delta)?),
            None => None,
        };
        params = next;
        observer(&params, &report)?;
        log::debug!(
            "round {round}: nll {:.4}, sum norm {:.4}",
            report.mean_client_nll,
            report.sum_norm
        );
        reports.push(report);
    }
    Ok((params, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::rng::rng_from;
    use crate::tokenizer::train_word_level;
    use std::collections::HashSet;

    fn dp(m: usize, n: usize, clip_bound: f64, sigma: f64) -> DpConfig {
        DpConfig {
            clip_bound,
            noise_multiplier: sigma,
            target_epsilon: 2.0,
            target_delta: 1e-6,
            population: n,
            cohort_size: m,
            rounds: 10,
        }
    }

    fn setup(n_users: usize) -> (LmParams, Vec<EncodedUser>) {
        let texts = ["a b c", "c b a", "b b a c", "a a", "c c b", "b a"];
        let tok = train_word_level(&texts, 10).unwrap();
        let cfg = LmConfig {
            vocab_size: tok.vocab_size(),
            embed_dim: 3,
            hidden_dim: 4,
            num_layers: 1,
            max_seq_len: 8,
        };
        let users: Vec<UserDataset> = (0..n_users)
            .map(|i| UserDataset {
                user_id: format!("user{i:02}"),
                sentences: (0..3).map(|k| texts[(i + k) % texts.len()].to_string()).collect(),
            })
            .collect();
        (LmParams::init(cfg, 11).unwrap(), encode_users(&users, &tok, 8))
    }

    #[test]
    fn cohort_selection() {
        let pop: Vec<u32> = (0..50).collect();
        let all = select_cohort(&pop, 50, &mut rng_from(1, &[]));
        assert_eq!(all.len(), 50);
        assert_eq!(select_cohort(&pop, 80, &mut rng_from(1, &[])).len(), 50);
        let a = select_cohort(&pop, 5, &mut rng_from(2, &[]));
        assert_eq!(a, select_cohort(&pop, 5, &mut rng_from(2, &[])));
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 5);
    }

    #[test]
    fn cohorts_differ_across_rounds() {
        let pop: Vec<u32> = (0..1000).collect();
        let cohorts: HashSet<Vec<u32>> = (0..20u64)
            .map(|r| {
                select_cohort(&pop, 10, &mut rng_from(5, &[r, COHORT_TAG]))
                    .into_iter()
                    .copied()
                    .collect()
            })
            .collect();
        assert_eq!(cohorts.len(), 20);
    }

    #[test]
    fn two_clients_average() {
        let cfg = LmConfig {
            vocab_size: 1,
            embed_dim: 1,
            hidden_dim: 1,
            num_layers: 1,
            max_seq_len: 2,
        };
        let mut p = LmParams::zeros(cfg).unwrap();
        let n = p.num_params();
        let mut e0 = vec![0.0; n];
        e0[0] = 1.0;
        let mut e1 = vec![0.0; n];
        e1[1] = 1.0;
        let sum: Vec<f64> = e0.iter().zip(&e1).map(|(a, b)| (a + b) / 2.0).collect();
        ServerOptState::sgd(1.0).apply(&mut p, &sum).unwrap();
        assert_eq!(&p.as_slice()[..2], &[0.5, 0.5]);
    }

    #[test]
    fn single_client_sgd_adds_its_delta() {
        let (params, users) = setup(1);
        let d = dp(1, 1, f64::INFINITY, 0.0);
        let local = LocalConfig::default();
        let (next, report) = run_round(&params, &mut ServerOptState::sgd(1.0), &[&users[0]], &d, &local, 3, 0).unwrap();
        let mut rng = rng_from(3, &[0, hash_str(&users[0].user_id)]);
        let (delta, _) = local_train_encoded(&params, &users[0].seqs, &local, &mut rng).unwrap();
        let mut want = params.clone();
        want.add_scaled(1.0, delta.values()).unwrap();
        assert_eq!(next, want);
        assert_eq!(report.sum_norm, delta.norm());
    }

    #[test]
    fn clipping_binds_and_cohort_order_is_irrelevant() {
        let (params, users) = setup(6);
        let d = dp(6, 6, 1e-3, 1.0);
        let local = LocalConfig::default();
        let fwd: Vec<&EncodedUser> = users.iter().collect();
        let rev: Vec<&EncodedUser> = users.iter().rev().collect();
        let (a, ra) = run_round(
            &params,
            &mut ServerOptState::adam(0.1, params.num_params()),
            &fwd,
            &d,
            &local,
            9,
            4,
        )
        .unwrap();
        let (b, rb) = run_round(
            &params,
            &mut ServerOptState::adam(0.1, params.num_params()),
            &rev,
            &d,
            &local,
            9,
            4,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.max_clipped_norm <= 1e-3 * (1.0 + 1e-12));
        assert!(ra.sum_norm <= 6e-3 * (1.0 + 1e-12));
    }

    #[test]
    fn empty_user_contributes_zero() {
        let (params, mut users) = setup(2);
        users[1].seqs.clear();
        let d = dp(2, 2, f64::INFINITY, 0.0);
        let local = LocalConfig::default();
        let (_, r) = run_round(
            &params,
            &mut ServerOptState::sgd(1.0),
            &[&users[0], &users[1]],
            &d,
            &local,
            1,
            0,
        )
        .unwrap();
        assert_eq!(r.cohort.len(), 2);
        let mut rng = rng_from(1, &[0, hash_str(&users[0].user_id)]);
        let (delta, _) = local_train_encoded(&params, &users[0].seqs, &local, &mut rng).unwrap();
        assert_eq!(r.sum_norm, delta.norm());
    }

    #[test]
    fn train_is_deterministic_and_epsilon_grows() {
        let (params, users) = setup(8);
        let d = dp(3, 8, 0.5, 1.2);
        let local = LocalConfig::default();
        let run = || {
            let mut opt = ServerOptState::adam(0.05, params.num_params());
            train(
                params.clone(),
                &mut opt,
                &users,
                &d,
                &local,
                Schedule::new(5),
                21,
                |_, _| Ok(()),
            )
            .unwrap()
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        assert_eq!(pa, pb);
        assert_eq!(ra, rb);
        let eps: Vec<f64> = ra.iter().map(|r| r.cumulative_epsilon.unwrap()).collect();
        assert!(eps.windows(2).all(|w| w[1] >= w[0]));
        assert!(ra.iter().all(|r| r.cohort.len() == 3));
    }

    #[test]
    fn zero_rounds_and_empty_inputs_are_errors() {
        let (params, users) = setup(2);
        let d = dp(1, 2, 1.0, 0.0);
        let local = LocalConfig::default();
        let mut opt = ServerOptState::sgd(1.0);
        assert!(train(
            params.clone(),
            &mut opt,
            &users,
            &d,
            &local,
            Schedule::new(0),
            1,
            |_, _| Ok(())
        )
        .is_err());
        assert!(train(
            params.clone(),
            &mut opt,
            &[],
            &d,
            &local,
            Schedule::new(1),
            1,
            |_, _| Ok(())
        )
        .is_err());
        assert!(run_round(&params, &mut opt, &[], &d, &local, 1, 0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let cfg = LmConfig {
            vocab_size: 1,
            embed_dim: 1,
            hidden_dim: 1,
            num_layers: 1,
            max_seq_len: 2,
        };
        let mut p = LmParams::zeros(cfg).unwrap();
        let n = p.num_params();
        let mut opt = ServerOptState::adam(0.5, n);
        let mut u = vec![0.0; n];
        u[0] = 3.0;
        u[1] = -0.01;
        opt.apply(&mut p, &u).unwrap();
        assert!((p.as_slice()[0] - 0.5).abs() < 1e-6);
        assert!((p.as_slice()[1] + 0.5).abs() < 1e-4);
        assert_eq!(p.as_slice()[2], 0.0);
        assert!(opt.apply(&mut p, &[0.0]).is_err());
    }
}
