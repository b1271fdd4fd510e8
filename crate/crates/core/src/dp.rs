//! Central differential privacy: per-user clipping, the Gaussian mechanism
//! and a Rényi-DP accountant for the Poisson-subsampled Gaussian.
//!
//! `sigma` is always a noise *multiplier*: the noise added to a sum of
//! updates clipped to L2 norm `S` has per-coordinate stddev `sigma * S`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::lm::GradientVector;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_bound: f64,
    pub noise_multiplier: f64,
    pub target_epsilon: f64,
    pub target_delta: f64,
    pub population: usize,
    pub cohort_size: usize,
    pub rounds: usize,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.clip_bound > 0.0
            && self.noise_multiplier >= 0.0
            && self.target_delta > 0.0
            && self.target_delta < 1.0
            && self.cohort_size > 0
            && self.cohort_size <= self.population
            && self.rounds >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid DP config: {self:?}")))
        }
    }

    /// `m / N`, the sampling rate the accountant assumes.
    pub fn sampling_rate(&self) -> f64 {
        self.cohort_size as f64 / self.population as f64
    }
}

/// Scales `g` by `min(1, bound / ||g||)`.
pub fn clip(g: &GradientVector, bound: f64) -> Result<GradientVector> {
    if !(bound > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip bound must be positive, got {bound}"
        )));
    }
    if g.values().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("client update"));
    }
    let norm = g.norm();
    if norm <= bound {
        return Ok(g.clone());
    }
    let mut out = g.clone();
    out.scale(bound / norm);
    Ok(out)
}

/// Adds i.i.d. `N(0, (sigma * bound)^2)` noise to every coordinate.
pub fn add_noise<R: Rng + ?Sized>(sum: &GradientVector, sigma: f64, bound: f64, rng: &mut R) -> GradientVector {
    let mut out = sum.clone();
    if sigma == 0.0 {
        return out;
    }
    let std = sigma * bound;
    out.update(|v| {
        for x in v.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x += std * z;
        }
    });
    out
}

/// Rényi orders 1.25, 1.5, ..., 64.
pub fn rdp_orders() -> Vec<f64> {
    (5..=256).map(|k| k as f64 * 0.25).collect()
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `log(exp(a) - exp(b))` for `a > b`.
fn log_sub(a: f64, b: f64) -> Option<f64> {
    if b == f64::NEG_INFINITY {
        return Some(a);
    }
    if b >= a {
        return None;
    }
    Some(a + (-(b - a).exp()).ln_1p())
}

fn log_erfc(x: f64) -> f64 {
    let r = erfc(x);
    if r > 0.0 {
        r.ln()
    } else {
        // Asymptotic expansion for large positive x.
        -std::f64::consts::PI.ln() / 2.0 - x.ln() - x * x - 0.5 * x.powi(-2) + 0.625 * x.powi(-4)
            - 37.0 / 24.0 * x.powi(-6)
            + 353.0 / 64.0 * x.powi(-8)
    }
}

fn log_comb(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (log_q, log_1mq) = (q.ln(), (-q).ln_1p());
    let a = alpha as f64;
    (0..=alpha).fold(f64::NEG_INFINITY, |acc, i| {
        let i = i as f64;
        let term = log_comb(a, i) + i * log_q + (a - i) * log_1mq + (i * i - i) / (2.0 * sigma * sigma);
        log_add(acc, term)
    })
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (log_q, log_1mq) = (q.ln(), (-q).ln_1p());
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let s2 = std::f64::consts::SQRT_2 * sigma;
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    // Generalized binomial coefficient, tracked as log-magnitude and sign.
    let (mut log_coef, mut positive) = (0.0f64, true);
    for i in 0..100_000u32 {
        let fi = f64::from(i);
        if i > 0 {
            let factor = alpha - (fi - 1.0);
            log_coef += factor.abs().ln() - fi.ln();
            if factor < 0.0 {
                positive = !positive;
            }
        }
        let j = alpha - fi;
        let log_t0 = log_coef + fi * log_q + j * log_1mq;
        let log_t1 = log_coef + j * log_q + fi * log_1mq;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / s2);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / s2);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if positive {
            a0 = log_add(a0, log_s0);
            a1 = log_add(a1, log_s1);
        } else {
            match (log_sub(a0, log_s0), log_sub(a1, log_s1)) {
                (Some(x), Some(y)) => {
                    a0 = x;
                    a1 = y;
                }
                _ => return f64::INFINITY,
            }
        }
        if log_s0.max(log_s1) < -30.0 {
            return log_add(a0, a1);
        }
    }
    f64::INFINITY
}

/// RDP at order `alpha` of one round of the Poisson-subsampled Gaussian
/// mechanism with sampling rate `q` and noise multiplier `sigma`.
pub fn subsampled_gaussian_rdp(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q >= 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    log_a / (alpha - 1.0)
}

/// Per-order RDP of a single round, cached for cheap repeated conversion.
#[derive(Debug, Clone)]
pub struct RdpAccountant {
    orders: Vec<f64>,
    per_round: Vec<f64>,
    pub sigma: f64,
    pub q: f64,
}

impl RdpAccountant {
    pub fn new(sigma: f64, q: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !(q > 0.0 && q <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "accountant needs sigma >= 0 and q in (0, 1], got sigma={sigma}, q={q}"
            )));
        }
        let orders = rdp_orders();
        let per_round = orders.iter().map(|&a| subsampled_gaussian_rdp(q, sigma, a)).collect();
        Ok(RdpAccountant {
            orders,
            per_round,
            sigma,
            q,
        })
    }

    /// `min_alpha [rounds * rdp(alpha) + log(1/delta) / (alpha - 1)]`.
    pub fn epsilon(&self, rounds: usize, delta: f64) -> Result<f64> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must be in (0, 1), got {delta}")));
        }
        let t = rounds as f64;
        let log_inv_delta = -delta.ln();
        let eps = self
            .orders
            .iter()
            .zip(&self.per_round)
            .map(|(&a, &r)| t * r + log_inv_delta / (a - 1.0))
            .filter(|e| e.is_finite())
            .fold(f64::INFINITY, f64::min);
        if eps.is_finite() {
            Ok(eps)
        } else {
            Err(Error::Accounting(format!(
                "no finite epsilon at any order (sigma={}, q={}, rounds={rounds})",
                self.sigma, self.q
            )))
        }
    }
}

/// (ε, δ) spent by `rounds` rounds of the subsampled Gaussian mechanism.
pub fn accountant_epsilon(sigma: f64, q: f64, rounds: usize, delta: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    RdpAccountant::new(sigma, q)?.epsilon(rounds, delta)
}

/// Upper bound of the σ search range.
pub const MAX_SIGMA: f64 = 100.0;
/// Relative width at which the σ bisection stops.
pub const SIGMA_TOLERANCE: f64 = 1e-3;

/// Smallest noise multiplier (to within [`SIGMA_TOLERANCE`]) whose
/// accounted epsilon does not exceed `epsilon`.
pub fn calibrate_sigma(epsilon: f64, delta: f64, q: f64, rounds: usize) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if accountant_epsilon(MAX_SIGMA, q, rounds, delta)? > epsilon {
        return Err(Error::Accounting(format!(
            "epsilon {epsilon} unreachable with sigma <= {MAX_SIGMA}"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, MAX_SIGMA);
    while hi - lo > SIGMA_TOLERANCE * hi {
        let mid = 0.5 * (lo + hi);
        if accountant_epsilon(mid, q, rounds, delta)? <= epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Which budget a ledger row draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Central,
    Local,
}

/// One row of the privacy ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub event: String,
    pub budget: Budget,
    pub sigma: f64,
    pub q: f64,
    /// Cumulative epsilon of this budget; `None` when unbounded (σ = 0).
    pub cumulative_epsilon: Option<f64>,
    pub additional_epsilon: Option<f64>,
    pub delta: f64,
}
