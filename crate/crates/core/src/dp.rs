//! Gaussian-mechanism privatization of Bernoulli parameters and Rényi-DP
//! budget accounting.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::BernoulliParams;
use crate::scalar::Real;

/// How the per-round noise level is derived from the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// Every round uses the full `(epsilon, delta)` to size its noise.
    #[default]
    PerRound,
    /// `epsilon` is split evenly across the rounds of a run.
    TotalBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta: f64,
    /// Privatized probabilities are clipped to `[clip_c, 1 - clip_c]`.
    pub clip_c: f64,
    /// L2 sensitivity of the released probability vector. Not derived from
    /// the data: reported epsilons are relative to this choice.
    #[serde(default = "default_sensitivity")]
    pub sensitivity: f64,
    #[serde(default)]
    pub schedule: NoiseSchedule,
}

fn default_sensitivity() -> f64 {
    1.0
}

impl Default for PrivacySpec {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: 9.8,
            delta: 1e-5,
            clip_c: 0.1,
            sensitivity: 1.0,
            schedule: NoiseSchedule::PerRound,
        }
    }
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta must lie in (0, 1)"));
        }
        if !(self.clip_c > 0.0 && self.clip_c < 0.5) {
            return Err(Error::config("clip_c must lie in (0, 0.5)"));
        }
        if !(self.sensitivity > 0.0) {
            return Err(Error::config("sensitivity must be positive"));
        }
        Ok(())
    }

    /// Noise standard deviation applied in every round of a `rounds`-round run.
    pub fn round_sigma(&self, rounds: usize) -> f64 {
        let eps = match self.schedule {
            NoiseSchedule::PerRound => self.epsilon,
            NoiseSchedule::TotalBudget => self.epsilon / rounds.max(1) as f64,
        };
        gaussian_sigma(eps, self.delta, self.sensitivity)
    }
}

/// Classical Gaussian mechanism: `sigma = sqrt(2 ln(1.25 / delta)) * sensitivity / epsilon`.
pub fn gaussian_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> f64 {
    (2.0 * (1.25 / delta).ln()).sqrt() * sensitivity / epsilon
}

/// Draws the `N(0, sigma²)` noise vector used by [`privatize`].
pub fn draw_noise<R: Rng + ?Sized>(sigma: f64, d: usize, rng: &mut R) -> Vec<f64> {
    (0..d)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `clamp(theta + N(0, sigma²), c, 1 - c)` per coordinate.
pub fn privatize<T: Real, R: Rng + ?Sized>(
    theta: &BernoulliParams<T>,
    sigma: f64,
    clip_c: f64,
    rng: &mut R,
) -> BernoulliParams<T> {
    assert!(clip_c > 0.0 && clip_c < 0.5, "clip_c must lie in (0, 0.5)");
    let noise = draw_noise(sigma, theta.len(), rng);
    let (lo, hi) = (T::lit(clip_c), T::lit(1.0 - clip_c));
    BernoulliParams::from_vec_unchecked(
        theta
            .as_slice()
            .iter()
            .zip(noise)
            .map(|(&p, n)| (p + T::lit(n)).max(lo).min(hi))
            .collect(),
    )
}

/// Rényi divergence of order `alpha` between `Bern(c)` and `Bern(1 - c)`:
/// `ln(c^a (1-c)^(1-a) + (1-c)^a c^(1-a)) / (a - 1)`.
pub fn gamma_alpha(c: f64, alpha: f64) -> f64 {
    assert!(c > 0.0 && c < 1.0, "c must lie in (0, 1)");
    assert!(alpha > 1.0, "order must exceed 1");
    // canonical pair: 1 - hi is exact for hi >= 0.5, so c and 1 - c map to
    // the same (lo, hi)
    let hi = c.max(1.0 - c);
    let lo = 1.0 - hi;
    if lo == hi {
        return 0.0;
    }
    let a = alpha * lo.ln() + (1.0 - alpha) * hi.ln();
    let b = alpha * hi.ln() + (1.0 - alpha) * lo.ln();
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    // the sum is >= 1 with equality at c = 1/2; guard rounding below zero
    (lse / (alpha - 1.0)).max(0.0)
}

/// Budget after Bernoulli post-processing of a clipped release over `d`
/// coordinates: `min(epsilon, d * gamma_alpha(c))`.
pub fn amplified_epsilon(epsilon: f64, d: usize, c: f64, alpha: f64) -> f64 {
    if d == 0 {
        return 0.0;
    }
    epsilon.min(d as f64 * gamma_alpha(c, alpha))
}

/// Default order grid: 1.5 and the integers 2..=64.
pub fn default_orders() -> Vec<f64> {
    std::iter::once(1.5)
        .chain((2..=64).map(f64::from))
        .collect()
}

/// Additive RDP composition of Gaussian releases over a fixed order grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpAccountant {
    orders: Vec<f64>,
    eps_at_order: Vec<f64>,
    rounds_accumulated: u64,
}

impl Default for RdpAccountant {
    fn default() -> Self {
        Self::new(default_orders()).expect("default grid is valid")
    }
}

impl RdpAccountant {
    pub fn new(orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::config("RDP order grid is empty"));
        }
        if let Some(a) = orders.iter().find(|&&a| !(a > 1.0 && a.is_finite())) {
            return Err(Error::config(format!("RDP order {a} must exceed 1")));
        }
        Ok(Self {
            eps_at_order: vec![0.0; orders.len()],
            orders,
            rounds_accumulated: 0,
        })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn eps_at_order(&self) -> &[f64] {
        &self.eps_at_order
    }

    pub fn rounds_accumulated(&self) -> u64 {
        self.rounds_accumulated
    }

    /// Adds `rounds` Gaussian releases of noise `sigma`; each contributes
    /// `alpha * sensitivity² / (2 sigma²)` at order `alpha`.
    pub fn accumulate(&mut self, sigma: f64, sensitivity: f64, rounds: u64) -> Result<()> {
        if !(sigma > 0.0) {
            return Err(Error::config("accountant needs sigma > 0"));
        }
        let per = sensitivity * sensitivity / (2.0 * sigma * sigma);
        for (eps, &alpha) in self.eps_at_order.iter_mut().zip(&self.orders) {
            *eps += rounds as f64 * alpha * per;
        }
        self.rounds_accumulated += rounds;
        Ok(())
    }

    /// `min over alpha of eps(alpha) + ln(1/delta) / (alpha - 1)`; zero before
    /// any release.
    pub fn to_dp(&self, delta: f64) -> f64 {
        if self.rounds_accumulated == 0 {
            return 0.0;
        }
        self.orders
            .iter()
            .zip(&self.eps_at_order)
            .map(|(&a, &e)| e + (1.0 / delta).ln() / (a - 1.0))
            .fold(f64::INFINITY, f64::min)
    }
}
