use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsoConfig {
    /// Largest tolerated violation ratio.
    pub epsilon: f64,
    pub significance: f64,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for AsoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            significance: 0.001,
            bootstrap: 1000,
            seed: 0,
        }
    }
}

impl AsoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::InvalidConfig(format!("epsilon {} outside (0, 0.5)", self.epsilon)));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::InvalidConfig(format!("significance {} outside (0, 1)", self.significance)));
        }
        if self.bootstrap < 2 {
            return Err(Error::InvalidConfig("at least two bootstrap resamples are required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dominance {
    ADominates,
    BDominates,
    Inconclusive,
}

/// Outcome of the almost-stochastic-order test. `violation_ratio` and
/// `upper_bound` belong to the direction that was declared, or to the
/// direction with the smaller bound when the test is inconclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceVerdict {
    pub epsilon: f64,
    pub significance: f64,
    pub violation_ratio: f64,
    pub upper_bound: f64,
    pub decision: Dominance,
}

pub const MIN_SAMPLE: usize = 20;

/// Fraction of the squared quantile distance between the empirical
/// distributions of `a` and `b` lying where `a`'s quantile is below `b`'s,
/// i.e. how far `a` is from stochastically dominating `b` (larger is
/// better). Both inputs must be sorted ascending. Identical quantile
/// functions give 1.
pub fn violation_ratio(a: &[f64], b: &[f64]) -> f64 {
    violation_ratios(a, b).0
}

/// `(ratio for a over b, ratio for b over a)`.
fn violation_ratios(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0.0;
    let (mut below, mut above) = (0.0, 0.0);
    while i < n && j < m {
        // next breakpoint of either step function: min((i+1)/n, (j+1)/m)
        let (ai, bj) = ((i + 1) * m, (j + 1) * n);
        let next = if ai <= bj { (i + 1) as f64 / n as f64 } else { (j + 1) as f64 / m as f64 };
        let d = a[i] - b[j];
        let mass = (next - t) * d * d;
        if d < 0.0 {
            below += mass;
        } else {
            above += mass;
        }
        t = next;
        if ai <= bj {
            i += 1;
        }
        if bj <= ai {
            j += 1;
        }
    }
    let total = below + above;
    if total > 0.0 {
        (below / total, above / total)
    } else {
        (1.0, 1.0)
    }
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn resample(x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    sorted(&(0..x.len()).map(|_| x[rng.random_range(0..x.len())]).collect::<Vec<_>>())
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Almost-stochastic-order test with larger-is-better orientation. A
/// direction is declared when the bootstrap upper confidence bound on its
/// violation ratio falls below `epsilon`.
pub fn aso_test(a: &[f64], b: &[f64], cfg: &AsoConfig) -> Result<DominanceVerdict> {
    cfg.validate()?;
    if a.len() < MIN_SAMPLE || b.len() < MIN_SAMPLE {
        return Err(Error::InvalidInput(format!(
            "samples of size {} and {} are too small (need {MIN_SAMPLE})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dominance test sample".into()));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    let (eps_a, eps_b) = violation_ratios(&sa, &sb);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let scale = (n * m / (n + m)).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dev_a = Vec::with_capacity(cfg.bootstrap);
    let mut dev_b = Vec::with_capacity(cfg.bootstrap);
    for _ in 0..cfg.bootstrap {
        let (ra, rb) = violation_ratios(&resample(a, &mut rng), &resample(b, &mut rng));
        dev_a.push(scale * (ra - eps_a));
        dev_b.push(scale * (rb - eps_b));
    }
    let z = Normal::standard().inverse_cdf(1.0 - cfg.significance);
    let bound_a = eps_a + z * std_dev(&dev_a) / scale;
    let bound_b = eps_b + z * std_dev(&dev_b) / scale;

    let (decision, violation_ratio, upper_bound) = if bound_a < cfg.epsilon {
        (Dominance::ADominates, eps_a, bound_a)
    } else if bound_b < cfg.epsilon {
        (Dominance::BDominates, eps_b, bound_b)
    } else if bound_a <= bound_b {
        (Dominance::Inconclusive, eps_a, bound_a)
    } else {
        (Dominance::Inconclusive, eps_b, bound_b)
    };
    Ok(DominanceVerdict {
        epsilon: cfg.epsilon,
        significance: cfg.significance,
        violation_ratio,
        upper_bound,
        decision,
    })
}
