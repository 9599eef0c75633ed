//! Evaluation quantities for guided batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::Point2;
use crate::reward::RewardSpec;
use crate::sampler::Method;

/// Diagonal ridge added when a fitted covariance is numerically singular.
pub const COV_RIDGE: f64 = 1e-8;
/// Smallest eigenvalue below which the ridge is applied.
pub const COV_FLOOR: f64 = 1e-10;

/// Gaussian with full 2x2 covariance fitted to a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: Point2,
    pub cov: [[f64; 2]; 2],
}

impl GaussianFit {
    pub fn det(&self) -> f64 {
        self.cov[0][0] * self.cov[1][1] - self.cov[0][1] * self.cov[1][0]
    }

    /// Smallest eigenvalue of the (symmetric) covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        let [[a, b], [_, c]] = self.cov;
        let mid = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        mid - rad
    }

    fn is_positive_definite(&self) -> bool {
        self.cov[0][0] > 0.0 && self.det() > 0.0 && self.det().is_finite()
    }
}

fn require(samples: &[Point2], needed: usize) -> Result<()> {
    if samples.len() < needed {
        Err(Error::TooFewSamples {
            needed,
            got: samples.len(),
        })
    } else {
        Ok(())
    }
}

/// Number of samples with a non-finite coordinate.
pub fn count_diverged(samples: &[Point2]) -> usize {
    samples.iter().filter(|p| !p.is_finite()).count()
}

fn require_finite(samples: &[Point2]) -> Result<()> {
    match count_diverged(samples) {
        0 => Ok(()),
        count => Err(Error::NonFiniteSamples {
            count,
            total: samples.len(),
        }),
    }
}

fn mean(samples: &[Point2]) -> Point2 {
    let n = samples.len() as f64;
    samples.iter().fold(Point2::ZERO, |acc, &p| acc + p) * (1.0 / n)
}

/// Sample mean and unbiased covariance, with a diagonal ridge when the
/// smallest eigenvalue falls below [`COV_FLOOR`].
pub fn fit_gaussian(samples: &[Point2]) -> Result<GaussianFit> {
    require(samples, 2)?;
    require_finite(samples)?;
    let mu = mean(samples);
    let mut cov = [[0.0; 2]; 2];
    for &p in samples {
        let d = p - mu;
        cov[0][0] += d.x * d.x;
        cov[0][1] += d.x * d.y;
        cov[1][1] += d.y * d.y;
    }
    let denom = (samples.len() - 1) as f64;
    cov[0][0] /= denom;
    cov[0][1] /= denom;
    cov[1][1] /= denom;
    cov[1][0] = cov[0][1];

    if !(mu.is_finite() && cov.iter().flatten().all(|c| c.is_finite())) {
        return Err(Error::MomentOverflow);
    }
    let mut fit = GaussianFit { mean: mu, cov };
    if fit.min_eigenvalue() < COV_FLOOR {
        fit.cov[0][0] += COV_RIDGE;
        fit.cov[1][1] += COV_RIDGE;
    }
    Ok(fit)
}

/// Closed-form `KL(a || b)` between two 2D Gaussians.
pub fn gaussian_kl(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if !a.is_positive_definite() || !b.is_positive_definite() {
        return Err(Error::NotPositiveDefinite);
    }
    let det_b = b.det();
    let inv_b = [
        [b.cov[1][1] / det_b, -b.cov[0][1] / det_b],
        [-b.cov[1][0] / det_b, b.cov[0][0] / det_b],
    ];
    let trace = inv_b[0][0] * a.cov[0][0]
        + inv_b[0][1] * a.cov[1][0]
        + inv_b[1][0] * a.cov[0][1]
        + inv_b[1][1] * a.cov[1][1];
    let d = b.mean - a.mean;
    let maha = d.x * (inv_b[0][0] * d.x + inv_b[0][1] * d.y) + d.y * (inv_b[1][0] * d.x + inv_b[1][1] * d.y);
    let kl = 0.5 * (trace + maha - 2.0 + (det_b / a.det()).ln());
    Ok(kl.max(0.0))
}

/// Upper bound on `KL(guided || base)` for the selection-based methods.
///
/// With `c(N) = ln N - (N - 1) / N`: best-of-N is bounded by `c(N)`, blockwise
/// selection by `c(N) * eta T / B`, and per-step selection by `c(N) * eta T`.
/// Gradient guidance has no such bound.
pub fn kl_upper_bound(method: Method, n: usize, b: usize, steps: usize, eta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidGuidance("N must be at least 1".into()));
    }
    let nf = n as f64;
    let per_selection = nf.ln() - (nf - 1.0) / nf;
    let t = steps as f64;
    match method {
        Method::Base => Ok(0.0),
        Method::BoN => Ok(per_selection),
        Method::CoDe | Method::CoDeEta => {
            if b == 0 {
                return Err(Error::InvalidGuidance("block size must be at least 1".into()));
            }
            Ok(per_selection * eta * t / b as f64)
        }
        Method::SvddPm => Ok(per_selection * eta * t),
        Method::GradGuide => Err(Error::NoKlBound(method.tag())),
    }
}

/// Mean reward of a batch.
pub fn expected_reward(samples: &[Point2], spec: &RewardSpec) -> Result<f64> {
    require(samples, 1)?;
    Ok(samples.iter().map(|&x| spec.reward(x)).sum::<f64>() / samples.len() as f64)
}

/// Mean reward of `guided` divided by the mean reward of `base`.
pub fn normalized_reward(guided: &[Point2], base: &[Point2], spec: &RewardSpec) -> Result<f64> {
    Ok(expected_reward(guided, spec)? / expected_reward(base, spec)?)
}

/// Fraction of index-paired samples where the guided reward beats the base
/// reward; exact ties count one half.
pub fn win_rate(guided: &[Point2], base: &[Point2], spec: &RewardSpec) -> Result<f64> {
    if guided.len() != base.len() {
        return Err(Error::BatchMismatch(format!(
            "{} guided samples vs {} base samples",
            guided.len(),
            base.len()
        )));
    }
    require(guided, 1)?;
    let score: f64 = guided
        .iter()
        .zip(base)
        .map(|(&g, &b)| {
            let (rg, rb) = (spec.reward(g), spec.reward(b));
            if rg > rb {
                1.0
            } else if rg == rb {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(score / guided.len() as f64)
}

/// Per-coordinate unbiased sample variance.
pub fn batch_variance(samples: &[Point2]) -> Result<(f64, f64)> {
    require(samples, 2)?;
    require_finite(samples)?;
    let mu = mean(samples);
    let denom = (samples.len() - 1) as f64;
    let vx = samples.iter().map(|p| (p.x - mu.x).powi(2)).sum::<f64>() / denom;
    let vy = samples.iter().map(|p| (p.y - mu.y).powi(2)).sum::<f64>() / denom;
    if !(vx.is_finite() && vy.is_finite()) {
        return Err(Error::MomentOverflow);
    }
    Ok((vx, vy))
}

/// One line of a sweep's metrics table. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub n: usize,
    pub b: usize,
    pub eta: f64,
    pub scale: f64,
    pub seed: u64,
    pub expected_reward: f64,
    pub normalized_reward: f64,
    pub win_rate: f64,
    pub kl_fit: f64,
    /// Empty for methods without a bound.
    pub kl_bound: Option<f64>,
    pub variance_x: f64,
    pub variance_y: f64,
    /// Per-sample counters.
    pub model_evals: u64,
    pub reward_queries: u64,
    /// Empty unless timing was requested, so that tables are reproducible.
    pub wall_ms: Option<u64>,
}

impl MetricsRow {
    pub const COLUMNS: [&'static str; 16] = [
        "method",
        "n",
        "b",
        "eta",
        "scale",
        "seed",
        "expected_reward",
        "normalized_reward",
        "win_rate",
        "kl_fit",
        "kl_bound",
        "variance_x",
        "variance_y",
        "model_evals",
        "reward_queries",
        "wall_ms",
    ];
}
