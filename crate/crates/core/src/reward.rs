//! Reward functions and the one-shot value estimate `V(x_t) ~ r(x0_hat(x_t))`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EpsPredictor;
use crate::point::Point2;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    /// Density of `N(mu_r, sigma_r^2 I)` evaluated at `x`.
    Gaussian { mu_r: Point2, sigma_r: f64 },
    /// `-delta * floor(|x - mu_r| / delta)`: piecewise constant, so its
    /// gradient is zero almost everywhere.
    Quantized { mu_r: Point2, delta: f64 },
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec::Gaussian {
            mu_r: Point2::new(14.0, 3.0),
            sigma_r: 2.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RewardSpec::Gaussian { mu_r, sigma_r } => {
                if !(sigma_r > 0.0) || !sigma_r.is_finite() || !mu_r.is_finite() {
                    return Err(Error::InvalidReward(format!("sigma_r must be positive, got {sigma_r}")));
                }
            }
            RewardSpec::Quantized { mu_r, delta } => {
                if !(delta > 0.0) || !delta.is_finite() || !mu_r.is_finite() {
                    return Err(Error::InvalidReward(format!("delta must be positive, got {delta}")));
                }
            }
        }
        Ok(())
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            RewardSpec::Gaussian { .. } => "gaussian",
            RewardSpec::Quantized { .. } => "quantized",
        }
    }

    pub fn mean(&self) -> Point2 {
        match *self {
            RewardSpec::Gaussian { mu_r, .. } | RewardSpec::Quantized { mu_r, .. } => mu_r,
        }
    }

    /// Same reward shape centred somewhere else.
    pub fn with_mean(&self, mean: Point2) -> RewardSpec {
        match *self {
            RewardSpec::Gaussian { sigma_r, .. } => RewardSpec::Gaussian { mu_r: mean, sigma_r },
            RewardSpec::Quantized { delta, .. } => RewardSpec::Quantized { mu_r: mean, delta },
        }
    }

    /// Isotropic spread used when drawing reference points near the reward
    /// mode: `sigma_r` for the Gaussian reward, `delta` for the quantized one.
    pub fn spread(&self) -> f64 {
        match *self {
            RewardSpec::Gaussian { sigma_r, .. } => sigma_r,
            RewardSpec::Quantized { delta, .. } => delta,
        }
    }

    /// Reward of `x`. A non-finite point (a diverged sample) gets the limit
    /// at infinity: 0 for the density, `-inf` for the quantized reward.
    pub fn reward(&self, x: Point2) -> f64 {
        if !x.is_finite() {
            return match self {
                RewardSpec::Gaussian { .. } => 0.0,
                RewardSpec::Quantized { .. } => f64::NEG_INFINITY,
            };
        }
        match *self {
            RewardSpec::Gaussian { mu_r, sigma_r } => {
                let s2 = sigma_r * sigma_r;
                (-(x - mu_r).norm_sq() / (2.0 * s2)).exp() / (2.0 * PI * s2)
            }
            RewardSpec::Quantized { mu_r, delta } => -delta * ((x - mu_r).norm() / delta).floor(),
        }
    }

    /// Exact log-density of the Gaussian reward.
    pub fn log_reward(&self, x: Point2) -> Result<f64> {
        match *self {
            RewardSpec::Gaussian { .. } if !x.is_finite() => Ok(f64::NEG_INFINITY),
            RewardSpec::Gaussian { mu_r, sigma_r } => {
                let s2 = sigma_r * sigma_r;
                Ok(-(x - mu_r).norm_sq() / (2.0 * s2) - (2.0 * PI * s2).ln())
            }
            RewardSpec::Quantized { .. } => Err(self.unsupported("log_reward")),
        }
    }

    /// Gradient of [`log_reward`](Self::log_reward): `(mu_r - x) / sigma_r^2`.
    pub fn reward_grad(&self, x: Point2) -> Result<Point2> {
        match *self {
            RewardSpec::Gaussian { mu_r, sigma_r } => Ok((mu_r - x) * (1.0 / (sigma_r * sigma_r))),
            RewardSpec::Quantized { .. } => Err(self.unsupported("reward_grad")),
        }
    }

    fn unsupported(&self, op: &'static str) -> Error {
        Error::UnsupportedReward {
            op,
            variant: self.variant_name(),
        }
    }

    /// Monotone transform of the reward used to rank candidates: the
    /// log-density for the Gaussian reward (no underflow far from the mode),
    /// the raw value otherwise.
    pub(crate) fn ranking_score(&self, x: Point2) -> f64 {
        match self {
            RewardSpec::Gaussian { .. } => self.log_reward(x).expect("gaussian variant"),
            RewardSpec::Quantized { .. } => self.reward(x),
        }
    }
}

/// Value estimate of a noisy state: the reward of its Tweedie denoising.
///
/// For `t > 0` this is `log_reward(x0_hat)` for the Gaussian reward and
/// `reward(x0_hat)` for the quantized one. At `t == 0` there is nothing left
/// to denoise and the terminal reward `reward(x_t)` is returned.
pub fn estimate_value<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    x_t: Point2,
    t: usize,
) -> Result<f64> {
    if t == 0 {
        return Ok(spec.reward(x_t));
    }
    sched.check_step(t)?;
    Ok(ranking_values(model, sched, spec, &[x_t], t)[0])
}

/// Ranking scores of a batch of states at step `t` (`0..=T`).
pub(crate) fn ranking_values<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    xs: &[Point2],
    t: usize,
) -> Vec<f64> {
    if t == 0 {
        return xs.iter().map(|&x| spec.ranking_score(x)).collect();
    }
    let eps = model.predict_at(xs, t, sched);
    xs.iter()
        .zip(&eps)
        .map(|(&x, &e)| spec.ranking_score(sched.tweedie_x0_unchecked(x, e, t)))
        .collect()
}
