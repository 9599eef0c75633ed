//! Variance schedule and the closed-form diffusion identities shared by
//! training and every sampler.
//!
//! Steps are indexed `1..=T`. Index 0 is the clean-data level, with
//! `alpha_bar(0) == 1`. A reverse pass walks `t = T, T-1, ..., 1`, and the
//! step at `t` maps `x_t` to `x_{t-1}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::Point2;

/// Parameters a linear schedule is rebuilt from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    // All arrays have length T + 1; slot 0 is the clean level.
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sqrt_alpha: Vec<f64>,
    sqrt_beta: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_start) || !in_unit(beta_end) {
            return Err(Error::InvalidSchedule(format!(
                "betas must lie in (0, 1), got {beta_start} and {beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::InvalidSchedule(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }

        let mut beta = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        for i in 0..steps {
            let b = if steps == 1 {
                beta_start
            } else if i == steps - 1 {
                beta_end
            } else {
                beta_start + (beta_end - beta_start) * (i as f64) / ((steps - 1) as f64)
            };
            beta.push(b);
        }

        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut acc = 1.0;
        alpha_bar.push(acc);
        for &a in &alpha[1..] {
            acc *= a;
            alpha_bar.push(acc);
        }

        Ok(Self {
            params: ScheduleParams {
                steps,
                beta_start,
                beta_end,
            },
            sqrt_alpha: alpha.iter().map(|a| a.sqrt()).collect(),
            sqrt_beta: beta.iter().map(|b| b.sqrt()).collect(),
            sqrt_alpha_bar: alpha_bar.iter().map(|a| a.sqrt()).collect(),
            sqrt_one_minus_alpha_bar: alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect(),
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `alpha_bar(0)` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_alpha_bar[t]
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_one_minus_alpha_bar[t]
    }

    pub fn sqrt_beta(&self, t: usize) -> f64 {
        self.sqrt_beta[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn forward_noising(&self, x0: Point2, t: usize, eps: Point2) -> Result<Point2> {
        self.check_step(t)?;
        Ok(self.sqrt_alpha_bar[t] * x0 + self.sqrt_one_minus_alpha_bar[t] * eps)
    }

    /// Mean of the learned reverse transition `p(x_{t-1} | x_t)`.
    pub fn posterior_mean(&self, x_t: Point2, eps_hat: Point2, t: usize) -> Result<Point2> {
        self.check_step(t)?;
        Ok(self.posterior_mean_unchecked(x_t, eps_hat, t))
    }

    #[inline]
    pub(crate) fn posterior_mean_unchecked(&self, x_t: Point2, eps_hat: Point2, t: usize) -> Point2 {
        let k = self.beta[t] / self.sqrt_one_minus_alpha_bar[t];
        (x_t - k * eps_hat) * (1.0 / self.sqrt_alpha[t])
    }

    /// Tweedie estimate of the clean sample behind `x_t`.
    pub fn tweedie_x0(&self, x_t: Point2, eps_hat: Point2, t: usize) -> Result<Point2> {
        self.check_step(t)?;
        Ok(self.tweedie_x0_unchecked(x_t, eps_hat, t))
    }

    #[inline]
    pub(crate) fn tweedie_x0_unchecked(&self, x_t: Point2, eps_hat: Point2, t: usize) -> Point2 {
        (x_t - self.sqrt_one_minus_alpha_bar[t] * eps_hat) * (1.0 / self.sqrt_alpha_bar[t])
    }
}
