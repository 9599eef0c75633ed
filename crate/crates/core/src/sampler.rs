//! Ancestral sampling and reward-guided variants.
//!
//! All blockwise methods share one engine: from the current state, `N`
//! streams are unrolled for `B` reverse steps, each endpoint is scored with
//! the Tweedie value estimate, and the best endpoint (lowest stream id on
//! ties) becomes the new state. Best-of-N is the single-block case `B = T`,
//! SVDD-PM the per-step case `B = 1`. When `B` does not divide the number of
//! steps the final block is shorter.
//!
//! Randomness is addressed, not consumed: the noise added by stream `n` at
//! step `t` of a run seeded `s` is always the draw at `(s, Step(t), n)`, and
//! the starting noise is `(s, Init, 0)`. Runs are advanced in lockstep in
//! batches; since batched model evaluation is bit-identical to per-point
//! evaluation, results never depend on chunking or thread count.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EpsPredictor;
use crate::point::Point2;
use crate::reward::{ranking_values, RewardSpec};
use crate::rng::{derive_seed, normal2, Purpose};
use crate::schedule::NoiseSchedule;

/// Target number of points per batched model evaluation.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "code")]
    CoDe,
    #[serde(rename = "code_eta")]
    CoDeEta,
    #[serde(rename = "bon")]
    BoN,
    #[serde(rename = "svdd_pm")]
    SvddPm,
    #[serde(rename = "grad_guide")]
    GradGuide,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Base,
        Method::CoDe,
        Method::CoDeEta,
        Method::BoN,
        Method::SvddPm,
        Method::GradGuide,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::CoDe => "code",
            Method::CoDeEta => "code_eta",
            Method::BoN => "bon",
            Method::SvddPm => "svdd_pm",
            Method::GradGuide => "grad_guide",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::InvalidGuidance(format!("unknown method {s:?}")))
    }
}

/// How the reward gradient is carried back through the Tweedie estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Differentiate through the noise predictor (vector-Jacobian product).
    #[default]
    Exact,
    /// Treat the predicted noise as constant: `d x0_hat / d x_t = I / sqrt(abar_t)`.
    Frozen,
}

/// Everything that determines a guided run besides the model and reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub method: Method,
    /// Number of parallel streams `N`.
    #[serde(default = "one")]
    pub n: usize,
    /// Block size `B` in reverse steps.
    #[serde(default = "default_block")]
    pub b: usize,
    /// Fraction of the schedule a noise-conditioned run starts from.
    #[serde(default = "unit")]
    pub eta: f64,
    /// Gradient-guidance strength.
    #[serde(default)]
    pub scale: f64,
    /// Reference point for noise-conditioned runs; drawn per run around the
    /// reward mode when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_ref: Option<Point2>,
    #[serde(default)]
    pub grad_mode: GradMode,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_block() -> usize {
    100
}

fn unit() -> f64 {
    1.0
}

impl GuidanceConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            n: 1,
            b: default_block(),
            eta: 1.0,
            scale: 0.0,
            x_ref: None,
            grad_mode: GradMode::Exact,
            seed: 0,
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_block(mut self, b: usize) -> Self {
        self.b = b;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Streams and block size the method actually runs with.
    pub fn effective_n(&self) -> usize {
        match self.method {
            Method::Base | Method::GradGuide => 1,
            _ => self.n,
        }
    }

    pub fn effective_block(&self, steps: usize) -> usize {
        match self.method {
            Method::Base | Method::BoN | Method::GradGuide => steps,
            Method::SvddPm => 1,
            Method::CoDe | Method::CoDeEta => self.b,
        }
    }

    pub fn effective_eta(&self) -> f64 {
        match self.method {
            Method::CoDeEta => self.eta,
            _ => 1.0,
        }
    }

    /// Number of reverse steps actually taken: `round(eta T)` for the
    /// noise-conditioned method, `T` otherwise.
    pub fn start_step(&self, steps: usize) -> usize {
        match self.method {
            Method::CoDeEta => start_step(self.eta, steps),
            _ => steps,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGuidance(msg));
        if self.effective_n() == 0 {
            return bad("N must be at least 1".into());
        }
        let b = self.effective_block(steps);
        if b == 0 || b > steps {
            return bad(format!("block size must lie in 1..={steps}, got {b}"));
        }
        if self.method == Method::CoDeEta {
            check_eta(self.eta, steps)?;
        }
        if self.method == Method::GradGuide && !(self.scale >= 0.0 && self.scale.is_finite()) {
            return bad(format!("guidance scale must be non-negative, got {}", self.scale));
        }
        Ok(())
    }
}

fn start_step(eta: f64, steps: usize) -> usize {
    (eta * steps as f64).round() as usize
}

fn check_eta(eta: f64, steps: usize) -> Result<usize> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidGuidance(format!("eta must lie in (0, 1], got {eta}")));
    }
    let tau = start_step(eta, steps);
    if tau == 0 {
        return Err(Error::InvalidGuidance(format!(
            "eta {eta} rounds to zero steps out of {steps}"
        )));
    }
    Ok(tau)
}

/// Work counters of a batch of runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleStats {
    /// Reverse denoising steps evaluated, summed over streams.
    pub model_evals: u64,
    /// Candidates scored by the value estimate or reward gradient.
    pub reward_queries: u64,
    /// Argmax selections performed.
    pub selections: u64,
}

impl SampleStats {
    fn add(&mut self, other: SampleStats) {
        self.model_evals += other.model_evals;
        self.reward_queries += other.reward_queries;
        self.selections += other.selections;
    }

    /// Counters of a single run, given totals over `runs` identical runs.
    pub fn per_run(&self, runs: usize) -> SampleStats {
        let r = runs.max(1) as u64;
        SampleStats {
            model_evals: self.model_evals / r,
            reward_queries: self.reward_queries / r,
            selections: self.selections / r,
        }
    }
}

/// Final samples of a batch of runs plus total work counters.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedBatch {
    pub samples: Vec<Point2>,
    pub stats: SampleStats,
}

#[inline]
fn reverse_step(sched: &NoiseSchedule, x_t: Point2, eps_hat: Point2, t: usize, noise: Point2) -> Point2 {
    let mean = sched.posterior_mean_unchecked(x_t, eps_hat, t);
    if t > 1 {
        mean + sched.sqrt_beta(t) * noise
    } else {
        mean
    }
}

/// One reverse transition `x_t -> x_{t-1}`: the learned mean plus
/// `sqrt(beta_t) * noise`. The final step `t = 1` returns the mean alone.
pub fn ddpm_step<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    x_t: Point2,
    t: usize,
    noise: Point2,
) -> Result<Point2> {
    sched.check_step(t)?;
    let eps = model.predict_at(&[x_t], t, sched)[0];
    Ok(reverse_step(sched, x_t, eps, t, noise))
}

/// Chunk `items` so that each chunk holds about `EVAL_BATCH / width` of them.
fn chunk_len(width: usize) -> usize {
    (EVAL_BATCH / width.max(1)).max(1)
}

/// Full ancestral rollouts; item `i` draws from stream `streams[i]` of `seeds[i]`.
fn ancestral<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    addresses: &[(u64, u64)],
) -> Vec<Point2> {
    addresses
        .par_chunks(chunk_len(1))
        .flat_map_iter(|chunk| {
            let mut xs: Vec<Point2> = chunk
                .iter()
                .map(|&(seed, stream)| normal2(seed, Purpose::Init, stream))
                .collect();
            for t in (1..=sched.steps()).rev() {
                let eps = model.predict_at(&xs, t, sched);
                for (i, &(seed, stream)) in chunk.iter().enumerate() {
                    let noise = if t > 1 { normal2(seed, Purpose::Step(t), stream) } else { Point2::ZERO };
                    xs[i] = reverse_step(sched, xs[i], eps[i], t, noise);
                }
            }
            xs
        })
        .collect()
}

/// `n` independent draws from the base model. Sample `i` uses stream `i`.
pub fn base_sample<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Vec<Point2> {
    let addresses: Vec<(u64, u64)> = (0..n as u64).map(|i| (seed, i)).collect();
    ancestral(model, sched, &addresses)
}

/// Blockwise best-of-N over many runs in lockstep. `starts[r]` is the state
/// of run `r` at step `start`.
fn blockwise<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    n: usize,
    block: usize,
    start: usize,
    starts: &[Point2],
    seeds: &[u64],
) -> GuidedBatch {
    let per_chunk = chunk_len(n);
    let parts: Vec<(Vec<Point2>, SampleStats)> = starts
        .par_chunks(per_chunk)
        .zip(seeds.par_chunks(per_chunk))
        .map(|(starts, seeds)| blockwise_chunk(model, sched, spec, n, block, start, starts, seeds))
        .collect();
    let mut samples = Vec::with_capacity(starts.len());
    let mut stats = SampleStats::default();
    for (xs, s) in parts {
        samples.extend(xs);
        stats.add(s);
    }
    GuidedBatch { samples, stats }
}

fn blockwise_chunk<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    n: usize,
    block: usize,
    start: usize,
    starts: &[Point2],
    seeds: &[u64],
) -> (Vec<Point2>, SampleStats) {
    let runs = starts.len();
    let mut states = starts.to_vec();
    let mut cand = vec![Point2::ZERO; runs * n];
    let mut stats = SampleStats::default();
    let mut t = start;
    while t > 0 {
        let len = block.min(t);
        let t_end = t - len;
        for (r, &s) in states.iter().enumerate() {
            cand[r * n..(r + 1) * n].fill(s);
        }
        for step in (t_end + 1..=t).rev() {
            let eps = model.predict_at(&cand, step, sched);
            for (idx, x) in cand.iter_mut().enumerate() {
                let noise = if step > 1 {
                    normal2(seeds[idx / n], Purpose::Step(step), (idx % n) as u64)
                } else {
                    Point2::ZERO
                };
                *x = reverse_step(sched, *x, eps[idx], step, noise);
            }
            stats.model_evals += cand.len() as u64;
        }
        let values = ranking_values(model, sched, spec, &cand, t_end);
        stats.reward_queries += cand.len() as u64;
        stats.selections += runs as u64;
        for (r, state) in states.iter_mut().enumerate() {
            let best = argmax_lowest(&values[r * n..(r + 1) * n]);
            *state = cand[r * n + best];
        }
        t = t_end;
    }
    (states, stats)
}

/// Index of the largest value; ties go to the lowest index and NaN never wins.
fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] || (values[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

fn check_blockwise(spec: &RewardSpec, n: usize, block: usize, steps: usize) -> Result<()> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidGuidance("N must be at least 1".into()));
    }
    if block == 0 || block > steps {
        return Err(Error::InvalidGuidance(format!(
            "block size must lie in 1..={steps}, got {block}"
        )));
    }
    Ok(())
}

/// Blockwise controlled denoising from pure noise.
pub fn code_sample<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    n: usize,
    block: usize,
    seed: u64,
) -> Result<Point2> {
    Ok(code_sample_runs(model, sched, spec, n, block, &[seed])?.samples[0])
}

/// [`code_sample`] for one run per seed.
pub fn code_sample_runs<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    n: usize,
    block: usize,
    seeds: &[u64],
) -> Result<GuidedBatch> {
    check_blockwise(spec, n, block, sched.steps())?;
    let starts: Vec<Point2> = seeds.iter().map(|&s| normal2(s, Purpose::Init, 0)).collect();
    Ok(blockwise(model, sched, spec, n, block, sched.steps(), &starts, seeds))
}

/// Best-of-N over full rollouts: [`code_sample`] with `B = T`.
pub fn bon_sample<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    n: usize,
    seed: u64,
) -> Result<Point2> {
    code_sample(model, sched, spec, n, sched.steps(), seed)
}

/// Per-step selection: [`code_sample`] with `B = 1`.
pub fn svdd_sample<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    n: usize,
    seed: u64,
) -> Result<Point2> {
    code_sample(model, sched, spec, n, 1, seed)
}

/// Blockwise controlled denoising started from a reference point noised to
/// step `tau = round(eta T)`.
///
/// At `eta = 1` the reference is ignored and the run starts from pure noise,
/// which makes it identical to [`code_sample`].
pub fn code_eta_sample<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    n: usize,
    block: usize,
    eta: f64,
    x_ref: Point2,
    seed: u64,
) -> Result<Point2> {
    Ok(code_eta_sample_runs(model, sched, spec, n, block, eta, &[x_ref], &[seed])?.samples[0])
}

/// [`code_eta_sample`] for one run per `(reference, seed)` pair.
pub fn code_eta_sample_runs<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    n: usize,
    block: usize,
    eta: f64,
    refs: &[Point2],
    seeds: &[u64],
) -> Result<GuidedBatch> {
    let tau = check_eta(eta, sched.steps())?;
    check_blockwise(spec, n, block, sched.steps())?;
    if refs.len() != seeds.len() {
        return Err(Error::BatchMismatch(format!(
            "{} reference points for {} seeds",
            refs.len(),
            seeds.len()
        )));
    }
    let starts: Vec<Point2> = refs
        .iter()
        .zip(seeds)
        .map(|(&x_ref, &s)| {
            let z = normal2(s, Purpose::Init, 0);
            if tau == sched.steps() {
                z
            } else {
                sched.sqrt_alpha_bar(tau) * x_ref + sched.sqrt_one_minus_alpha_bar(tau) * z
            }
        })
        .collect();
    Ok(blockwise(model, sched, spec, n, block.min(tau), tau, &starts, seeds))
}

/// Ancestral sampling with the noise prediction shifted along the reward
/// gradient of the Tweedie estimate:
/// `eps' = eps - sqrt(1 - abar_t) * scale * grad_x log r(x0_hat(x))`.
pub fn grad_guided_sample<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    scale: f64,
    mode: GradMode,
    seed: u64,
) -> Result<Point2> {
    Ok(grad_guided_runs(model, sched, spec, scale, mode, &[seed])?.samples[0])
}

/// [`grad_guided_sample`] for one run per seed.
pub fn grad_guided_runs<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    scale: f64,
    mode: GradMode,
    seeds: &[u64],
) -> Result<GuidedBatch> {
    spec.validate()?;
    // Fails for rewards without a gradient.
    spec.reward_grad(spec.mean())?;
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidGuidance(format!("guidance scale must be non-negative, got {scale}")));
    }
    let parts: Vec<(Vec<Point2>, SampleStats)> = seeds
        .par_chunks(chunk_len(1))
        .map(|chunk| grad_guided_chunk(model, sched, spec, scale, mode, chunk))
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(seeds.len());
    let mut stats = SampleStats::default();
    for (xs, s) in parts {
        samples.extend(xs);
        stats.add(s);
    }
    Ok(GuidedBatch { samples, stats })
}

fn grad_guided_chunk<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    scale: f64,
    mode: GradMode,
    seeds: &[u64],
) -> Result<(Vec<Point2>, SampleStats)> {
    let mut xs: Vec<Point2> = seeds.iter().map(|&s| normal2(s, Purpose::Init, 0)).collect();
    let mut stats = SampleStats::default();
    for t in (1..=sched.steps()).rev() {
        let mut eps = model.predict_at(&xs, t, sched);
        stats.model_evals += xs.len() as u64;
        if scale > 0.0 {
            let shifts = guidance_shift(model, sched, spec, &xs, &eps, t, scale, mode)?;
            for (e, d) in eps.iter_mut().zip(shifts) {
                *e = *e - d;
            }
            stats.reward_queries += xs.len() as u64;
        }
        for (i, &s) in seeds.iter().enumerate() {
            let noise = if t > 1 { normal2(s, Purpose::Step(t), 0) } else { Point2::ZERO };
            xs[i] = reverse_step(sched, xs[i], eps[i], t, noise);
        }
    }
    Ok((xs, stats))
}

/// `sqrt(1 - abar_t) * scale * grad_x log r(x0_hat(x))` for each point.
pub fn guidance_shift<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    xs: &[Point2],
    eps: &[Point2],
    t: usize,
    scale: f64,
    mode: GradMode,
) -> Result<Vec<Point2>> {
    let s1 = sched.sqrt_one_minus_alpha_bar(t);
    let inv_sa = 1.0 / sched.sqrt_alpha_bar(t);
    let reward_grads: Vec<Point2> = xs
        .iter()
        .zip(eps)
        .map(|(&x, &e)| spec.reward_grad(sched.tweedie_x0_unchecked(x, e, t)))
        .collect::<Result<_>>()?;
    let grads: Vec<Point2> = match mode {
        GradMode::Frozen => reward_grads.iter().map(|&g| g * inv_sa).collect(),
        GradMode::Exact => {
            // d x0_hat / d x = (I - sqrt(1 - abar) J_eps) / sqrt(abar), so the
            // pulled-back gradient is (g - sqrt(1 - abar) J^T g) / sqrt(abar).
            let vjp = model.input_vjp_at(xs, t, &reward_grads, sched);
            reward_grads
                .iter()
                .zip(vjp)
                .map(|(&g, v)| (g - s1 * v) * inv_sa)
                .collect()
        }
    };
    Ok(grads.into_iter().map(|g| (s1 * scale) * g).collect())
}

/// Seed of run `j` of a guided batch.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    derive_seed(seed, run as u64)
}

/// Reference point for a noise-conditioned run: the configured one, or a
/// draw around the reward mode with the reward's spread.
pub fn reference_point(cfg: &GuidanceConfig, spec: &RewardSpec, run_seed: u64) -> Point2 {
    cfg.x_ref
        .unwrap_or_else(|| spec.mean() + spec.spread() * normal2(run_seed, Purpose::Reference, 0))
}

/// `runs` independent guided draws for `cfg`; run `j` is seeded with
/// [`run_seed`]`(cfg.seed, j)`.
pub fn run_guided<P: EpsPredictor + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    spec: &RewardSpec,
    cfg: &GuidanceConfig,
    runs: usize,
) -> Result<GuidedBatch> {
    let steps = sched.steps();
    cfg.validate(steps)?;
    let seeds: Vec<u64> = (0..runs).map(|j| run_seed(cfg.seed, j)).collect();
    match cfg.method {
        Method::Base => {
            let addresses: Vec<(u64, u64)> = seeds.iter().map(|&s| (s, 0)).collect();
            Ok(GuidedBatch {
                samples: ancestral(model, sched, &addresses),
                stats: SampleStats {
                    model_evals: (runs * steps) as u64,
                    ..Default::default()
                },
            })
        }
        Method::CoDe | Method::BoN | Method::SvddPm => {
            code_sample_runs(model, sched, spec, cfg.n, cfg.effective_block(steps), &seeds)
        }
        Method::CoDeEta => {
            let refs: Vec<Point2> = seeds.iter().map(|&s| reference_point(cfg, spec, s)).collect();
            code_eta_sample_runs(model, sched, spec, cfg.n, cfg.b, cfg.eta, &refs, &seeds)
        }
        Method::GradGuide => grad_guided_runs(model, sched, spec, cfg.scale, cfg.grad_mode, &seeds),
    }
}
