//! Gaussian-mixture data and the noise-prediction training loop.

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EpsModel;
use crate::point::Point2;
use crate::rng::{derive_seed, standard_normal2};
use crate::schedule::NoiseSchedule;

/// Mixture of isotropic Gaussians sharing one standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Point2>,
    pub sigma: f64,
}

impl Default for GmmSpec {
    /// Three equally weighted components at (5,3), (3,7), (7,7) with sigma 2.
    fn default() -> Self {
        Self {
            weights: vec![1.0 / 3.0; 3],
            means: vec![
                Point2::new(5.0, 3.0),
                Point2::new(3.0, 7.0),
                Point2::new(7.0, 7.0),
            ],
            sigma: 2.0,
        }
    }
}

impl GmmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() {
            return Err(Error::InvalidMixture("at least one component is required".into()));
        }
        if self.weights.len() != self.means.len() {
            return Err(Error::InvalidMixture(format!(
                "{} weights for {} means",
                self.weights.len(),
                self.means.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMixture("weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidMixture(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidMixture("means must be finite".into()));
        }
        Ok(())
    }

    /// Mixture mean `sum w_i mu_i`.
    pub fn mean(&self) -> Point2 {
        self.weights
            .iter()
            .zip(&self.means)
            .fold(Point2::ZERO, |acc, (&w, &m)| acc + w * m)
    }

    /// Mixture covariance: `sigma^2 I` plus the spread of the component means.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let mu = self.mean();
        let s2 = self.sigma * self.sigma;
        let mut c = [[s2, 0.0], [0.0, s2]];
        for (&w, &m) in self.weights.iter().zip(&self.means) {
            let d = m - mu;
            c[0][0] += w * d.x * d.x;
            c[0][1] += w * d.x * d.y;
            c[1][0] += w * d.y * d.x;
            c[1][1] += w * d.y * d.y;
        }
        c
    }
}

/// `n` i.i.d. draws from the mixture.
pub fn sample_gmm(spec: &GmmSpec, n: usize, seed: u64) -> Result<Vec<Point2>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = WeightedIndex::new(&spec.weights)
        .map_err(|e| Error::InvalidMixture(e.to_string()))?;
    Ok((0..n)
        .map(|_| {
            let i = rng.sample(&pick);
            spec.means[i] + spec.sigma * standard_normal2(&mut rng)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub dataset_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decay of the exponential moving average of the weights that is
    /// returned instead of the last iterate; `0` returns the last iterate.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            dataset_size: 10_000,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTrainConfig(msg));
        if self.epochs == 0 || self.dataset_size == 0 || self.batch_size == 0 {
            return bad("epochs, dataset size and batch size must be positive".into());
        }
        if self.batch_size > self.dataset_size {
            return bad(format!(
                "batch size {} exceeds dataset size {}",
                self.batch_size, self.dataset_size
            ));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam coefficients must satisfy 0 <= beta < 1 and eps > 0".into());
        }
        if !unit(self.ema_decay) {
            return bad(format!("EMA decay must lie in [0, 1), got {}", self.ema_decay));
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(model: &EpsModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, model: &mut EpsModel, grads: [&[f64]; 6], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (k, params) in model.param_slices_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in params.iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Running average `e <- d e + (1 - d) p` of every parameter.
struct Ema {
    decay: f64,
    params: Vec<Vec<f64>>,
}

impl Ema {
    fn new(model: &EpsModel, decay: f64) -> Self {
        Self {
            decay,
            params: model.param_slices().iter().map(|s| s.to_vec()).collect(),
        }
    }

    fn update(&mut self, model: &EpsModel) {
        let d = self.decay;
        for (avg, cur) in self.params.iter_mut().zip(model.param_slices()) {
            for (a, &p) in avg.iter_mut().zip(cur) {
                *a = d * *a + (1.0 - d) * p;
            }
        }
    }

    fn write_into(&self, model: &mut EpsModel) {
        for (dst, src) in model.param_slices_mut().into_iter().zip(&self.params) {
            dst.copy_from_slice(src);
        }
    }
}

/// Trains `model` on a fresh dataset drawn from `spec`.
///
/// Each epoch visits the dataset once in a seed-derived shuffled order; every
/// example gets its own uniform step `t` and noise draw. Returns the trained
/// model (the weight average when `ema_decay > 0`) and the mean training loss
/// of each epoch.
pub fn train(
    mut model: EpsModel,
    spec: &GmmSpec,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(EpsModel, Vec<f64>)> {
    cfg.validate()?;
    let data = sample_gmm(spec, cfg.dataset_size, derive_seed(cfg.seed, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut adam = Adam::new(&model);
    let mut ema = (cfg.ema_decay > 0.0).then(|| Ema::new(&model, cfg.ema_decay));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let steps = sched.steps();

    let mut x0 = Vec::with_capacity(cfg.batch_size);
    let mut eps = Vec::with_capacity(cfg.batch_size);
    let mut ts = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            x0.clear();
            eps.clear();
            ts.clear();
            for &i in chunk {
                x0.push(data[i]);
                ts.push(rng.gen_range(1..=steps));
                eps.push(standard_normal2(&mut rng));
            }
            let grads = model.loss_and_param_grads(&x0, &eps, &ts, sched)?;
            if !grads.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: grads.loss,
                });
            }
            total += grads.loss * chunk.len() as f64;
            adam.update(&mut model, grads.slices(), cfg);
            if let Some(ema) = ema.as_mut() {
                ema.update(&model);
            }
        }
        trace.push(total / data.len() as f64);
    }
    if let Some(ema) = &ema {
        ema.write_into(&mut model);
    }
    if !model.all_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            step: 0,
            loss: f64::NAN,
        });
    }
    Ok((model, trace))
}
