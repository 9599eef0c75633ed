//! Exact noise predictors for priors whose noised marginals are known in
//! closed form. They stand in for a perfectly trained model in tests and
//! oracle checks.
//!
//! For a clean prior component `N(m, s^2 I)`, the marginal at step `t` is
//! `N(sqrt(abar) m, (abar s^2 + 1 - abar) I)`, and the optimal noise
//! prediction is `-sqrt(1 - abar) * grad log p_t(x)`.

use crate::model::EpsPredictor;
use crate::point::Point2;
use crate::schedule::NoiseSchedule;
use crate::train::GmmSpec;

/// Optimal predictor for a single isotropic Gaussian prior `N(mean, std^2 I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPriorEps {
    pub mean: Point2,
    pub std: f64,
}

impl GaussianPriorEps {
    fn marginal_var(&self, ab: f64) -> f64 {
        ab * self.std * self.std + (1.0 - ab)
    }

    /// Closed-form `E[x0 | x_t]` by Gaussian conditioning.
    pub fn posterior_mean_x0(&self, x_t: Point2, t: usize, sched: &NoiseSchedule) -> Point2 {
        let ab = sched.alpha_bar(t);
        let gain = ab.sqrt() * self.std * self.std / self.marginal_var(ab);
        self.mean + gain * (x_t - ab.sqrt() * self.mean)
    }
}

impl EpsPredictor for GaussianPriorEps {
    fn predict_at(&self, xs: &[Point2], t: usize, sched: &NoiseSchedule) -> Vec<Point2> {
        let ab = sched.alpha_bar(t);
        let k = (1.0 - ab).sqrt() / self.marginal_var(ab);
        let center = ab.sqrt() * self.mean;
        xs.iter().map(|&x| k * (x - center)).collect()
    }

    fn input_vjp_at(
        &self,
        _xs: &[Point2],
        t: usize,
        cotangents: &[Point2],
        sched: &NoiseSchedule,
    ) -> Vec<Point2> {
        let ab = sched.alpha_bar(t);
        let k = (1.0 - ab).sqrt() / self.marginal_var(ab);
        cotangents.iter().map(|&c| k * c).collect()
    }
}

/// Optimal predictor for a Gaussian-mixture prior.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPriorEps {
    pub spec: GmmSpec,
}

impl GmmPriorEps {
    pub fn new(spec: GmmSpec) -> Self {
        Self { spec }
    }

    /// Score of the noised marginal and its Hessian at one point.
    fn score_and_hessian(&self, x: Point2, ab: f64) -> (Point2, [[f64; 2]; 2]) {
        let v = ab * self.spec.sigma * self.spec.sigma + (1.0 - ab);
        let a = ab.sqrt();
        let grads: Vec<Point2> = self.spec.means.iter().map(|&m| -(x - a * m) * (1.0 / v)).collect();
        let logits: Vec<f64> = self
            .spec
            .weights
            .iter()
            .zip(&grads)
            .map(|(&w, g)| w.ln() - 0.5 * v * g.norm_sq())
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = unnorm.iter().sum();

        let mut score = Point2::ZERO;
        let mut second = [[0.0; 2]; 2];
        for (r, g) in unnorm.iter().map(|u| u / z).zip(&grads) {
            score = score + r * *g;
            second[0][0] += r * g.x * g.x;
            second[0][1] += r * g.x * g.y;
            second[1][1] += r * g.y * g.y;
        }
        let h00 = -1.0 / v + second[0][0] - score.x * score.x;
        let h01 = second[0][1] - score.x * score.y;
        let h11 = -1.0 / v + second[1][1] - score.y * score.y;
        (score, [[h00, h01], [h01, h11]])
    }
}

impl EpsPredictor for GmmPriorEps {
    fn predict_at(&self, xs: &[Point2], t: usize, sched: &NoiseSchedule) -> Vec<Point2> {
        let ab = sched.alpha_bar(t);
        let k = -(1.0 - ab).sqrt();
        xs.iter().map(|&x| k * self.score_and_hessian(x, ab).0).collect()
    }

    fn input_vjp_at(
        &self,
        xs: &[Point2],
        t: usize,
        cotangents: &[Point2],
        sched: &NoiseSchedule,
    ) -> Vec<Point2> {
        let ab = sched.alpha_bar(t);
        let k = -(1.0 - ab).sqrt();
        xs.iter()
            .zip(cotangents)
            .map(|(&x, &c)| {
                let (_, h) = self.score_and_hessian(x, ab);
                Point2::new(
                    k * (h[0][0] * c.x + h[1][0] * c.y),
                    k * (h[0][1] * c.x + h[1][1] * c.y),
                )
            })
            .collect()
    }
}
