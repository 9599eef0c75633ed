//! The noise predictor: a three-layer MLP over `(x_t, embed(t / T))`.
//!
//! Gradients are derived by hand for this fixed architecture. Batched
//! evaluation goes through `matrixmultiply` (via ndarray), whose per-element
//! accumulation order does not depend on the batch size, so evaluating a
//! point alone or inside a batch gives bit-identical results.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::Point2;
use crate::schedule::NoiseSchedule;

pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_EMBED: usize = 32;
pub const DEFAULT_FREQ_BASE: f64 = 1000.0;

/// Anything that predicts the noise in `x_t` at a given step.
///
/// Implemented by the trained [`EpsModel`] and by analytic predictors used as
/// oracles in tests.
pub trait EpsPredictor: Sync {
    /// Noise prediction for every point in `xs`, all at step `t` (`1..=T`).
    fn predict_at(&self, xs: &[Point2], t: usize, sched: &NoiseSchedule) -> Vec<Point2>;

    /// Vector-Jacobian products `c_i^T d eps(x_i, t) / d x_i`.
    fn input_vjp_at(
        &self,
        xs: &[Point2],
        t: usize,
        cotangents: &[Point2],
        sched: &NoiseSchedule,
    ) -> Vec<Point2>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `z * sigmoid(z)`
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-z).exp());
                sig * (1.0 + z * (1.0 - sig))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Sinusoidal features of the normalized step `t / T`.
///
/// Frequencies are `freq_base^(i / half)` for `i in 0..half`; the first half
/// of the output holds sines and the second half cosines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub width: usize,
    pub freq_base: f64,
}

impl TimeEmbedding {
    pub fn embed_into(&self, t: usize, steps: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.width);
        let s = t as f64 / steps as f64;
        let half = self.width / 2;
        for i in 0..half {
            let w = self.freq_base.powf(i as f64 / half as f64);
            out[i] = (s * w).sin();
            out[half + i] = (s * w).cos();
        }
    }
}

/// One affine layer `y = W x + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn forward(&self, input: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((input.nrows(), self.outputs()));
        out.assign(&self.bias.view().insert_axis(Axis(0)));
        general_mat_mul(1.0, input, &self.weight.t(), 1.0, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsModel {
    pub layers: [Dense; 3],
    pub activation: Activation,
    pub embedding: TimeEmbedding,
}

/// Loss value plus a gradient for every parameter, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub loss: f64,
    pub layers: [Dense; 3],
}

impl GradBundle {
    pub fn slices(&self) -> [&[f64]; 6] {
        dense_slices(&self.layers)
    }
}

fn dense_slices(layers: &[Dense; 3]) -> [&[f64]; 6] {
    let [a, b, c] = layers;
    [
        a.weight.as_slice().expect("standard layout"),
        a.bias.as_slice().expect("standard layout"),
        b.weight.as_slice().expect("standard layout"),
        b.bias.as_slice().expect("standard layout"),
        c.weight.as_slice().expect("standard layout"),
        c.bias.as_slice().expect("standard layout"),
    ]
}

struct ForwardCache {
    input: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

impl EpsModel {
    /// Zero-parameter model with the given widths.
    pub fn zeros(hidden: usize, embed: usize, activation: Activation) -> Result<Self> {
        check_dims(hidden, embed)?;
        Ok(Self {
            layers: [
                Dense::zeros(2 + embed, hidden),
                Dense::zeros(hidden, hidden),
                Dense::zeros(hidden, 2),
            ],
            activation,
            embedding: TimeEmbedding {
                width: embed,
                freq_base: DEFAULT_FREQ_BASE,
            },
        })
    }

    /// Fan-in scaled uniform initialization: every weight and bias of a layer
    /// with `n` inputs is drawn from `U(-1/sqrt(n), 1/sqrt(n))`.
    pub fn init(hidden: usize, embed: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(hidden, embed, Activation::Silu)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let bound = 1.0 / (layer.inputs() as f64).sqrt();
            layer
                .weight
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .for_each(|w| *w = rng.gen_range(-bound..bound));
        }
        Ok(model)
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].outputs()
    }

    pub fn embed_width(&self) -> usize {
        self.embedding.width
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn param_slices(&self) -> [&[f64]; 6] {
        dense_slices(&self.layers)
    }

    pub fn param_slices_mut(&mut self) -> [&mut [f64]; 6] {
        let [a, b, c] = &mut self.layers;
        [
            a.weight.as_slice_mut().expect("standard layout"),
            a.bias.as_slice_mut().expect("standard layout"),
            b.weight.as_slice_mut().expect("standard layout"),
            b.bias.as_slice_mut().expect("standard layout"),
            c.weight.as_slice_mut().expect("standard layout"),
            c.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn input_matrix(&self, xs: &[Point2], ts: &[usize], steps: usize) -> Array2<f64> {
        let e = self.embedding.width;
        let mut input = Array2::zeros((xs.len(), 2 + e));
        let mut emb = vec![0.0; e];
        let mut last_t = None;
        for (i, (x, &t)) in xs.iter().zip(ts).enumerate() {
            if last_t != Some(t) {
                self.embedding.embed_into(t, steps, &mut emb);
                last_t = Some(t);
            }
            let mut row = input.row_mut(i);
            row[0] = x.x;
            row[1] = x.y;
            row.slice_mut(s![2..]).assign(&ArrayView1::from(&emb));
        }
        input
    }

    fn forward_cache(&self, xs: &[Point2], ts: &[usize], steps: usize) -> ForwardCache {
        let act = self.activation;
        let input = self.input_matrix(xs, ts, steps);
        let z1 = self.layers[0].forward(&input.view());
        let h1 = z1.mapv(|z| act.apply(z));
        let z2 = self.layers[1].forward(&h1.view());
        let h2 = z2.mapv(|z| act.apply(z));
        let out = self.layers[2].forward(&h2.view());
        ForwardCache {
            input,
            z1,
            h1,
            z2,
            h2,
            out,
        }
    }

    fn check_batch(&self, xs: &[Point2], ts: &[usize], sched: &NoiseSchedule) -> Result<()> {
        if xs.len() != ts.len() {
            return Err(Error::BatchMismatch(format!(
                "{} points but {} steps",
                xs.len(),
                ts.len()
            )));
        }
        ts.iter().try_for_each(|&t| sched.check_step(t))
    }

    /// Batched forward pass with a step per point.
    pub fn predict_eps(
        &self,
        xs: &[Point2],
        ts: &[usize],
        sched: &NoiseSchedule,
    ) -> Result<Vec<Point2>> {
        self.check_batch(xs, ts, sched)?;
        let cache = self.forward_cache(xs, ts, sched.steps());
        Ok(rows_to_points(&cache.out))
    }

    /// Mean squared noise-prediction error over the batch and its exact
    /// gradient with respect to every parameter.
    pub fn loss_and_param_grads(
        &self,
        x0: &[Point2],
        eps: &[Point2],
        ts: &[usize],
        sched: &NoiseSchedule,
    ) -> Result<GradBundle> {
        if x0.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if eps.len() != x0.len() {
            return Err(Error::BatchMismatch(format!(
                "{} clean points but {} noise draws",
                x0.len(),
                eps.len()
            )));
        }
        self.check_batch(x0, ts, sched)?;

        let noisy: Vec<Point2> = x0
            .iter()
            .zip(eps)
            .zip(ts)
            .map(|((&x, &e), &t)| sched.sqrt_alpha_bar(t) * x + sched.sqrt_one_minus_alpha_bar(t) * e)
            .collect();
        let cache = self.forward_cache(&noisy, ts, sched.steps());

        let m = x0.len() as f64;
        let mut loss = 0.0;
        let mut d_out = Array2::zeros((x0.len(), 2));
        for (i, e) in eps.iter().enumerate() {
            let rx = cache.out[[i, 0]] - e.x;
            let ry = cache.out[[i, 1]] - e.y;
            loss += rx * rx + ry * ry;
            d_out[[i, 0]] = 2.0 * rx / m;
            d_out[[i, 1]] = 2.0 * ry / m;
        }
        loss /= m;

        let layers = self.backward_params(&cache, &d_out);
        Ok(GradBundle { loss, layers })
    }

    fn backward_params(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> [Dense; 3] {
        let act = self.activation;
        let [_, l2, l3] = &self.layers;

        let g3 = layer_grad(d_out, &cache.h2);
        let mut dz2 = d_out.dot(&l3.weight);
        dz2.zip_mut_with(&cache.z2, |d, &z| *d *= act.derivative(z));

        let g2 = layer_grad(&dz2, &cache.h1);
        let mut dz1 = dz2.dot(&l2.weight);
        dz1.zip_mut_with(&cache.z1, |d, &z| *d *= act.derivative(z));

        let g1 = layer_grad(&dz1, &cache.input);
        [g1, g2, g3]
    }

    fn input_vjp_cache(&self, cache: &ForwardCache, cotangents: &[Point2]) -> Vec<Point2> {
        let act = self.activation;
        let [l1, l2, l3] = &self.layers;
        let g = points_to_rows(cotangents);
        let mut dz2 = g.dot(&l3.weight);
        dz2.zip_mut_with(&cache.z2, |d, &z| *d *= act.derivative(z));
        let mut dz1 = dz2.dot(&l2.weight);
        dz1.zip_mut_with(&cache.z1, |d, &z| *d *= act.derivative(z));
        let dx = dz1.dot(&l1.weight.slice(s![.., 0..2]));
        rows_to_points(&dx)
    }

    /// `cotangent^T d eps(x, t) / d x` for a single point.
    pub fn input_grad(
        &self,
        x: Point2,
        t: usize,
        cotangent: Point2,
        sched: &NoiseSchedule,
    ) -> Result<Point2> {
        sched.check_step(t)?;
        Ok(self.input_vjp_at(&[x], t, &[cotangent], sched)[0])
    }
}

fn check_dims(hidden: usize, embed: usize) -> Result<()> {
    if hidden == 0 {
        return Err(Error::InvalidDims("hidden width must be at least 1".into()));
    }
    if embed < 2 || embed % 2 != 0 {
        return Err(Error::InvalidDims(format!(
            "embedding width must be even and at least 2, got {embed}"
        )));
    }
    Ok(())
}

fn layer_grad(d_out: &Array2<f64>, input: &Array2<f64>) -> Dense {
    Dense {
        weight: d_out.t().dot(input),
        bias: d_out.sum_axis(Axis(0)),
    }
}

fn rows_to_points(a: &Array2<f64>) -> Vec<Point2> {
    a.rows().into_iter().map(|r| Point2::new(r[0], r[1])).collect()
}

fn points_to_rows(ps: &[Point2]) -> Array2<f64> {
    let mut a = Array2::zeros((ps.len(), 2));
    for (i, p) in ps.iter().enumerate() {
        a[[i, 0]] = p.x;
        a[[i, 1]] = p.y;
    }
    a
}

impl EpsPredictor for EpsModel {
    fn predict_at(&self, xs: &[Point2], t: usize, sched: &NoiseSchedule) -> Vec<Point2> {
        let ts = vec![t; xs.len()];
        let cache = self.forward_cache(xs, &ts, sched.steps());
        rows_to_points(&cache.out)
    }

    fn input_vjp_at(
        &self,
        xs: &[Point2],
        t: usize,
        cotangents: &[Point2],
        sched: &NoiseSchedule,
    ) -> Vec<Point2> {
        let ts = vec![t; xs.len()];
        let cache = self.forward_cache(xs, &ts, sched.steps());
        self.input_vjp_cache(&cache, cotangents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal2;
    use crate::schedule::ScheduleParams;
    use approx::assert_relative_eq;

    fn sched() -> NoiseSchedule {
        ScheduleParams::default().build().unwrap()
    }

    #[test]
    fn parameter_count_for_default_dims() {
        let m = EpsModel::init(128, 32, 0).unwrap();
        // Independent count: (in * out + out) per affine layer.
        let dims = [(34, 128), (128, 128), (128, 2)];
        let expected: usize = dims.iter().map(|(i, o)| i * o + o).sum();
        assert_eq!(expected, 21_250);
        assert_eq!(m.param_count(), expected);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = EpsModel::init(16, 4, 0).unwrap();
        let b = EpsModel::init(16, 4, 0).unwrap();
        let c = EpsModel::init(16, 4, 1).unwrap();
        let bits = |m: &EpsModel| -> Vec<u64> {
            m.param_slices().iter().flat_map(|s| s.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
        let bound = 1.0 / 34f64.sqrt();
        let big = EpsModel::init(128, 32, 0).unwrap();
        assert!(big.layers[0].weight.iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn rejects_invalid_dims() {
        assert!(matches!(EpsModel::init(0, 32, 0), Err(Error::InvalidDims(_))));
        assert!(EpsModel::init(8, 3, 0).is_err());
        assert!(EpsModel::init(8, 0, 0).is_err());
    }

    #[test]
    fn zero_model_predicts_zero() {
        let s = sched();
        let m = EpsModel::zeros(8, 4, Activation::Silu).unwrap();
        let out = m
            .predict_eps(&[Point2::new(3.0, -2.0), Point2::new(100.0, 5.0)], &[1, 1000], &s)
            .unwrap();
        assert_eq!(out, vec![Point2::ZERO, Point2::ZERO]);
    }

    #[test]
    fn batch_mismatch_is_reported() {
        let s = sched();
        let m = EpsModel::init(8, 4, 0).unwrap();
        assert!(matches!(
            m.predict_eps(&[Point2::ZERO], &[1, 2], &s),
            Err(Error::BatchMismatch(_))
        ));
        assert!(matches!(
            m.predict_eps(&[Point2::ZERO], &[1001], &s),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(
            m.loss_and_param_grads(&[], &[], &[], &s),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn batched_and_single_evaluation_agree_bitwise() {
        let s = sched();
        let m = EpsModel::init(128, 32, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &n in &[1usize, 2, 3, 7, 16, 33, 257] {
            let xs: Vec<Point2> = (0..n).map(|_| standard_normal2(&mut rng) * 3.0).collect();
            let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=1000)).collect();
            let batch = m.predict_eps(&xs, &ts, &s).unwrap();
            for i in 0..n {
                let one = m.predict_eps(&xs[i..=i], &ts[i..=i], &s).unwrap()[0];
                assert_eq!(one.x.to_bits(), batch[i].x.to_bits(), "n={n} i={i}");
                assert_eq!(one.y.to_bits(), batch[i].y.to_bits(), "n={n} i={i}");
            }
        }
    }

    /// H = 2, E = 2, identity activation, hand-set weights.
    #[test]
    fn tiny_model_hand_computed_forward() {
        let s = NoiseSchedule::linear(4, 0.1, 0.2).unwrap();
        let mut m = EpsModel::zeros(2, 2, Activation::Identity).unwrap();
        m.layers[0].weight = ndarray::arr2(&[[1.0, 0.0, 1.0, 0.0], [0.0, 2.0, 0.0, 1.0]]);
        m.layers[0].bias = ndarray::arr1(&[0.5, -0.5]);
        m.layers[1].weight = ndarray::arr2(&[[1.0, 1.0], [0.0, -1.0]]);
        m.layers[1].bias = ndarray::arr1(&[0.0, 1.0]);
        m.layers[2].weight = ndarray::arr2(&[[2.0, 0.0], [1.0, 1.0]]);
        m.layers[2].bias = ndarray::arr1(&[0.0, 0.25]);

        // t = 2 of 4: s = 0.5, single frequency 1 -> (sin 0.5, cos 0.5).
        let (sn, cs) = (0.5f64.sin(), 0.5f64.cos());
        let x = Point2::new(1.0, -1.0);
        let h1 = [x.x + sn + 0.5, 2.0 * x.y + cs - 0.5];
        let h2 = [h1[0] + h1[1], -h1[1] + 1.0];
        let expected = Point2::new(2.0 * h2[0], h2[0] + h2[1] + 0.25);

        let out = m.predict_eps(&[x], &[2], &s).unwrap()[0];
        assert_relative_eq!(out.x, expected.x, epsilon = 1e-14);
        assert_relative_eq!(out.y, expected.y, epsilon = 1e-14);
    }

    #[test]
    fn silu_derivative_matches_central_difference() {
        let h = 1e-6;
        for &z in &[-6.0, -1.3, -0.1, 0.0, 0.4, 2.5, 9.0] {
            let fd = (Activation::Silu.apply(z + h) - Activation::Silu.apply(z - h)) / (2.0 * h);
            assert_relative_eq!(Activation::Silu.derivative(z), fd, epsilon = 1e-9);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        // A zero model "predicts" eps = 0 exactly.
        let s = sched();
        let m = EpsModel::zeros(8, 4, Activation::Silu).unwrap();
        let x0 = vec![Point2::new(1.0, 2.0), Point2::new(-3.0, 0.5)];
        let eps = vec![Point2::ZERO; 2];
        let g = m.loss_and_param_grads(&x0, &eps, &[10, 500], &s).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.slices().iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn duplicated_batch_gives_same_loss_and_grads() {
        let s = sched();
        let m = EpsModel::init(16, 4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0: Vec<Point2> = (0..5).map(|_| standard_normal2(&mut rng) * 2.0).collect();
        let eps: Vec<Point2> = (0..5).map(|_| standard_normal2(&mut rng)).collect();
        let ts: Vec<usize> = (0..5).map(|_| rng.gen_range(1..=1000)).collect();
        let dup = |v: &[Point2]| v.iter().chain(v).copied().collect::<Vec<_>>();
        let ts2: Vec<usize> = ts.iter().chain(&ts).copied().collect();
        let a = m.loss_and_param_grads(&x0, &eps, &ts, &s).unwrap();
        let b = m.loss_and_param_grads(&dup(&x0), &dup(&eps), &ts2, &s).unwrap();
        assert_relative_eq!(a.loss, b.loss, max_relative = 1e-14);
        for (ga, gb) in a.slices().iter().zip(b.slices()) {
            for (x, y) in ga.iter().zip(gb) {
                assert_relative_eq!(x, y, epsilon = 1e-15, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn linear_network_input_grad_is_weight_product() {
        let s = sched();
        let mut m = EpsModel::init(6, 4, 2).unwrap();
        m.activation = Activation::Identity;
        // d eps / d x = W3 W2 W1[:, 0..2]
        let j = m.layers[2]
            .weight
            .dot(&m.layers[1].weight)
            .dot(&m.layers[0].weight.slice(s![.., 0..2]));
        let c = Point2::new(0.3, -1.7);
        let g = m.input_grad(Point2::new(2.0, 1.0), 300, c, &s).unwrap();
        assert_relative_eq!(g.x, c.x * j[[0, 0]] + c.y * j[[1, 0]], epsilon = 1e-13);
        assert_relative_eq!(g.y, c.x * j[[0, 1]] + c.y * j[[1, 1]], epsilon = 1e-13);
        let zero = m.input_grad(Point2::new(2.0, 1.0), 300, Point2::ZERO, &s).unwrap();
        assert_eq!(zero, Point2::ZERO);
        assert!(m.input_grad(Point2::ZERO, 0, c, &s).is_err());
    }
}
