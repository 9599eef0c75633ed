use codelab::analytic::{GaussianPriorEps, GmmPriorEps};
use codelab::metrics::{fit_gaussian, gaussian_kl};
use codelab::model::{EpsModel, EpsPredictor};
use codelab::reward::RewardSpec;
use codelab::rng::{normal2, Purpose};
use codelab::sampler::{
    base_sample, bon_sample, code_eta_sample, code_sample, code_sample_runs, ddpm_step,
    grad_guided_sample, guidance_shift, run_guided, svdd_sample, GradMode, GuidanceConfig, Method,
};
use codelab::schedule::{NoiseSchedule, ScheduleParams};
use codelab::train::GmmSpec;
use codelab::{Error, Point2};
use proptest::prelude::*;

fn ci_schedule() -> NoiseSchedule {
    ScheduleParams {
        steps: 100,
        ..Default::default()
    }
    .build()
    .unwrap()
}

fn small_model() -> EpsModel {
    EpsModel::init(32, 8, 11).unwrap()
}

fn same(a: Point2, b: Point2) -> bool {
    a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits()
}

#[test]
fn special_cases_are_bit_identical() {
    let sched = ci_schedule();
    let model = small_model();
    let spec = RewardSpec::default();
    let steps = sched.steps();
    for seed in [0, 1, 77, u64::MAX] {
        let base = base_sample(&model, &sched, 1, seed)[0];
        for b in [1, 7, 50, steps] {
            assert!(same(code_sample(&model, &sched, &spec, 1, b, seed).unwrap(), base));
        }
        assert!(same(bon_sample(&model, &sched, &spec, 1, seed).unwrap(), base));
        assert!(same(
            grad_guided_sample(&model, &sched, &spec, 0.0, GradMode::Exact, seed).unwrap(),
            base
        ));
        for n in [2, 5] {
            let bon = bon_sample(&model, &sched, &spec, n, seed).unwrap();
            assert!(same(bon, code_sample(&model, &sched, &spec, n, steps, seed).unwrap()));
            let svdd = svdd_sample(&model, &sched, &spec, n, seed).unwrap();
            assert!(same(svdd, code_sample(&model, &sched, &spec, n, 1, seed).unwrap()));
            let code = code_sample(&model, &sched, &spec, n, 10, seed).unwrap();
            let eta = code_eta_sample(&model, &sched, &spec, n, 10, 1.0, Point2::new(50.0, -9.0), seed).unwrap();
            assert!(same(code, eta));
        }
    }
}

#[test]
fn base_items_do_not_depend_on_batch_size() {
    let sched = ci_schedule();
    let model = small_model();
    let one = base_sample(&model, &sched, 1, 5);
    let two = base_sample(&model, &sched, 2, 5);
    let many = base_sample(&model, &sched, 700, 5);
    assert!(same(one[0], two[0]));
    assert!(same(two[1], many[1]));
    assert!(!same(two[0], two[1]));
}

/// Best-of-N written out directly: N full rollouts from a shared start, each
/// stream on its own substream, keeping the highest final log reward.
#[test]
fn bon_matches_explicit_full_rollouts() {
    let sched = ci_schedule();
    let model = small_model();
    let spec = RewardSpec::default();
    let seed = 42;
    let n = 6;
    let mut best: Option<(f64, Point2)> = None;
    for stream in 0..n {
        let mut x = normal2(seed, Purpose::Init, 0);
        for t in (1..=sched.steps()).rev() {
            let z = if t > 1 { normal2(seed, Purpose::Step(t), stream) } else { Point2::ZERO };
            x = ddpm_step(&model, &sched, x, t, z).unwrap();
        }
        let v = spec.log_reward(x).unwrap();
        if best.map_or(true, |(bv, _)| v > bv) {
            best = Some((v, x));
        }
    }
    let got = bon_sample(&model, &sched, &spec, n as usize, seed).unwrap();
    assert!(same(got, best.unwrap().1));
}

/// Linear predictor `eps = k x` with closed-form Tweedie values.
struct Linear(f64);

impl EpsPredictor for Linear {
    fn predict_at(&self, xs: &[Point2], _t: usize, _s: &NoiseSchedule) -> Vec<Point2> {
        xs.iter().map(|&x| self.0 * x).collect()
    }
    fn input_vjp_at(&self, _xs: &[Point2], _t: usize, c: &[Point2], _s: &NoiseSchedule) -> Vec<Point2> {
        c.iter().map(|&c| self.0 * c).collect()
    }
}

#[test]
fn selection_matches_exhaustive_enumeration() {
    // T = 4, B = 2, N = 2: two blocks, two candidate streams per block.
    let sched = ScheduleParams {
        steps: 4,
        beta_start: 0.1,
        beta_end: 0.4,
    }
    .build()
    .unwrap();
    let model = Linear(0.3);
    let spec = RewardSpec::Gaussian {
        mu_r: Point2::new(1.0, -1.0),
        sigma_r: 1.0,
    };

    let value_at = |x: Point2, t: usize| -> f64 {
        if t == 0 {
            spec.log_reward(x).unwrap()
        } else {
            let x0 = (x - sched.sqrt_one_minus_alpha_bar(t) * (0.3 * x)) * (1.0 / sched.sqrt_alpha_bar(t));
            spec.log_reward(x0).unwrap()
        }
    };
    let roll = |mut x: Point2, from: usize, to: usize, seed: u64, stream: u64| {
        for t in (to + 1..=from).rev() {
            let z = if t > 1 { normal2(seed, Purpose::Step(t), stream) } else { Point2::ZERO };
            let mean = (x - (sched.beta(t) / sched.sqrt_one_minus_alpha_bar(t)) * (0.3 * x)) * (1.0 / sched.alpha(t).sqrt());
            x = mean + sched.sqrt_beta(t) * z;
        }
        x
    };

    let mut picks_seen = [[0usize; 2]; 2];
    for seed in 0..64u64 {
        let x4 = normal2(seed, Purpose::Init, 0);
        // Enumerate every (first pick, second pick) path and its block values.
        let mid: Vec<Point2> = (0..2).map(|s| roll(x4, 4, 2, seed, s)).collect();
        let mid_vals: Vec<f64> = mid.iter().map(|&x| value_at(x, 2)).collect();
        let first = if mid_vals[1] > mid_vals[0] { 1 } else { 0 };
        let ends: Vec<Point2> = (0..2).map(|s| roll(mid[first], 2, 0, seed, s)).collect();
        let end_vals: Vec<f64> = ends.iter().map(|&x| value_at(x, 0)).collect();
        let second = if end_vals[1] > end_vals[0] { 1 } else { 0 };
        picks_seen[first][second] += 1;

        let got = code_sample(&model, &sched, &spec, 2, 2, seed).unwrap();
        assert!((got - ends[second]).norm() < 1e-12, "seed {seed}");
    }
    // The seeds exercise every combination of picks.
    assert!(picks_seen.iter().flatten().all(|&c| c > 0), "{picks_seen:?}");
}

#[test]
fn tweedie_matches_gaussian_posterior_mean() {
    let sched = ScheduleParams::default().build().unwrap();
    let prior = GaussianPriorEps {
        mean: Point2::new(5.0, 3.0),
        std: 2.0,
    };
    for &t in &[1, 10, 100, 500, 999, 1000] {
        for &x in &[Point2::new(0.0, 0.0), Point2::new(5.0, 3.0), Point2::new(-3.0, 8.0)] {
            let eps = prior.predict_at(&[x], t, &sched)[0];
            let tw = sched.tweedie_x0(x, eps, t).unwrap();
            let exact = prior.posterior_mean_x0(x, t, &sched);
            assert!((tw - exact).norm() < 1e-10, "t={t}: {tw:?} vs {exact:?}");
        }
    }
}

#[test]
fn guided_step_matches_tilted_gaussian_shift() {
    // Prior N(m, s^2 I) gives marginal N(sqrt(abar) m, v I) and a linear
    // Tweedie map x0_hat = m + g (x - sqrt(abar) m). Tilting the marginal by
    // r(x0_hat(x))^lambda gives another Gaussian, in precision form:
    //   P = 1/v + lambda g^2 / sr^2,
    //   P mu_tilt = sqrt(abar) m / v + lambda g^2 / sr^2 * c,
    // where c solves x0_hat(c) = mu_r. The reverse-step mean moves by
    // beta / sqrt(alpha) times the change in score.
    let sched = ScheduleParams::default().build().unwrap();
    let (m, s) = (Point2::new(5.0, 3.0), 2.0);
    let prior = GaussianPriorEps { mean: m, std: s };
    let (mu_r, sr) = (Point2::new(14.0, 3.0), 2.0);
    let spec = RewardSpec::Gaussian { mu_r, sigma_r: sr };

    for &t in &[2, 50, 300, 800, 1000] {
        for &lambda in &[0.5, 1.0, 10.0] {
            let x = Point2::new(1.5, -2.0);
            let ab = sched.alpha_bar(t);
            let v = ab * s * s + 1.0 - ab;
            let g = ab.sqrt() * s * s / v;
            let c = ab.sqrt() * m + (1.0 / g) * (mu_r - m);
            let prec_r = lambda * g * g / (sr * sr);
            let p = 1.0 / v + prec_r;
            let mu_tilt = (1.0 / p) * ((ab.sqrt() / v) * m + prec_r * c);
            let score_tilt = -p * (x - mu_tilt);
            let score_base = -(1.0 / v) * (x - ab.sqrt() * m);
            let expected = (sched.beta(t) / sched.alpha(t).sqrt()) * (score_tilt - score_base);

            let eps = prior.predict_at(&[x], t, &sched);
            let shift = guidance_shift(&prior, &sched, &spec, &[x], &eps, t, lambda, GradMode::Exact).unwrap()[0];
            let base_mean = sched.posterior_mean(x, eps[0], t).unwrap();
            let guided_mean = sched.posterior_mean(x, eps[0] - shift, t).unwrap();
            let got = guided_mean - base_mean;
            assert!(
                (got - expected).norm() <= 1e-10 * expected.norm().max(1.0),
                "t={t} lambda={lambda}: {got:?} vs {expected:?}"
            );
        }
    }
}

#[test]
fn frozen_mode_differs_only_through_jacobian() {
    let sched = ScheduleParams::default().build().unwrap();
    let spec = RewardSpec::default();
    let zero = GaussianPriorEps {
        mean: Point2::ZERO,
        std: 1.0,
    };
    // With a standard normal prior eps* = sqrt(1 - abar) x, so the exact
    // Jacobian of x0_hat is sqrt(abar) I and the frozen one 1/sqrt(abar) I.
    let x = Point2::new(2.0, 1.0);
    let t = 400;
    let eps = zero.predict_at(&[x], t, &sched);
    let exact = guidance_shift(&zero, &sched, &spec, &[x], &eps, t, 1.0, GradMode::Exact).unwrap()[0];
    let frozen = guidance_shift(&zero, &sched, &spec, &[x], &eps, t, 1.0, GradMode::Frozen).unwrap()[0];
    let ab = sched.alpha_bar(t);
    assert!((exact - ab * frozen).norm() < 1e-12);
}

#[test]
fn counters_follow_block_accounting() {
    let sched = ScheduleParams::default().build().unwrap();
    let prior = GmmPriorEps::new(GmmSpec::default());
    let spec = RewardSpec::default();
    for &(n, b, blocks) in &[(3usize, 100usize, 10u64), (2, 300, 4), (4, 1000, 1), (2, 1, 1000)] {
        let batch = code_sample_runs(&prior, &sched, &spec, n, b, &[9]).unwrap();
        assert_eq!(batch.stats.selections, blocks, "B={b}");
        assert_eq!(batch.stats.model_evals, n as u64 * 1000);
        assert_eq!(batch.stats.reward_queries, n as u64 * blocks);
    }

    let cfg = GuidanceConfig::new(Method::CoDeEta).with_n(5).with_block(80).with_eta(0.6);
    let per = run_guided(&prior, &sched, &spec, &cfg, 3).unwrap().stats.per_run(3);
    assert_eq!(per.model_evals, 5 * 600);
    assert_eq!(per.reward_queries, 5 * 8);
    assert_eq!(per.selections, 8);

    let base = run_guided(&prior, &sched, &spec, &GuidanceConfig::new(Method::Base), 2).unwrap();
    assert_eq!(base.stats.model_evals, 2000);
    assert_eq!(base.stats.reward_queries, 0);

    let grad = GuidanceConfig::new(Method::GradGuide).with_scale(5.0);
    let per = run_guided(&prior, &sched, &spec, &grad, 2).unwrap().stats.per_run(2);
    assert_eq!(per.model_evals, 1000);
    assert_eq!(per.reward_queries, 1000);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let sched = ci_schedule();
    let model = small_model();
    let spec = RewardSpec::default();
    let cfgs = [
        GuidanceConfig::new(Method::CoDe).with_n(4).with_block(10).with_seed(3),
        GuidanceConfig::new(Method::CoDeEta).with_n(3).with_block(8).with_eta(0.6).with_seed(4),
        GuidanceConfig::new(Method::GradGuide).with_scale(5.0).with_seed(5),
        GuidanceConfig::new(Method::Base).with_seed(6),
    ];
    let run_all = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                cfgs.iter()
                    .map(|c| run_guided(&model, &sched, &spec, c, 300).unwrap())
                    .collect::<Vec<_>>()
            })
    };
    let serial = run_all(1);
    let parallel = run_all(4);
    for (a, b) in serial.iter().zip(&parallel) {
        assert_eq!(a.stats, b.stats);
        assert!(a.samples.iter().zip(&b.samples).all(|(&p, &q)| same(p, q)));
    }
}

#[test]
fn constant_reward_leaves_distribution_unchanged() {
    // A quantization step far larger than any distance makes the reward
    // identically zero, so selection is uninformative.
    let sched = ScheduleParams::default().build().unwrap();
    let prior = GmmPriorEps::new(GmmSpec::default());
    let flat = RewardSpec::Quantized {
        mu_r: Point2::ZERO,
        delta: 1e9,
    };
    let cfg = GuidanceConfig::new(Method::CoDe).with_n(4).with_block(100).with_seed(12);
    let guided = run_guided(&prior, &sched, &flat, &cfg, 2000).unwrap().samples;
    let base = base_sample(&prior, &sched, 2000, 99);
    let kl = gaussian_kl(&fit_gaussian(&guided).unwrap(), &fit_gaussian(&base).unwrap()).unwrap();
    assert!(kl <= 0.02, "kl {kl}");
}

#[test]
fn quantized_reward_rejects_gradient_guidance() {
    let sched = ci_schedule();
    let model = small_model();
    let q = RewardSpec::Quantized {
        mu_r: Point2::new(14.0, 3.0),
        delta: 1.0,
    };
    let err = grad_guided_sample(&model, &sched, &q, 5.0, GradMode::Exact, 1).unwrap_err();
    assert!(matches!(err, Error::UnsupportedReward { variant: "quantized", .. }), "{err}");
    // Selection-based methods only need reward values.
    assert!(code_sample(&model, &sched, &q, 3, 10, 1).unwrap().is_finite());
    assert!(svdd_sample(&model, &sched, &q, 3, 1).unwrap().is_finite());
    assert!(bon_sample(&model, &sched, &q, 3, 1).unwrap().is_finite());
}

#[test]
fn tiny_eta_stays_near_reference() {
    let sched = ci_schedule();
    let prior = GmmPriorEps::new(GmmSpec::default());
    let spec = RewardSpec::default();
    let x_ref = Point2::new(6.0, 4.0);
    for seed in 0..10 {
        let out = code_eta_sample(&prior, &sched, &spec, 1, 1, 0.01, x_ref, seed).unwrap();
        assert!((out - x_ref).norm() < 0.1, "{out:?}");
    }
    assert!(code_eta_sample(&prior, &sched, &spec, 1, 1, 0.001, x_ref, 0).is_err());
}

#[test]
fn invalid_parameters_are_rejected() {
    let sched = ci_schedule();
    let model = small_model();
    let spec = RewardSpec::default();
    assert!(code_sample(&model, &sched, &spec, 0, 10, 0).is_err());
    assert!(code_sample(&model, &sched, &spec, 2, 0, 0).is_err());
    assert!(code_sample(&model, &sched, &spec, 2, 101, 0).is_err());
    assert!(code_eta_sample(&model, &sched, &spec, 2, 10, 0.0, Point2::ZERO, 0).is_err());
    assert!(code_eta_sample(&model, &sched, &spec, 2, 10, 1.01, Point2::ZERO, 0).is_err());
    assert!(grad_guided_sample(&model, &sched, &spec, -1.0, GradMode::Exact, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn single_candidate_is_base_for_any_block(seed in any::<u64>(), b in 1usize..=100) {
        let sched = ci_schedule();
        let model = small_model();
        let spec = RewardSpec::default();
        let base = base_sample(&model, &sched, 1, seed)[0];
        prop_assert!(same(code_sample(&model, &sched, &spec, 1, b, seed).unwrap(), base));
    }

    #[test]
    fn selection_never_lowers_final_reward_for_bon(seed in any::<u64>(), n in 2usize..6) {
        // The best of N streams is at least as good as stream 0 alone.
        let sched = ci_schedule();
        let model = small_model();
        let spec = RewardSpec::default();
        let one = bon_sample(&model, &sched, &spec, 1, seed).unwrap();
        let many = bon_sample(&model, &sched, &spec, n, seed).unwrap();
        prop_assert!(spec.log_reward(many).unwrap() >= spec.log_reward(one).unwrap());
    }
}
