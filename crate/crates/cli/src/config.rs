//! Experiment configuration, read from TOML or JSON by file extension.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use codelab::reward::RewardSpec;
use codelab::sampler::{GuidanceConfig, Method};
use codelab::schedule::ScheduleParams;
use codelab::train::{GmmSpec, TrainConfig};
use codelab::Point2;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Steps of the reduced schedule used by the CI profile.
pub const CI_STEPS: usize = 100;
pub const CI_EPOCHS: usize = 20;
pub const CI_SAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Settings exactly as configured.
    #[default]
    Full,
    /// Short schedule, few epochs and small batches for smoke runs.
    Ci,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub hidden: usize,
    pub embed: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            hidden: codelab::model::DEFAULT_HIDDEN,
            embed: codelab::model::DEFAULT_EMBED,
        }
    }
}

/// Reward-mean displacement study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftStudyConfig {
    /// Distances from `origin` along the direction towards `toward`; ascending.
    pub displacements: Vec<f64>,
    pub origin: Point2,
    pub toward: Point2,
    pub cells: Vec<GuidanceConfig>,
    pub runs: usize,
}

impl Default for ShiftStudyConfig {
    fn default() -> Self {
        Self {
            displacements: (0..=6).map(|k| 2.0 * k as f64).collect(),
            origin: GmmSpec::default().mean(),
            toward: Point2::new(14.0, 3.0),
            cells: vec![
                GuidanceConfig::new(Method::BoN).with_n(50),
                GuidanceConfig::new(Method::SvddPm).with_n(50),
                GuidanceConfig::new(Method::CoDe).with_n(50).with_block(80),
                GuidanceConfig::new(Method::CoDeEta).with_n(50).with_block(80).with_eta(0.6),
            ],
            runs: 500,
        }
    }
}

impl ShiftStudyConfig {
    /// Unit vector from `origin` towards `toward`.
    pub fn direction(&self) -> Point2 {
        let d = self.toward - self.origin;
        d * (1.0 / d.norm())
    }

    pub fn reward_mean(&self, displacement: f64) -> Point2 {
        self.origin + displacement * self.direction()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub prior: GmmSpec,
    pub reward: RewardSpec,
    pub schedule: ScheduleParams,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub sweep: Vec<GuidanceConfig>,
    pub samples_per_point: usize,
    /// Samples per batch used for the Gaussian-fit KL; at most `samples_per_point`.
    pub kl_samples: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub shift: ShiftStudyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            prior: GmmSpec::default(),
            reward: RewardSpec::default(),
            schedule: ScheduleParams::default(),
            model: ModelDims::default(),
            train: TrainConfig::default(),
            sweep: vec![GuidanceConfig::new(Method::Base)],
            samples_per_point: 1000,
            kl_samples: 1000,
            output_dir: PathBuf::from("out"),
            seed: 0,
            shift: ShiftStudyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            Some("toml") => toml::from_str(&text).map_err(|e| e.to_string()),
            _ => Err("expected a .toml or .json extension".to_string()),
        };
        let cfg: Self = parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let core = |e: codelab::Error| CliError::Config(e.to_string());
        self.prior.validate().map_err(core)?;
        self.reward.validate().map_err(core)?;
        let sched = self.schedule.build().map_err(core)?;
        self.train.validate().map_err(core)?;
        if self.sweep.is_empty() {
            return bad("sweep list must not be empty".into());
        }
        for point in &self.sweep {
            point.validate(sched.steps()).map_err(core)?;
        }
        if self.samples_per_point < 2 {
            return bad("samples_per_point must be at least 2".into());
        }
        if self.kl_samples < 2 || self.kl_samples > self.samples_per_point {
            return bad(format!(
                "kl_samples must lie in 2..={}, got {}",
                self.samples_per_point, self.kl_samples
            ));
        }
        let shift = &self.shift;
        if shift.displacements.windows(2).any(|w| !(w[0] <= w[1])) {
            return bad("shift displacements must be sorted ascending".into());
        }
        if shift.runs < 2 {
            return bad("shift runs must be at least 2".into());
        }
        if !(shift.toward - shift.origin).norm().is_normal() {
            return bad("shift origin and target must differ".into());
        }
        for cell in &shift.cells {
            cell.validate(sched.steps()).map_err(core)?;
        }
        Ok(())
    }

    /// Applies a profile. The CI profile shortens the schedule and scales
    /// block sizes with it, trains for fewer epochs and draws fewer samples.
    pub fn with_profile(mut self, profile: Profile) -> Self {
        if profile == Profile::Ci {
            let from = self.schedule.steps;
            let scale_block = |b: usize| ((b * CI_STEPS + from / 2) / from).clamp(1, CI_STEPS);
            self.schedule.steps = CI_STEPS;
            self.train.epochs = self.train.epochs.min(CI_EPOCHS);
            self.samples_per_point = self.samples_per_point.min(CI_SAMPLES);
            self.kl_samples = self.kl_samples.min(self.samples_per_point);
            self.shift.runs = self.shift.runs.min(CI_SAMPLES);
            for point in self.sweep.iter_mut().chain(self.shift.cells.iter_mut()) {
                point.b = scale_block(point.b);
            }
        }
        self
    }

    /// A seed given on the command line replaces both the sampling and the
    /// training seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.train.seed = s;
        }
        self
    }
}
