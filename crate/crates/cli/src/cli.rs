//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use codelab::sampler::{GradMode, GuidanceConfig, Method};

use crate::commands;
use crate::config::{ExperimentConfig, Profile};
use crate::error::{CliError, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "codelab", version, about = "Reward-guided sampling experiments on a 2D diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (.toml or .json); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model checkpoint; defaults to `<output_dir>/model.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory, or output file for `sample` and `guide`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Profile::Full)]
    pub profile: Profile,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the noise predictor and write a checkpoint and loss trace.
    Train(Common),
    /// Draw base-model samples.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Number of samples; defaults to `samples_per_point`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Draw samples with one guidance method.
    Guide {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
        #[arg(long = "streams", default_value_t = 1)]
        n: usize,
        #[arg(long = "block", default_value_t = 100)]
        b: usize,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long, default_value_t = 0.0)]
        scale: f64,
        #[arg(long, value_parser = parse_grad_mode, default_value = "exact")]
        grad_mode: GradMode,
        /// Number of independent runs; defaults to `samples_per_point`.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Evaluate every sweep point of the config.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Record wall time per point (makes output run-dependent).
        #[arg(long)]
        timing: bool,
    },
    /// Reward-mean displacement study.
    ShiftStudy(Common),
    /// Render trade-off plots from a metrics CSV.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_grad_mode(s: &str) -> Result<GradMode, String> {
    match s {
        "exact" => Ok(GradMode::Exact),
        "frozen" => Ok(GradMode::Frozen),
        _ => Err(format!("expected `exact` or `frozen`, got `{s}`")),
    }
}

struct Resolved {
    cfg: ExperimentConfig,
    profile: Profile,
    checkpoint: PathBuf,
    out: Option<PathBuf>,
}

impl Resolved {
    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.cfg.output_dir.clone())
    }

    fn out_file(&self, default_name: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.cfg.output_dir.join(default_name))
    }
}

fn resolve(common: &Common) -> Result<Resolved, CliError> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    }
    .with_profile(common.profile)
    .with_seed(common.seed);
    cfg.validate()?;
    let checkpoint = common
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("model.json"));
    Ok(Resolved {
        cfg,
        profile: common.profile,
        checkpoint,
        out: common.out.clone(),
    })
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

/// Runs one command and returns a short report for stdout.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Train(common) => {
            let r = resolve(&common)?;
            let report = commands::cmd_train(&r.cfg, &r.checkpoint, &r.out_dir())?;
            let first = report.losses.first().copied().unwrap_or(f64::NAN);
            let last = report.losses.last().copied().unwrap_or(f64::NAN);
            Ok(format!(
                "trained {} epochs (loss {first:.4} -> {last:.4}); checkpoint {}",
                report.losses.len(),
                show(&report.checkpoint)
            ))
        }
        Command::Sample { common, n } => {
            let r = resolve(&common)?;
            let out = r.out_file("samples.csv");
            let n = n.unwrap_or(r.cfg.samples_per_point);
            commands::cmd_sample(&r.cfg, &r.checkpoint, &out, n)?;
            Ok(format!("wrote {n} samples to {}", show(&out)))
        }
        Command::Guide {
            common,
            method,
            n,
            b,
            eta,
            scale,
            grad_mode,
            runs,
        } => {
            let r = resolve(&common)?;
            let point = GuidanceConfig {
                grad_mode,
                ..GuidanceConfig::new(method).with_n(n).with_block(b).with_eta(eta).with_scale(scale)
            };
            let steps = r.cfg.schedule.steps;
            point.validate(steps).map_err(|e| CliError::Usage(e.to_string()))?;
            let out = r.out_file("guided.csv");
            let runs = runs.unwrap_or(r.cfg.samples_per_point);
            let batch = commands::cmd_guide(&r.cfg, &r.checkpoint, &point, runs, &out)?;
            let per = batch.stats.per_run(runs);
            Ok(format!(
                "wrote {runs} samples to {} ({} model evals, {} reward queries per sample)",
                show(&out),
                per.model_evals,
                per.reward_queries
            ))
        }
        Command::Sweep { common, timing } => {
            let r = resolve(&common)?;
            let dir = r.out_dir();
            let rows = commands::cmd_sweep(&r.cfg, r.profile, &r.checkpoint, &dir, timing)?;
            Ok(format!("wrote {} rows to {}", rows.len(), show(&dir.join(commands::METRICS_CSV))))
        }
        Command::ShiftStudy(common) => {
            let r = resolve(&common)?;
            let dir = r.out_dir();
            let rows = commands::cmd_shift_study(&r.cfg, &r.checkpoint, &dir)?;
            Ok(format!("wrote {} rows to {}", rows.len(), show(&dir.join(commands::SHIFT_CSV))))
        }
        Command::Plot { csv, out } => {
            let dir = out.unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
            let paths = commands::cmd_plot(&csv, &dir)?;
            let names: Vec<String> = paths.iter().map(|p| show(p)).collect();
            Ok(format!("wrote {}", names.join(", ")))
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(report) => {
            println!("{report}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
