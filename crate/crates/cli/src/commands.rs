//! Experiment commands. Each takes a validated config and explicit paths so
//! that tests can drive them without a process boundary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use codelab::checkpoint::{load_checkpoint, save_checkpoint};
use codelab::metrics::{
    batch_variance, expected_reward, fit_gaussian, gaussian_kl, kl_upper_bound, win_rate, MetricsRow,
};
use codelab::model::EpsModel;
use codelab::reward::RewardSpec;
use codelab::rng::derive_seed;
use codelab::sampler::{base_sample, run_guided, GuidanceConfig, Method};
use codelab::schedule::NoiseSchedule;
use codelab::train::train;
use codelab::Point2;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Profile};
use crate::error::CliError;
use crate::svg::{self, Panel, Series};

/// Seed index reserved for the shared base batch.
const BASE_BATCH: u64 = u64::MAX;
/// Seed index for model initialization.
const MODEL_INIT: u64 = 2;

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const SHIFT_CSV: &str = "shift.csv";
pub const SHIFT_SVG: &str = "shift.svg";
pub const WINRATE_SVG: &str = "winrate_vs_kl.svg";
pub const REWARD_SVG: &str = "reward_vs_kl.svg";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(CliError::io(path))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::Output(e.to_string()))
}

fn points_csv(points: &[Point2], spec: &RewardSpec) -> Result<Vec<u8>, CliError> {
    #[derive(Serialize)]
    struct Row {
        x: f64,
        y: f64,
        reward: f64,
    }
    let rows: Vec<Row> = points
        .iter()
        .map(|p| Row {
            x: p.x,
            y: p.y,
            reward: spec.reward(*p),
        })
        .collect();
    csv_bytes(&rows)
}

/// Loads a checkpoint and checks that it was trained on the configured schedule.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<(EpsModel, NoiseSchedule), CliError> {
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    let (model, params) = load_checkpoint(path)?;
    if params != cfg.schedule {
        return Err(CliError::Config(format!(
            "checkpoint {} uses schedule {params:?} but the config asks for {:?}",
            path.display(),
            cfg.schedule
        )));
    }
    Ok((model, params.build()?))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains a model, writes the checkpoint and a per-epoch loss trace.
pub fn cmd_train(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> Result<TrainReport, CliError> {
    let sched = cfg.schedule.build()?;
    let init = EpsModel::init(cfg.model.hidden, cfg.model.embed, derive_seed(cfg.train.seed, MODEL_INIT))?;
    let (model, losses) = train(init, &cfg.prior, &sched, &cfg.train)?;
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_checkpoint(checkpoint, &model, cfg.schedule)?;

    #[derive(Serialize)]
    struct Row {
        epoch: usize,
        loss: f64,
    }
    let rows: Vec<Row> = losses
        .iter()
        .enumerate()
        .map(|(epoch, &loss)| Row { epoch, loss })
        .collect();
    write_file(&out_dir.join(LOSS_CSV), &csv_bytes(&rows)?)?;
    Ok(TrainReport {
        losses,
        checkpoint: checkpoint.to_path_buf(),
    })
}

/// Draws `n` base samples and writes them as CSV.
pub fn cmd_sample(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path, n: usize) -> Result<Vec<Point2>, CliError> {
    let (model, sched) = load_model(cfg, checkpoint)?;
    let xs = base_sample(&model, &sched, n, cfg.seed);
    write_file(out, &points_csv(&xs, &cfg.reward)?)?;
    Ok(xs)
}

/// Runs one guidance configuration `runs` times and writes the samples.
pub fn cmd_guide(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    point: &GuidanceConfig,
    runs: usize,
    out: &Path,
) -> Result<codelab::sampler::GuidedBatch, CliError> {
    let (model, sched) = load_model(cfg, checkpoint)?;
    let seeded = GuidanceConfig {
        seed: derive_seed(cfg.seed, point.seed),
        ..point.clone()
    };
    let batch = run_guided(&model, &sched, &cfg.reward, &seeded, runs)?;
    write_file(out, &points_csv(&batch.samples, &cfg.reward)?)?;
    Ok(batch)
}

/// Per-coordinate variance, or infinite variance with a warning when the
/// batch diverged.
fn spread(samples: &[Point2], what: &str) -> Result<(f64, f64), CliError> {
    match batch_variance(samples) {
        Ok(v) => Ok(v),
        Err(codelab::Error::NonFiniteSamples { count, total }) => {
            eprintln!("warning: {what}: {count} of {total} samples diverged");
            Ok((f64::INFINITY, f64::INFINITY))
        }
        Err(codelab::Error::MomentOverflow) => {
            eprintln!("warning: {what}: sample moments overflow");
            Ok((f64::INFINITY, f64::INFINITY))
        }
        Err(e) => Err(e.into()),
    }
}

/// Guided draws for one sweep point compared against a shared base batch.
fn evaluate_point(
    model: &EpsModel,
    sched: &NoiseSchedule,
    cfg: &ExperimentConfig,
    point: &GuidanceConfig,
    base: &[Point2],
    timing: bool,
) -> Result<MetricsRow, CliError> {
    let steps = sched.steps();
    let seeded = GuidanceConfig {
        seed: derive_seed(cfg.seed, point.seed),
        ..point.clone()
    };
    let started = Instant::now();
    let batch = run_guided(model, sched, &cfg.reward, &seeded, cfg.samples_per_point)?;
    let wall_ms = timing.then(|| started.elapsed().as_millis() as u64);

    let guided = &batch.samples;
    let k = cfg.kl_samples;
    let (n, b, eta) = (seeded.effective_n(), seeded.effective_block(steps), seeded.effective_eta());
    let (variance_x, variance_y) = spread(guided, &cell_label(&seeded, steps))?;
    // A diverged batch is infinitely far from the base fit.
    let kl_fit = match fit_gaussian(&guided[..k]) {
        Ok(fit) => gaussian_kl(&fit, &fit_gaussian(&base[..k])?)?,
        Err(codelab::Error::NonFiniteSamples { .. } | codelab::Error::MomentOverflow) => f64::INFINITY,
        Err(e) => return Err(e.into()),
    };
    let er = expected_reward(guided, &cfg.reward)?;
    let per = batch.stats.per_run(cfg.samples_per_point);
    Ok(MetricsRow {
        method: seeded.method,
        n,
        b,
        eta,
        scale: seeded.scale,
        seed: seeded.seed,
        expected_reward: er,
        normalized_reward: er / expected_reward(base, &cfg.reward)?,
        win_rate: win_rate(guided, base, &cfg.reward)?,
        kl_fit,
        kl_bound: kl_upper_bound(seeded.method, n, b, steps, eta).ok(),
        variance_x,
        variance_y,
        model_evals: per.model_evals,
        reward_queries: per.reward_queries,
        wall_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub profile: Profile,
    pub config: ExperimentConfig,
    pub rows: Vec<MetricsRow>,
}

/// Evaluates every sweep point and writes the metrics CSV and JSON summary.
/// Rows follow the config order. Wall time is recorded only when `timing`
/// is set, so that repeated runs produce identical files.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    profile: Profile,
    checkpoint: &Path,
    out_dir: &Path,
    timing: bool,
) -> Result<Vec<MetricsRow>, CliError> {
    let (model, sched) = load_model(cfg, checkpoint)?;
    let base = base_sample(&model, &sched, cfg.samples_per_point, derive_seed(cfg.seed, BASE_BATCH));
    let rows = cfg
        .sweep
        .iter()
        .map(|p| evaluate_point(&model, &sched, cfg, p, &base, timing))
        .collect::<Result<Vec<_>, _>>()?;

    write_file(&out_dir.join(METRICS_CSV), &csv_bytes(&rows)?)?;
    let summary = SweepSummary {
        profile,
        config: cfg.clone(),
        rows: rows.clone(),
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| CliError::Output(e.to_string()))?;
    write_file(&out_dir.join(SUMMARY_JSON), &json)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub displacement: f64,
    pub reward_x: f64,
    pub reward_y: f64,
    pub method: Method,
    pub n: usize,
    pub b: usize,
    pub eta: f64,
    pub seed: u64,
    pub mean_reward: f64,
    pub base_mean_reward: f64,
    pub normalized_reward: f64,
    pub variance_x: f64,
    pub variance_y: f64,
    pub variance_total: f64,
}

/// Label of a guidance cell, e.g. `code_eta N=50 B=80 eta=0.6`.
pub fn cell_label(cell: &GuidanceConfig, steps: usize) -> String {
    let mut label = format!("{} N={}", cell.method, cell.effective_n());
    if matches!(cell.method, Method::CoDe | Method::CoDeEta) {
        label.push_str(&format!(" B={}", cell.effective_block(steps)));
    }
    if cell.method == Method::CoDeEta {
        label.push_str(&format!(" eta={}", cell.eta));
    }
    if cell.method == Method::GradGuide {
        label.push_str(&format!(" scale={}", cell.scale));
    }
    label
}

/// Moves the reward mean along the configured direction and records the mean
/// reward and batch variance of every cell at every displacement.
pub fn cmd_shift_study(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> Result<Vec<ShiftRow>, CliError> {
    let (model, sched) = load_model(cfg, checkpoint)?;
    let shift = &cfg.shift;
    let base = base_sample(&model, &sched, shift.runs, derive_seed(cfg.seed, BASE_BATCH));
    let mut rows = Vec::new();
    for &d in &shift.displacements {
        let mu = shift.reward_mean(d);
        let spec = cfg.reward.with_mean(mu);
        let base_mean = expected_reward(&base, &spec)?;
        for cell in &shift.cells {
            let seeded = GuidanceConfig {
                seed: derive_seed(cfg.seed, cell.seed),
                ..cell.clone()
            };
            let batch = run_guided(&model, &sched, &spec, &seeded, shift.runs)?;
            let (vx, vy) = spread(&batch.samples, &format!("{} at d={d}", cell_label(&seeded, sched.steps())))?;
            let mean_reward = expected_reward(&batch.samples, &spec)?;
            rows.push(ShiftRow {
                displacement: d,
                reward_x: mu.x,
                reward_y: mu.y,
                method: seeded.method,
                n: seeded.effective_n(),
                b: seeded.effective_block(sched.steps()),
                eta: seeded.effective_eta(),
                seed: seeded.seed,
                mean_reward,
                base_mean_reward: base_mean,
                normalized_reward: mean_reward / base_mean,
                variance_x: vx,
                variance_y: vy,
                variance_total: vx + vy,
            });
        }
    }
    write_file(&out_dir.join(SHIFT_CSV), &csv_bytes(&rows)?)?;

    let series_for = |value: fn(&ShiftRow) -> f64| -> Vec<Series> {
        shift
            .cells
            .iter()
            .enumerate()
            .map(|(c, cell)| Series {
                label: cell_label(cell, sched.steps()),
                points: rows
                    .iter()
                    .skip(c)
                    .step_by(shift.cells.len().max(1))
                    .map(|r| (r.displacement, value(r)))
                    .collect(),
            })
            .collect()
    };
    let panels = [
        Panel {
            title: "Mean reward vs reward displacement".into(),
            x_label: "displacement".into(),
            y_label: "mean reward".into(),
            log_y: false,
            series: series_for(|r| r.mean_reward),
        },
        Panel {
            title: "Batch variance vs reward displacement".into(),
            x_label: "displacement".into(),
            y_label: "total variance".into(),
            log_y: true,
            series: series_for(|r| r.variance_total),
        },
    ];
    write_file(&out_dir.join(SHIFT_SVG), svg::render(&panels).as_bytes())?;
    Ok(rows)
}

/// Parses a metrics CSV, reporting the first column that does not match the
/// expected schema.
pub fn read_metrics(text: &str) -> Result<Vec<MetricsRow>, CliError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let expected = MetricsRow::COLUMNS;
    for i in 0..headers.len().max(expected.len()) {
        match (headers.get(i), expected.get(i)) {
            (Some(h), Some(e)) if h == *e => {}
            (Some(h), Some(e)) => {
                return Err(CliError::Schema {
                    column: h.to_string(),
                    detail: format!("expected `{e}` at position {i}"),
                })
            }
            (Some(h), None) => {
                return Err(CliError::Schema {
                    column: h.to_string(),
                    detail: "unexpected extra column".into(),
                })
            }
            (None, Some(e)) => {
                return Err(CliError::Schema {
                    column: e.to_string(),
                    detail: "missing column".into(),
                })
            }
            (None, None) => unreachable!(),
        }
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row: MetricsRow = record.deserialize(Some(&headers)).map_err(|e| {
            let column = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err
                    .field()
                    .and_then(|f| expected.get(f as usize))
                    .map(|c| c.to_string()),
                _ => None,
            }
            .unwrap_or_else(|| "?".into());
            CliError::Schema {
                column,
                detail: format!("data row {}: {e}", line + 1),
            }
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn method_rank(m: Method) -> usize {
    Method::ALL.iter().position(|&x| x == m).unwrap_or(usize::MAX)
}

/// One series per method, points ordered by the sweep parameters.
fn trade_off_series(rows: &[MetricsRow], y: fn(&MetricsRow) -> f64) -> Vec<Series> {
    let mut groups: BTreeMap<usize, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(method_rank(r.method)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_by(|a, b| {
                (a.n, a.b)
                    .cmp(&(b.n, b.b))
                    .then(a.eta.total_cmp(&b.eta))
                    .then(a.scale.total_cmp(&b.scale))
            });
            Series {
                label: g[0].method.to_string(),
                points: g.iter().map(|r| (r.kl_fit, y(r))).collect(),
            }
        })
        .collect()
}

/// Renders the win-rate and normalized-reward trade-off curves of a metrics CSV.
pub fn render_trade_offs(rows: &[MetricsRow]) -> (String, String) {
    let panel = |title: &str, y_label: &str, y: fn(&MetricsRow) -> f64| Panel {
        title: title.into(),
        x_label: "KL (Gaussian fit)".into(),
        y_label: y_label.into(),
        log_y: false,
        series: trade_off_series(rows, y),
    };
    (
        svg::render(&[panel("Win rate vs KL", "win rate", |r| r.win_rate)]),
        svg::render(&[panel("Normalized reward vs KL", "normalized reward", |r| r.normalized_reward)]),
    )
}

pub fn cmd_plot(csv_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = fs::read_to_string(csv_path).map_err(CliError::io(csv_path))?;
    let rows = read_metrics(&text)?;
    let (win, reward) = render_trade_offs(&rows);
    let paths = vec![out_dir.join(WINRATE_SVG), out_dir.join(REWARD_SVG)];
    write_file(&paths[0], win.as_bytes())?;
    write_file(&paths[1], reward.as_bytes())?;
    Ok(paths)
}
