//! End-to-end experiment: align, train one model per level, transform the
//! held-out frames and score them.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{make_samples, train_with, transform, EpochStats, TrainConfig, TrainHistory};
use crate::error::{Error, Result};
use crate::field::{align_temporal, align_vertical, fld, intersect_masks, regrid_horizontal_with, FieldSeries, MaskRule};
use crate::metrics::{evaluate, write_report, EvalReport};
use crate::stunet::checkpoint::{save_bank, to_bytes};
use crate::stunet::{Direction, StuNetArch, StuNetModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    /// Half-open `[start, end)` frame ranges.
    pub train: [usize; 2],
    pub test: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub base_channels: usize,
    /// Square working grid; both fields are regridded to it when needed.
    pub grid: usize,
    pub mask_rule: MaskRule,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection {
            base_channels: 16,
            grid: 64,
            mask_rule: MaskRule::AllSupport,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub minibatch: usize,
    pub max_epochs: usize,
    pub drop_factor: f64,
    pub drop_period: usize,
    pub early_stop_rmse: Option<f64>,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr: d.initial_lr,
            minibatch: d.minibatch,
            max_epochs: d.max_epochs,
            drop_factor: d.drop_factor,
            drop_period: d.drop_period,
            early_stop_rmse: d.early_stop_rmse,
            seed: d.seed,
            shuffle: d.shuffle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model_field: PathBuf,
    pub obs_field: PathBuf,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default = "one")]
    pub window: usize,
    pub split: Split,
    /// Level indices to process; all levels when absent.
    #[serde(default)]
    pub levels: Option<Vec<usize>>,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub train: TrainSection,
    pub out_dir: PathBuf,
}

fn one() -> usize {
    1
}

impl ExperimentSpec {
    /// Reads a spec file; relative paths are taken relative to the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut spec: ExperimentSpec =
            serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut spec.model_field, &mut spec.obs_field, &mut spec.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            initial_lr: t.lr,
            minibatch: t.minibatch,
            max_epochs: t.max_epochs,
            drop_factor: t.drop_factor,
            drop_period: t.drop_period,
            early_stop_rmse: t.early_stop_rmse,
            window: self.window,
            direction: self.direction,
            seed: t.seed,
            train_frames: self.split.train,
            shuffle: t.shuffle,
            ..TrainConfig::default()
        }
    }

    /// Checks everything that can be checked without reading the fields.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let [a, b] = self.split.train;
        let [c, d] = self.split.test;
        if a >= b {
            return Err(Error::Config(format!("empty train range {a}..{b}")));
        }
        if c >= d {
            return Err(Error::Config(format!("empty test range {c}..{d}")));
        }
        StuNetArch::new(self.arch.grid, 2 * self.window, self.arch.base_channels).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelResult {
    pub level: usize,
    pub depth_m: f64,
    pub model: StuNetModel,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub levels: Vec<LevelResult>,
    /// Transformed test frames of the selected levels.
    pub transformed: FieldSeries,
    pub report: EvalReport,
}

/// Brings both fields onto one grid: common time step, observation depths,
/// square working grid and a shared mask.
pub fn align_pair(model: &FieldSeries, obs: &FieldSeries, grid: usize, rule: MaskRule) -> Result<(FieldSeries, FieldSeries)> {
    let dt = model.spec().dt_hours.max(obs.spec().dt_hours);
    let mut m = align_temporal(model, dt)?;
    let mut o = align_temporal(obs, dt)?;
    if m.spec().depths_m != o.spec().depths_m {
        m = align_vertical(&m, &o.spec().depths_m)?;
    }
    if (m.spec().nx, m.spec().ny) != (grid, grid) {
        m = regrid_horizontal_with(&m, grid, grid, rule)?;
    }
    if (o.spec().nx, o.spec().ny) != (grid, grid) {
        o = regrid_horizontal_with(&o, grid, grid, rule)?;
    }
    if m.nt() != o.nt() {
        return Err(Error::Misaligned(format!(
            "{} model frames vs {} observation frames after alignment",
            m.nt(),
            o.nt()
        )));
    }
    let mask = intersect_masks(m.mask(), o.mask());
    Ok((m.with_mask(mask.clone())?, o.with_mask(mask)?))
}

fn train_level(
    spec: &ExperimentSpec,
    model_fs: &FieldSeries,
    obs_fs: &FieldSeries,
    level: usize,
    on_epoch: &(dyn Fn(usize, &EpochStats) + Sync),
) -> Result<LevelResult> {
    let cfg = spec.train_config();
    let set = make_samples(model_fs, obs_fs, level, &cfg)?;
    let arch = StuNetArch::new(spec.arch.grid, 2 * spec.window, spec.arch.base_channels)?;
    let net = StuNetModel::build(arch, cfg.seed.wrapping_add(level as u64))?;
    let (net, history) = train_with(net, &set, &cfg, |e| on_epoch(level, e))?;
    Ok(LevelResult {
        level,
        depth_m: model_fs.spec().depths_m[level],
        model: net,
        history,
    })
}

/// Aligned fields and the selected level indices of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: FieldSeries,
    pub obs: FieldSeries,
    pub levels: Vec<usize>,
}

/// Reads and aligns both fields and checks the split and levels against them.
pub fn prepare(spec: &ExperimentSpec) -> Result<Prepared> {
    spec.validate()?;
    let (model, obs) = align_pair(
        &fld::read(&spec.model_field)?,
        &fld::read(&spec.obs_field)?,
        spec.arch.grid,
        spec.arch.mask_rule,
    )?;
    let nt = model.nt();
    let [c, d] = spec.split.test;
    if d > nt {
        return Err(Error::Config(format!("test frames {c}..{d} invalid for {nt} frames")));
    }
    spec.train_config().validate_for(nt)?;
    let nz = model.spec().nz;
    let levels = spec.levels.clone().unwrap_or_else(|| (0..nz).collect());
    if levels.is_empty() || levels.iter().any(|&l| l >= nz) {
        return Err(Error::Config(format!("levels {levels:?} invalid for {nz} levels")));
    }
    Ok(Prepared { model, obs, levels })
}

/// Trains one model per selected level on up to `jobs` threads.
///
/// Each level is independent, so the results do not depend on `jobs`.
pub fn train_levels(
    spec: &ExperimentSpec,
    prepared: &Prepared,
    jobs: usize,
    on_epoch: &(dyn Fn(usize, &EpochStats) + Sync),
) -> Result<Vec<LevelResult>> {
    let levels = &prepared.levels;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<LevelResult>>>> = Mutex::new((0..levels.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, levels.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&level) = levels.get(i) else { break };
                let r = train_level(spec, &prepared.model, &prepared.obs, level, on_epoch);
                slots.lock().expect("no panics while held")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|slot| slot.expect("every level ran"))
        .collect()
}

/// Writes one checkpoint per level plus the manifest.
pub fn save_levels(dir: impl AsRef<Path>, results: &[LevelResult]) -> Result<()> {
    // serialisation failures surface before the first file is written
    for r in results {
        to_bytes(&r.model)?;
    }
    let bank: Vec<(usize, f64, &StuNetModel)> = results.iter().map(|r| (r.level, r.depth_m, &r.model)).collect();
    save_bank(dir, &bank)?;
    Ok(())
}

/// Applies a model bank to frames `frames` of `model_fs`.
///
/// Each model is matched to the level of `model_fs` with the same depth; the
/// output holds the bank's levels in bank order.
pub fn transform_bank(bank: &[(f64, StuNetModel)], model_fs: &FieldSeries, frames: Range<usize>) -> Result<FieldSeries> {
    let depths = &model_fs.spec().depths_m;
    let levels = bank
        .iter()
        .map(|(depth, model)| {
            let z = depths
                .iter()
                .position(|d| d == depth)
                .ok_or_else(|| Error::Misaligned(format!("field has no level at {depth} m")))?;
            transform(model, &model_fs.select_level(z)?, frames.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    FieldSeries::stack_levels(&levels)
}

/// Runs the experiment and writes its outputs into `spec.out_dir`.
///
/// Nothing is written unless every level succeeds.
pub fn run_experiment(
    spec: &ExperimentSpec,
    jobs: usize,
    on_epoch: &(dyn Fn(usize, &EpochStats) + Sync),
) -> Result<ExperimentOutcome> {
    let started = std::time::SystemTime::now();
    let prepared = prepare(spec)?;
    let results = train_levels(spec, &prepared, jobs, on_epoch)?;
    let [c, d] = spec.split.test;
    let bank: Vec<(f64, StuNetModel)> = results.iter().map(|r| (r.depth_m, r.model.clone())).collect();
    let transformed = transform_bank(&bank, &prepared.model, c..d)?;

    let pick = |fs: &FieldSeries| -> Result<FieldSeries> {
        let per: Vec<FieldSeries> = prepared.levels.iter().map(|&l| fs.select_level(l)).collect::<Result<_>>()?;
        FieldSeries::stack_levels(&per)?.slice_time(c..d)
    };
    let (reference, original) = (pick(&prepared.obs)?, pick(&prepared.model)?);
    let report = evaluate(&reference, &original, &transformed, c)?;

    let out = &spec.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_levels(out.join("checkpoints"), &results)?;
    fld::write(&transformed, out.join("transformed.fld"))?;
    write_report(&report, out, &reference)?;
    write_train_log(&out.join("train_log.csv"), &results)?;
    write_run_log(&out.join("run.log"), spec, &results, &report, started)?;

    Ok(ExperimentOutcome {
        levels: results,
        transformed,
        report,
    })
}

#[derive(Serialize)]
struct TrainLogRow {
    level: usize,
    epoch: usize,
    loss: f64,
    rmse: f64,
    lr: f64,
}

pub fn write_train_log(path: &Path, results: &[LevelResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        for e in &r.history.epochs {
            w.serialize(TrainLogRow {
                level: r.level,
                epoch: e.epoch,
                loss: e.loss,
                rmse: e.rmse,
                lr: e.lr,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn unix_seconds(t: std::time::SystemTime) -> u64 {
    t.duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_run_log(
    path: &Path,
    spec: &ExperimentSpec,
    results: &[LevelResult],
    report: &EvalReport,
    started: std::time::SystemTime,
) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "started_unix {}", unix_seconds(started));
    let _ = writeln!(s, "spec {}", serde_json::to_string(spec)?);
    for r in results {
        let _ = writeln!(s, "level {} depth_m {} epochs {} steps {} stopped_early {}", r.level, r.depth_m, r.history.epochs.len(), r.history.steps, r.history.stopped_early);
        for e in &r.history.epochs {
            let _ = writeln!(s, "{},{},{},{},{}", r.level, e.epoch, e.loss, e.rmse, e.lr);
        }
    }
    let g = report.headline_gain();
    let (mm, mt) = report.mean_mse();
    let _ = writeln!(s, "gain_pct {} signed_pct {} mean_mse_model {mm} mean_mse_transformed {mt}", g.gain_pct, g.signed_pct);
    let _ = writeln!(s, "finished_unix {}", unix_seconds(std::time::SystemTime::now()));
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
