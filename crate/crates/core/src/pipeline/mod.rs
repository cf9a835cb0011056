//! Training on the concurrent window and out-of-window inference.
//!
//! Backward mode is implemented as forward mode on time-reversed series, so
//! both directions share one code path and agree bit for bit.

mod experiment;

pub use experiment::{
    align_pair, prepare, run_experiment, save_levels, train_levels, transform_bank, write_train_log, ArchSection,
    ExperimentOutcome, ExperimentSpec, LevelResult, Prepared, Split, TrainSection,
};

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{intersect_masks, reverse_time, FieldSeries, NC};
use crate::nn::{init, mse_loss, sgd_step, AdamState, LrSchedule, OptimizerKind, Tensor};
use crate::stunet::{Direction, NormStats, StuNetModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub minibatch: usize,
    pub max_epochs: usize,
    pub drop_factor: f64,
    pub drop_period: usize,
    /// Stop once the epoch-mean mini-batch RMSE (normalized units) reaches this.
    pub early_stop_rmse: Option<f64>,
    /// Frames per input sample.
    pub window: usize,
    pub direction: Direction,
    pub seed: u64,
    /// Half-open training frame range `[start, end)` in original time order.
    pub train_frames: [usize; 2],
    pub shuffle: bool,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 5e-4,
            minibatch: 4,
            max_epochs: 300,
            drop_factor: 0.1,
            drop_period: 100,
            early_stop_rmse: None,
            window: 1,
            direction: Direction::Forward,
            seed: 42,
            train_frames: [0, 0],
            shuffle: false,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial_rate: self.initial_lr,
            drop_factor: self.drop_factor,
            drop_period_epochs: self.drop_period,
        }
    }

    pub fn train_range(&self) -> Range<usize> {
        self.train_frames[0]..self.train_frames[1]
    }

    /// Checks settings that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.minibatch == 0 || self.max_epochs == 0 || self.window == 0 {
            return Err(Error::Config(
                "minibatch, max_epochs and window must be >= 1".into(),
            ));
        }
        if let Some(r) = self.early_stop_rmse {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("early_stop_rmse {r}")));
            }
        }
        Ok(())
    }

    /// Full validation against a series of `nt` frames.
    pub fn validate_for(&self, nt: usize) -> Result<()> {
        self.validate()?;
        let r = self.train_range();
        if r.is_empty() || r.end > nt {
            return Err(Error::Config(format!(
                "train frames {}..{} invalid for {nt} frames",
                r.start, r.end
            )));
        }
        if self.window > r.len() {
            return Err(Error::WindowExceedsRange {
                window: self.window,
                available: r.len(),
            });
        }
        Ok(())
    }
}

/// Maps a half-open range onto the time-reversed axis of `nt` frames.
pub fn reverse_range(r: Range<usize>, nt: usize) -> Range<usize> {
    nt - r.end..nt - r.start
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    /// `[1, 2k, h, w]`: frames `t-k+1 ..= t`, u then v per frame.
    pub input: Tensor,
    /// `[1, 2, h, w]`: observation at `t`.
    pub target: Tensor,
    /// Frame index `t` in the order the samples were built.
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<SamplePair>,
    /// Cells that count in the loss.
    pub mask: Vec<bool>,
    pub stats: NormStats,
    pub window: usize,
    pub direction: Direction,
}

/// Per-channel mean and population std over `frames` of a one-level series.
fn channel_stats(fs: &FieldSeries, frames: Range<usize>, mask: &[bool]) -> Result<([f64; 2], [f64; 2])> {
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::EmptyMask);
    }
    let n = (valid * frames.len()) as f64;
    let mut mean = [0.0; NC];
    let mut std = [0.0; NC];
    for (c, (mean, std)) in mean.iter_mut().zip(std.iter_mut()).enumerate() {
        let values = || {
            frames.clone().flat_map(move |t| {
                fs.level(t, 0)
                    .chunks_exact(NC)
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(move |(uv, _)| uv[c])
            })
        };
        *mean = values().sum::<f64>() / n;
        let m = *mean;
        *std = (values().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        if std.is_nan() || *std <= 0.0 {
            return Err(Error::DegenerateVariance(format!(
                "channel {c} is constant over the training frames"
            )));
        }
    }
    Ok((mean, std))
}

/// `[1, 2*len, h, w]` normalized planes of `frames` at level 0; masked cells are 0.
fn planes(fs: &FieldSeries, frames: Range<usize>, mask: &[bool], mean: [f64; 2], std: [f64; 2]) -> Tensor {
    let (h, w) = (fs.spec().ny, fs.spec().nx);
    let mut data = vec![0.0; frames.len() * NC * h * w];
    for (i, t) in frames.enumerate() {
        let level = fs.level(t, 0);
        for c in 0..NC {
            let plane = &mut data[(i * NC + c) * h * w..(i * NC + c + 1) * h * w];
            for (cell, v) in plane.iter_mut().enumerate() {
                if mask[cell] {
                    *v = (level[cell * NC + c] - mean[c]) / std[c];
                }
            }
        }
    }
    let len = data.len() / (h * w);
    Tensor::new(vec![1, len, h, w], data).expect("sized above")
}

fn forward_samples(
    model_fs: &FieldSeries,
    obs_fs: &FieldSeries,
    range: Range<usize>,
    window: usize,
) -> Result<SampleSet> {
    let mask = intersect_masks(model_fs.mask(), obs_fs.mask());
    let (input_mean, input_std) = channel_stats(model_fs, range.clone(), &mask)?;
    let (target_mean, target_std) = channel_stats(obs_fs, range.clone(), &mask)?;
    let stats = NormStats {
        input_mean,
        input_std,
        target_mean,
        target_std,
    };
    let samples = (range.start + window - 1..range.end)
        .map(|t| SamplePair {
            input: planes(model_fs, t + 1 - window..t + 1, &mask, input_mean, input_std),
            target: planes(obs_fs, t..t + 1, &mask, target_mean, target_std),
            frame: t,
        })
        .collect();
    Ok(SampleSet {
        samples,
        mask,
        stats,
        window,
        direction: Direction::Forward,
    })
}

/// Builds normalized training pairs for one depth level.
///
/// Samples are chronological in forward mode. In backward mode they are the
/// forward samples of the time-reversed series, so `frame` indexes reversed time.
pub fn make_samples(model_fs: &FieldSeries, obs_fs: &FieldSeries, level: usize, cfg: &TrainConfig) -> Result<SampleSet> {
    let (m, o) = (model_fs.select_level(level)?, obs_fs.select_level(level)?);
    if m.spec().nx != o.spec().nx || m.spec().ny != o.spec().ny || m.nt() != o.nt() {
        return Err(Error::Misaligned(format!(
            "model {}x{}x{} frames vs observations {}x{}x{} frames",
            m.spec().ny,
            m.spec().nx,
            m.nt(),
            o.spec().ny,
            o.spec().nx,
            o.nt()
        )));
    }
    cfg.validate_for(m.nt())?;
    let range = cfg.train_range();
    match cfg.direction {
        Direction::Forward => forward_samples(&m, &o, range, cfg.window),
        Direction::Backward => {
            let nt = m.nt();
            let mut set = forward_samples(&reverse_time(&m), &reverse_time(&o), reverse_range(range, nt), cfg.window)?;
            set.direction = Direction::Backward;
            Ok(set)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub rmse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub stopped_early: bool,
}

pub fn train(model: StuNetModel, set: &SampleSet, cfg: &TrainConfig) -> Result<(StuNetModel, TrainHistory)> {
    train_with(model, set, cfg, |_| {})
}

/// Mini-batch training; `on_epoch` sees every finished epoch.
pub fn train_with(
    mut model: StuNetModel,
    set: &SampleSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(StuNetModel, TrainHistory)> {
    cfg.validate()?;
    let first = set
        .samples
        .first()
        .ok_or_else(|| Error::Config("no training samples".into()))?;
    let [_, c, h, w] = first.input.dims4()?;
    let a = &model.arch;
    if a.in_channels != c || a.input_hw != h || a.input_hw != w {
        return Err(Error::InvalidArch(format!(
            "network takes {} channels at {}x{}, samples have {c} at {h}x{w}",
            a.in_channels, a.input_hw, a.input_hw
        )));
    }
    model.norm_stats = set.stats;
    model.direction = set.direction;

    let schedule = cfg.schedule();
    let mut adam = AdamState::new(
        model
            .params
            .iter()
            .flat_map(|p| [p.weight.shape(), p.bias.shape()]),
    );
    let mut order: Vec<usize> = (0..set.samples.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.max_epochs {
        if cfg.shuffle {
            order.shuffle(&mut init::rng(cfg.seed.wrapping_add(epoch as u64)));
        }
        let lr = schedule.rate_at(epoch);
        let (mut loss_sum, mut rmse_sum, mut batches) = (0.0, 0.0, 0);
        for (step, idx) in order.chunks(cfg.minibatch).enumerate() {
            let x = Tensor::stack(&idx.iter().map(|&i| set.samples[i].input.clone()).collect::<Vec<_>>())?;
            let y = Tensor::stack(&idx.iter().map(|&i| set.samples[i].target.clone()).collect::<Vec<_>>())?;
            let (pred, cache) = model.forward_train(&x)?;
            let (loss, grad) = mse_loss(&pred, &y, &set.mask)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let grads = model.backward(&cache, &grad)?;
            let g: Vec<&Tensor> = grads.iter().flat_map(|g| [&g.weight, &g.bias]).collect();
            let mut p: Vec<&mut Tensor> = model
                .params
                .iter_mut()
                .flat_map(|p| [&mut p.weight, &mut p.bias])
                .collect();
            match cfg.optimizer {
                OptimizerKind::Adam => adam.step(&mut p, &g, lr)?,
                OptimizerKind::Sgd => sgd_step(&mut p, &g, lr)?,
            }
            loss_sum += loss;
            rmse_sum += loss.sqrt();
            batches += 1;
            history.steps += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            rmse: rmse_sum / batches as f64,
            lr,
        };
        model.trained_epochs += 1;
        on_epoch(&stats);
        history.epochs.push(stats);
        if cfg.early_stop_rmse.is_some_and(|r| stats.rmse <= r) {
            history.stopped_early = true;
            break;
        }
    }
    Ok((model, history))
}

/// Frames passed through the network at once during inference.
const INFER_BATCH: usize = 4;

fn transform_forward(model: &StuNetModel, fs: &FieldSeries, frames: Range<usize>) -> Result<FieldSeries> {
    let k = model.arch.in_channels / NC;
    if frames.start + 1 < k {
        return Err(Error::InsufficientHistory {
            frame: frames.start,
            window: k,
        });
    }
    let s = model.norm_stats;
    let mask = fs.mask();
    let (h, w) = (fs.spec().ny, fs.spec().nx);
    let frames: Vec<usize> = frames.collect();
    let mut data = Vec::with_capacity(frames.len() * fs.spec().frame_len());
    for chunk in frames.chunks(INFER_BATCH) {
        let inputs: Vec<Tensor> = chunk
            .iter()
            .map(|&t| planes(fs, t + 1 - k..t + 1, mask, s.input_mean, s.input_std))
            .collect();
        let y = model.forward(&Tensor::stack(&inputs)?)?;
        for item in y.data().chunks(NC * h * w) {
            for cell in 0..h * w {
                for c in 0..NC {
                    let v = if mask[cell] {
                        item[c * h * w + cell] * s.target_std[c] + s.target_mean[c]
                    } else {
                        0.0
                    };
                    data.push(v);
                }
            }
        }
    }
    let mut spec = fs.spec().clone();
    spec.t0 += frames.first().copied().unwrap_or(0) as i64;
    FieldSeries::new(spec, frames.len(), data, mask.to_vec())
}

/// Applies `model` to frames `frames` of a one-level model series.
///
/// Only the numerical-model field is read. A backward model takes its window
/// from the frames after `t`, mirroring how it was trained.
pub fn transform(model: &StuNetModel, model_fs: &FieldSeries, frames: Range<usize>) -> Result<FieldSeries> {
    model.validate()?;
    if model_fs.spec().nz != 1 {
        return Err(Error::ShapeMismatch(format!(
            "transform takes one level, got {}",
            model_fs.spec().nz
        )));
    }
    let nt = model_fs.nt();
    if frames.is_empty() || frames.end > nt {
        return Err(Error::Config(format!(
            "frames {}..{} invalid for {nt} frames",
            frames.start, frames.end
        )));
    }
    match model.direction {
        Direction::Forward => transform_forward(model, model_fs, frames),
        Direction::Backward => {
            let out = transform_forward(model, &reverse_time(model_fs), reverse_range(frames.clone(), nt))
                .map_err(|e| match e {
                    Error::InsufficientHistory { window, .. } => Error::InsufficientHistory {
                        frame: frames.end - 1,
                        window,
                    },
                    e => e,
                })?;
            let mut out = reverse_time(&out);
            let (mut spec, n, data, mask) = out.into_parts();
            spec.t0 = model_fs.spec().t0 + frames.start as i64;
            out = FieldSeries::new(spec, n, data, mask)?;
            Ok(out)
        }
    }
}
