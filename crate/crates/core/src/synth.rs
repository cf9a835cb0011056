//! Paired synthetic flows for twin experiments: an analytic "truth" and a
//! systematically biased "model" version of it.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{keys_kernel, FieldSeries, GridSpec, KEYS_A, NC};
use crate::metrics::{gain, mse_series};
use crate::nn::init;
use crate::pipeline::{ArchSection, ExperimentSpec, Split, TrainSection};
use crate::stunet::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Steady double gyre plus an oscillating, pulsing Gaussian vortex.
    #[default]
    GyreVortex,
    /// Periodically forced double gyre.
    DoubleGyre,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSpec {
    /// Eastward displacement of the model flow, in cells.
    pub phase_shift_cells: f64,
    pub amplitude_factor: f64,
    /// Standard deviation of the additive noise, m/s.
    pub smooth_noise_sigma: f64,
    /// Gaussian filter width of the noise, in cells.
    pub noise_corr_len: f64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        BiasSpec {
            phase_shift_cells: 2.0,
            amplitude_factor: 0.7,
            smooth_noise_sigma: 0.03,
            noise_corr_len: 2.0,
        }
    }
}

impl BiasSpec {
    pub fn none() -> Self {
        BiasSpec {
            phase_shift_cells: 0.0,
            amplitude_factor: 1.0,
            smooth_noise_sigma: 0.0,
            noise_corr_len: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub scenario: Scenario,
    pub nt: usize,
    pub nz: usize,
    pub ny: usize,
    pub nx: usize,
    pub bias: BiasSpec,
    pub seed: u64,
    pub depth_decay_scale_m: f64,
    pub dz_m: f64,
    pub dt_hours: f64,
    /// Peak surface speed scale, m/s.
    pub velocity_scale: f64,
    /// Frames per vortex oscillation.
    pub period_frames: f64,
    /// Land along a wavy northern coast.
    pub coastline: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            scenario: Scenario::GyreVortex,
            nt: 350,
            nz: 1,
            ny: 32,
            nx: 32,
            bias: BiasSpec::default(),
            seed: 42,
            depth_decay_scale_m: 200.0,
            dz_m: 20.0,
            dt_hours: 24.0,
            velocity_scale: 1.0,
            period_frames: 25.0,
            coastline: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let b = &self.bias;
        let bad = |msg: &str| Err(Error::Config(format!("synth: {msg}")));
        if self.nx < 16 || self.ny < 16 {
            return bad("nx and ny must be >= 16");
        }
        if self.nt == 0 || self.nz == 0 {
            return bad("nt and nz must be >= 1");
        }
        if !(b.amplitude_factor > 0.0 && b.amplitude_factor.is_finite()) {
            return bad("amplitude_factor must be > 0");
        }
        if !(b.smooth_noise_sigma >= 0.0 && b.noise_corr_len >= 0.0 && b.phase_shift_cells.is_finite()) {
            return bad("noise parameters must be >= 0");
        }
        if !(self.depth_decay_scale_m > 0.0 && self.dz_m > 0.0 && self.dt_hours > 0.0 && self.period_frames > 0.0) {
            return bad("depth scale, dz, dt and period must be > 0");
        }
        if !(self.velocity_scale > 0.0 && self.velocity_scale.is_finite()) {
            return bad("velocity_scale must be > 0");
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::uniform(self.nx, self.ny, self.nz, self.dz_m, self.dt_hours)
    }
}

/// Synthetic land mask: a wavy northern coast, true = water.
pub fn coastline_mask(nx: usize, ny: usize) -> Vec<bool> {
    let mut mask = vec![true; nx * ny];
    for x in 0..nx {
        let edge = ny as f64 * (0.85 + 0.07 * (2.0 * PI * x as f64 / nx as f64).sin());
        for y in 0..ny {
            if y as f64 >= edge {
                mask[y * nx + x] = false;
            }
        }
    }
    mask
}

/// Nondimensional streamfunction at cell coordinates `(x, y)` and frame `t`.
fn streamfunction(s: &SynthSpec, x: f64, y: f64, t: f64) -> f64 {
    let (lx, ly) = (s.nx as f64, s.ny as f64);
    let phase = 2.0 * PI * t / s.period_frames;
    match s.scenario {
        Scenario::GyreVortex => {
            let gyre = 0.6 * (PI * x / lx).sin() * (2.0 * PI * y / ly).sin();
            let r = 0.12 * lx;
            let xc = 0.5 * lx + 0.5 * r * phase.sin();
            let yc = 0.4 * ly + 0.15 * r * (0.5 * phase).cos();
            let amp = 1.0 + 0.15 * (phase / 3.0).sin();
            let d2 = (x - xc).powi(2) + (y - yc).powi(2);
            gyre + amp * (-d2 / (2.0 * r * r)).exp()
        }
        Scenario::DoubleGyre => {
            let eps = 0.25;
            let xs = 2.0 * x / lx;
            let f = eps * phase.sin() * xs * xs + (1.0 - 2.0 * eps * phase.sin()) * xs;
            (PI * f).sin() * (PI * y / ly).sin()
        }
    }
}

/// Analytic, discretely divergence-free truth flow.
///
/// `u = -dpsi/dy`, `v = dpsi/dx` by centered differences of the
/// streamfunction sampled one cell beyond the grid.
pub fn truth(spec: &SynthSpec) -> Result<FieldSeries> {
    spec.validate()?;
    let grid = spec.grid();
    let (nx, ny) = (spec.nx, spec.ny);
    // peak speed of the nondimensional flow scales with 1/length
    let scale = spec.velocity_scale * 0.12 * nx as f64;
    let mut data = Vec::with_capacity(spec.nt * grid.frame_len());
    let mut psi = vec![0.0; (nx + 2) * (ny + 2)];
    for t in 0..spec.nt {
        for j in 0..ny + 2 {
            for i in 0..nx + 2 {
                psi[j * (nx + 2) + i] = streamfunction(spec, i as f64 - 1.0, j as f64 - 1.0, t as f64);
            }
        }
        for &depth in &grid.depths_m {
            let a = scale * (-depth / spec.depth_decay_scale_m).exp();
            for y in 0..ny {
                for x in 0..nx {
                    let p = |dx: usize, dy: usize| psi[(y + dy) * (nx + 2) + x + dx];
                    data.push(-a * (p(1, 2) - p(1, 0)) / 2.0);
                    data.push(a * (p(2, 1) - p(0, 1)) / 2.0);
                }
            }
        }
    }
    let mask = if spec.coastline { coastline_mask(nx, ny) } else { vec![true; nx * ny] };
    FieldSeries::new(grid, spec.nt, data, mask)
}

/// Shifts every row east by `cells` using Keys cubic interpolation with
/// clamped borders: `out(x) = in(x - cells)`.
pub fn phase_shift(fs: &FieldSeries, cells: f64) -> Result<FieldSeries> {
    if cells == 0.0 {
        return Ok(fs.clone());
    }
    let nx = fs.spec().nx;
    let base = cells.floor();
    let frac = cells - base;
    // out(x) = sum_k in(x - base - 1 + k) * K(frac + 1 - k), k = 0..4
    let taps: Vec<(isize, f64)> = (0..4)
        .map(|k| (k as isize - 1 - base as isize, keys_kernel(frac + 1.0 - k as f64, KEYS_A)))
        .filter(|&(_, w)| w != 0.0)
        .collect();
    let mut data = vec![0.0; fs.data().len()];
    for (row_out, row_in) in data.chunks_mut(nx * NC).zip(fs.data().chunks(nx * NC)) {
        for x in 0..nx {
            for c in 0..NC {
                row_out[x * NC + c] = taps
                    .iter()
                    .map(|&(off, w)| {
                        let sx = (x as isize + off).clamp(0, nx as isize - 1) as usize;
                        w * row_in[sx * NC + c]
                    })
                    .sum();
            }
        }
    }
    fs.with_data(data)
}

pub fn scale(fs: &FieldSeries, factor: f64) -> Result<FieldSeries> {
    fs.with_data(fs.data().iter().map(|v| v * factor).collect())
}

fn gaussian_weights(len: f64) -> Vec<f64> {
    if len == 0.0 {
        return vec![1.0];
    }
    let half = (3.0 * len).ceil() as isize;
    let w: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * len * len)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn blur_axis(src: &[f64], n_outer: usize, n: usize, stride: usize, w: &[f64]) -> Vec<f64> {
    let half = (w.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for o in 0..n_outer {
        for s in 0..stride {
            for i in 0..n {
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    let j = (i as isize + k as isize - half).clamp(0, n as isize - 1) as usize;
                    acc += wk * src[(o * n + j) * stride + s];
                }
                out[(o * n + i) * stride + s] = acc;
            }
        }
    }
    out
}

/// Gaussian-filtered white noise with standard deviation `sigma`.
///
/// Each frame draws from its own seeded substream, so frames are independent
/// of how many precede them.
pub fn smooth_noise(grid: &GridSpec, nt: usize, sigma: f64, corr_len: f64, seed: u64) -> Vec<f64> {
    let len = grid.frame_len();
    let mut out = Vec::with_capacity(nt * len);
    if sigma == 0.0 {
        out.resize(nt * len, 0.0);
        return out;
    }
    let w = gaussian_weights(corr_len);
    // restores unit variance away from the borders
    let gain = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    let (nx, ny, nz) = (grid.nx, grid.ny, grid.nz);
    for t in 0..nt {
        let mut rng = init::rng(seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        // layout [z, y, x, c]: filter along x (stride NC) then y (stride nx*NC)
        let bx = blur_axis(&white, nz * ny, nx, NC, &w);
        let bxy = blur_axis(&bx, nz, ny, nx * NC, &w);
        out.extend(bxy.iter().map(|v| v * sigma * gain));
    }
    out
}

/// Truth and biased model flow: `scale(phase_shift(truth)) + noise`, masked.
pub fn generate(spec: &SynthSpec) -> Result<(FieldSeries, FieldSeries)> {
    let truth = truth(spec)?;
    let b = &spec.bias;
    let shifted = scale(&phase_shift(&truth, b.phase_shift_cells)?, b.amplitude_factor)?;
    if b.smooth_noise_sigma == 0.0 {
        return Ok((truth, shifted));
    }
    let noise = smooth_noise(truth.spec(), spec.nt, b.smooth_noise_sigma, b.noise_corr_len, spec.seed);
    let data = shifted.data().iter().zip(&noise).map(|(a, n)| a + n).collect();
    let biased = shifted.with_data(data)?;
    Ok((truth, biased))
}

/// Gain brackets for a split: transformed := biased scores 0 %, transformed := truth 100 %.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceGain {
    pub persistence_gain_pct: f64,
    pub oracle_gain_pct: f64,
    /// Time-mean MSE of the biased field against truth over the test frames.
    pub mean_mse_biased: f64,
}

pub fn reference_gain(spec: &SynthSpec, test: Range<usize>) -> Result<ReferenceGain> {
    let (truth, biased) = generate(spec)?;
    let (t, b) = (truth.slice_time(test.clone())?, biased.slice_time(test)?);
    let baseline = mse_series(&t, &b)?;
    let oracle = mse_series(&t, &t)?;
    Ok(ReferenceGain {
        persistence_gain_pct: gain(&baseline, &baseline)?,
        oracle_gain_pct: gain(&baseline, &oracle)?,
        mean_mse_biased: baseline.iter().sum::<f64>() / baseline.len() as f64,
    })
}

/// Training frames of the default twin experiment.
pub const TWIN_TRAIN: [usize; 2] = [0, 300];
/// Held-out frames of the default twin experiment.
pub const TWIN_TEST: [usize; 2] = [300, 350];
/// Epochs of the default twin experiment.
pub const TWIN_MAX_EPOCHS: usize = 30;
/// Held-out joint gain of the pilot run of the default twin experiment.
pub const TWIN_PILOT_GAIN_PCT: f64 = 95.02;
/// Frozen acceptance threshold: 80 % of the pilot gain.
pub const TWIN_GAIN_THRESHOLD_PCT: f64 = 0.8 * TWIN_PILOT_GAIN_PCT;

/// Experiment spec for the default twin run on the pair written by
/// [`write_pair`] into `dir`, with outputs under `dir/out`.
pub fn twin_experiment(spec: &SynthSpec, dir: impl AsRef<Path>) -> ExperimentSpec {
    let dir = dir.as_ref();
    ExperimentSpec {
        model_field: dir.join("model.fld"),
        obs_field: dir.join("truth.fld"),
        direction: Direction::Forward,
        window: 1,
        split: Split {
            train: TWIN_TRAIN,
            test: TWIN_TEST,
        },
        levels: None,
        arch: ArchSection {
            base_channels: 16,
            grid: spec.nx.max(spec.ny),
            ..ArchSection::default()
        },
        train: TrainSection {
            max_epochs: TWIN_MAX_EPOCHS,
            seed: spec.seed,
            ..TrainSection::default()
        },
        out_dir: dir.join("out"),
    }
}

/// Writes `truth.fld` and `model.fld` into `dir`.
pub fn write_pair(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<(FieldSeries, FieldSeries)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (truth, biased) = generate(spec)?;
    crate::field::fld::write(&truth, dir.join("truth.fld"))?;
    crate::field::fld::write(&biased, dir.join("model.fld"))?;
    Ok((truth, biased))
}
