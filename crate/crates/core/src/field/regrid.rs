//! Separable Keys cubic-convolution regridding.
//!
//! Source and destination grids share their corner nodes: destination index
//! `j` maps to source coordinate `j * (n_src - 1) / (n_dst - 1)`. Support
//! samples that fall one cell outside the source grid are replaced by Keys'
//! cubic boundary extrapolation `f[-1] = 3 f[0] - 3 f[1] + f[2]`, folded
//! into the weights of the in-range cells.

use super::{FieldSeries, GridSpec, NC};
use crate::error::{Error, Result};

/// Cubic convolution parameter.
pub const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel evaluated at offset `s` (cell units).
pub fn keys_kernel(s: f64, a: f64) -> f64 {
    let s = s.abs();
    if s <= 1.0 {
        (a + 2.0) * s * s * s - (a + 3.0) * s * s + 1.0
    } else if s < 2.0 {
        a * s * s * s - 5.0 * a * s * s + 8.0 * a * s - 4.0 * a
    } else {
        0.0
    }
}

/// Which destination cells are kept valid after regridding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRule {
    /// Valid only if every source cell with a nonzero weight is valid.
    #[default]
    AllSupport,
    /// Valid if the nearest source cell is valid.
    Nearest,
}

/// Per-destination-index taps along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisWeights {
    /// `(source index, weight)` pairs with nonzero weight, ascending index.
    pub taps: Vec<Vec<(usize, f64)>>,
    /// Nearest source index per destination index.
    pub nearest: Vec<usize>,
}

impl AxisWeights {
    pub fn new(n_src: usize, n_dst: usize, a: f64) -> Self {
        let mut taps = Vec::with_capacity(n_dst);
        let mut nearest = Vec::with_capacity(n_dst);
        for j in 0..n_dst {
            let x = if n_dst == 1 {
                0.0
            } else {
                (j as f64) * ((n_src - 1) as f64) / ((n_dst - 1) as f64)
            };
            let i = (x.floor() as usize).min(n_src - 2);
            let t = x - i as f64;
            let mut acc = vec![0.0; n_src];
            for (k, s) in [(-1i64, t + 1.0), (0, t), (1, 1.0 - t), (2, 2.0 - t)] {
                let w = keys_kernel(s, a);
                if w == 0.0 {
                    continue;
                }
                let idx = i as i64 + k;
                if idx < 0 {
                    acc[0] += 3.0 * w;
                    acc[1] -= 3.0 * w;
                    acc[2] += w;
                } else if idx as usize >= n_src {
                    let n = n_src;
                    acc[n - 1] += 3.0 * w;
                    acc[n - 2] -= 3.0 * w;
                    acc[n - 3] += w;
                } else {
                    acc[idx as usize] += w;
                }
            }
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(n_src - 1);
            taps.push(
                (lo..=hi)
                    .filter(|&k| acc[k] != 0.0)
                    .map(|k| (k, acc[k]))
                    .collect(),
            );
            nearest.push((x.round() as usize).min(n_src - 1));
        }
        AxisWeights { taps, nearest }
    }
}

/// Precomputed mapping from one grid to another.
#[derive(Debug, Clone)]
pub struct ResamplePlan {
    pub src_spec: GridSpec,
    pub dst_spec: GridSpec,
    pub x_weights: AxisWeights,
    pub y_weights: AxisWeights,
    /// Per destination level: `(lower index, upper index, lower weight, upper weight)`.
    pub vertical_map: Vec<(usize, usize, f64, f64)>,
    /// Source frames averaged into one destination frame.
    pub temporal_stride: usize,
    pub mask_rule: MaskRule,
}

impl ResamplePlan {
    pub fn new(src_spec: &GridSpec, dst_spec: &GridSpec, mask_rule: MaskRule) -> Result<Self> {
        src_spec.validate()?;
        dst_spec.validate()?;
        let vertical_map = super::align::vertical_map(&src_spec.depths_m, &dst_spec.depths_m)?;
        let temporal_stride = super::align::block_len(src_spec.dt_hours, dst_spec.dt_hours)?;
        Ok(ResamplePlan {
            src_spec: src_spec.clone(),
            dst_spec: dst_spec.clone(),
            x_weights: AxisWeights::new(src_spec.nx, dst_spec.nx, KEYS_A),
            y_weights: AxisWeights::new(src_spec.ny, dst_spec.ny, KEYS_A),
            vertical_map,
            temporal_stride,
            mask_rule,
        })
    }

    /// The (up to) 16 `(y, x, weight)` source contributions of one destination cell.
    pub fn cell_weights(&self, dy: usize, dx: usize) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(16);
        for &(sy, wy) in &self.y_weights.taps[dy] {
            for &(sx, wx) in &self.x_weights.taps[dx] {
                out.push((sy, sx, wy * wx));
            }
        }
        out
    }

    /// Horizontal, then vertical, then temporal resampling.
    pub fn apply(&self, src: &FieldSeries) -> Result<FieldSeries> {
        let h = horizontal(src, &self.x_weights, &self.y_weights, self.mask_rule)?;
        let v = super::align_vertical(&h, &self.dst_spec.depths_m)?;
        super::align_temporal(&v, self.dst_spec.dt_hours)
    }
}

/// Bicubic horizontal regrid with the default [`MaskRule::AllSupport`].
pub fn regrid_horizontal(src: &FieldSeries, dst_nx: usize, dst_ny: usize) -> Result<FieldSeries> {
    regrid_horizontal_with(src, dst_nx, dst_ny, MaskRule::AllSupport)
}

pub fn regrid_horizontal_with(
    src: &FieldSeries,
    dst_nx: usize,
    dst_ny: usize,
    rule: MaskRule,
) -> Result<FieldSeries> {
    let s = src.spec();
    if s.nx < 4 || s.ny < 4 {
        return Err(Error::GridTooSmall { nx: s.nx, ny: s.ny });
    }
    if dst_nx < 4 || dst_ny < 4 {
        return Err(Error::GridTooSmall {
            nx: dst_nx,
            ny: dst_ny,
        });
    }
    let xw = AxisWeights::new(s.nx, dst_nx, KEYS_A);
    let yw = AxisWeights::new(s.ny, dst_ny, KEYS_A);
    horizontal(src, &xw, &yw, rule)
}

fn horizontal(
    src: &FieldSeries,
    xw: &AxisWeights,
    yw: &AxisWeights,
    rule: MaskRule,
) -> Result<FieldSeries> {
    let s = src.spec();
    let (snx, sny) = (s.nx, s.ny);
    let (dnx, dny) = (xw.taps.len(), yw.taps.len());
    let src_mask = src.mask();

    let mut mask = vec![false; dnx * dny];
    for dy in 0..dny {
        for dx in 0..dnx {
            mask[dy * dnx + dx] = match rule {
                MaskRule::AllSupport => yw.taps[dy].iter().all(|&(sy, _)| {
                    xw.taps[dx].iter().all(|&(sx, _)| src_mask[sy * snx + sx])
                }),
                MaskRule::Nearest => src_mask[yw.nearest[dy] * snx + xw.nearest[dx]],
            };
        }
    }

    let mut spec = s.clone();
    spec.nx = dnx;
    spec.ny = dny;
    let planes = src.nt() * s.nz;
    let mut data = vec![0.0; planes * dny * dnx * NC];
    let mut rows = vec![0.0; sny * dnx];
    let src_data = src.data();
    for p in 0..planes {
        let plane = &src_data[p * sny * snx * NC..(p + 1) * sny * snx * NC];
        let out = &mut data[p * dny * dnx * NC..(p + 1) * dny * dnx * NC];
        for c in 0..NC {
            for sy in 0..sny {
                for dx in 0..dnx {
                    let mut acc = 0.0;
                    for &(sx, w) in &xw.taps[dx] {
                        acc += w * plane[(sy * snx + sx) * NC + c];
                    }
                    rows[sy * dnx + dx] = acc;
                }
            }
            for dy in 0..dny {
                for dx in 0..dnx {
                    if !mask[dy * dnx + dx] {
                        continue;
                    }
                    let mut acc = 0.0;
                    for &(sy, w) in &yw.taps[dy] {
                        acc += w * rows[sy * dnx + dx];
                    }
                    out[(dy * dnx + dx) * NC + c] = acc;
                }
            }
        }
    }
    FieldSeries::new(spec, src.nt(), data, mask)
}
