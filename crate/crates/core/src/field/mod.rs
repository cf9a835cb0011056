//! Gridded velocity field series and the operations that put two series on
//! a common grid: bicubic horizontal regridding, linear vertical
//! interpolation, block-mean temporal downsampling and time reversal.
//!
//! Data is stored as a row-major `[t, z, y, x, c]` array with two channels
//! (`u` zonal, `v` meridional) in m/s, plus a `[y, x]` water mask. Cells
//! outside the mask always hold exactly zero.

mod align;
pub mod fld;
mod regrid;

pub use align::{align_temporal, align_vertical, reverse_time};
pub use regrid::{keys_kernel, regrid_horizontal, regrid_horizontal_with, AxisWeights, MaskRule, ResamplePlan, KEYS_A};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of velocity channels (u, v).
pub const NC: usize = 2;

/// Grid geometry shared by every frame of a series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub depths_m: Vec<f64>,
    pub dt_hours: f64,
    pub t0: i64,
}

impl GridSpec {
    /// Uniformly spaced levels starting at the surface.
    pub fn uniform(nx: usize, ny: usize, nz: usize, dz_m: f64, dt_hours: f64) -> Self {
        GridSpec {
            nx,
            ny,
            nz,
            depths_m: (0..nz).map(|k| k as f64 * dz_m).collect(),
            dt_hours,
            t0: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 4 || self.ny < 4 {
            return Err(Error::GridTooSmall {
                nx: self.nx,
                ny: self.ny,
            });
        }
        if self.nz == 0 || self.depths_m.len() != self.nz {
            return Err(Error::InvalidGrid(format!(
                "nz = {} but {} depths given",
                self.nz,
                self.depths_m.len()
            )));
        }
        if self.depths_m.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidGrid("depths must be finite and >= 0".into()));
        }
        if self.depths_m.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("depths must be strictly increasing".into()));
        }
        if !(self.dt_hours > 0.0 && self.dt_hours.is_finite()) {
            return Err(Error::InvalidGrid(format!("dt_hours = {}", self.dt_hours)));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Values in one frame: nz * ny * nx * 2.
    pub fn frame_len(&self) -> usize {
        self.nz * self.ny * self.nx * NC
    }

    pub fn level_len(&self) -> usize {
        self.ny * self.nx * NC
    }
}

/// Velocity field time series on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    spec: GridSpec,
    nt: usize,
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl FieldSeries {
    /// Builds a series, zeroing every masked-out cell.
    ///
    /// Fails if lengths disagree with the grid, if `nt == 0`, or if a valid
    /// cell holds a non-finite value.
    pub fn new(spec: GridSpec, nt: usize, mut data: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        spec.validate()?;
        if nt == 0 {
            return Err(Error::ShapeMismatch("series needs at least one frame".into()));
        }
        if mask.len() != spec.cells() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} cells, grid has {}",
                mask.len(),
                spec.cells()
            )));
        }
        if data.len() != nt * spec.frame_len() {
            return Err(Error::ShapeMismatch(format!(
                "data has {} values, expected {}",
                data.len(),
                nt * spec.frame_len()
            )));
        }
        let cells = spec.cells();
        for (plane_idx, plane) in data.chunks_mut(cells * NC).enumerate() {
            for (cell, pair) in plane.chunks_mut(NC).enumerate() {
                if mask[cell] {
                    if pair.iter().any(|v| !v.is_finite()) {
                        return Err(Error::ShapeMismatch(format!(
                            "non-finite value at valid cell {cell} of plane {plane_idx}"
                        )));
                    }
                } else {
                    pair.fill(0.0);
                }
            }
        }
        Ok(FieldSeries {
            spec,
            nt,
            data,
            mask,
        })
    }

    /// All-zero series with every cell valid.
    pub fn zeros(spec: GridSpec, nt: usize) -> Result<Self> {
        let n = nt * spec.frame_len();
        let cells = spec.cells();
        FieldSeries::new(spec, nt, vec![0.0; n], vec![true; cells])
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Flat index of `(t, z, y, x, c)`.
    #[inline]
    pub fn index(&self, t: usize, z: usize, y: usize, x: usize, c: usize) -> usize {
        let s = &self.spec;
        (((t * s.nz + z) * s.ny + y) * s.nx + x) * NC + c
    }

    #[inline]
    pub fn get(&self, t: usize, z: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(t, z, y, x, c)]
    }

    /// One `[y, x, c]` plane.
    pub fn level(&self, t: usize, z: usize) -> &[f64] {
        let len = self.spec.level_len();
        let start = (t * self.spec.nz + z) * len;
        &self.data[start..start + len]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let len = self.spec.frame_len();
        &self.data[t * len..(t + 1) * len]
    }

    pub fn into_parts(self) -> (GridSpec, usize, Vec<f64>, Vec<bool>) {
        (self.spec, self.nt, self.data, self.mask)
    }

    /// Frames `range` as a new series; `t0` moves to the first kept frame.
    pub fn slice_time(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.nt {
            return Err(Error::Config(format!(
                "frame range {}..{} invalid for {} frames",
                range.start, range.end, self.nt
            )));
        }
        let len = self.spec.frame_len();
        let data = self.data[range.start * len..range.end * len].to_vec();
        let mut spec = self.spec.clone();
        spec.t0 += range.start as i64;
        Ok(FieldSeries {
            spec,
            nt: range.len(),
            data,
            mask: self.mask.clone(),
        })
    }

    /// Single level `z` as a one-level series.
    pub fn select_level(&self, z: usize) -> Result<Self> {
        if z >= self.spec.nz {
            return Err(Error::Config(format!(
                "level {z} out of range (nz = {})",
                self.spec.nz
            )));
        }
        let mut spec = self.spec.clone();
        spec.nz = 1;
        spec.depths_m = vec![self.spec.depths_m[z]];
        let mut data = Vec::with_capacity(self.nt * spec.frame_len());
        for t in 0..self.nt {
            data.extend_from_slice(self.level(t, z));
        }
        Ok(FieldSeries {
            spec,
            nt: self.nt,
            data,
            mask: self.mask.clone(),
        })
    }

    /// Stacks one-level series (same nt, same horizontal grid) into levels.
    pub fn stack_levels(levels: &[FieldSeries]) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::ShapeMismatch("no levels to stack".into()))?;
        let nt = first.nt;
        let mut spec = first.spec.clone();
        spec.nz = 0;
        spec.depths_m.clear();
        for l in levels {
            if l.nt != nt || l.spec.nx != spec.nx || l.spec.ny != spec.ny || l.mask != first.mask {
                return Err(Error::Misaligned("levels differ in shape or mask".into()));
            }
            spec.nz += l.spec.nz;
            spec.depths_m.extend_from_slice(&l.spec.depths_m);
        }
        let mut data = Vec::with_capacity(nt * spec.frame_len());
        for t in 0..nt {
            for l in levels {
                data.extend_from_slice(l.frame(t));
            }
        }
        FieldSeries::new(spec, nt, data, first.mask.clone())
    }

    /// Same grid and mask, new values (masked cells re-zeroed).
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        FieldSeries::new(self.spec.clone(), self.nt, data, self.mask.clone())
    }

    /// Same data with a new mask; newly invalid cells are zeroed.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        FieldSeries::new(self.spec.clone(), self.nt, self.data.clone(), mask)
    }

    /// Checks that two series share grid geometry, frame count and mask.
    pub fn check_aligned(&self, other: &FieldSeries) -> Result<()> {
        let (a, b) = (&self.spec, &other.spec);
        if a.nx != b.nx || a.ny != b.ny || a.nz != b.nz {
            return Err(Error::Misaligned(format!(
                "grids {}x{}x{} vs {}x{}x{}",
                a.nz, a.ny, a.nx, b.nz, b.ny, b.nx
            )));
        }
        if a.depths_m != b.depths_m {
            return Err(Error::Misaligned("depth levels differ".into()));
        }
        if self.nt != other.nt {
            return Err(Error::Misaligned(format!(
                "frame counts {} vs {}",
                self.nt, other.nt
            )));
        }
        if self.mask != other.mask {
            return Err(Error::Misaligned("masks differ".into()));
        }
        Ok(())
    }
}

/// Elementwise AND of two masks.
pub fn intersect_masks(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(&p, &q)| p && q).collect()
}
