//! Skill statistics of a candidate field against a reference field.

mod report;

pub use report::{evaluate, write_report, CcRow, EofSummary, EvalReport, GainRow, MseRow, TaylorRow};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{FieldSeries, GridSpec, NC};

/// Per-frame MSE over valid cells, all levels and both components.
pub fn mse_series(reference: &FieldSeries, cand: &FieldSeries) -> Result<Vec<f64>> {
    mse_series_component(reference, cand, None)
}

/// Per-frame MSE restricted to one component (`Some(0)` = u, `Some(1)` = v).
pub fn mse_series_component(reference: &FieldSeries, cand: &FieldSeries, component: Option<usize>) -> Result<Vec<f64>> {
    reference.check_aligned(cand)?;
    let valid = reference.valid_count();
    if valid == 0 {
        return Err(Error::EmptyMask);
    }
    let comps: Vec<usize> = component.map_or((0..NC).collect(), |c| vec![c]);
    let n = (valid * reference.spec().nz * comps.len()) as f64;
    let mask = reference.mask();
    Ok((0..reference.nt())
        .map(|t| {
            let mut sum = 0.0;
            for z in 0..reference.spec().nz {
                let (a, b) = (reference.level(t, z), cand.level(t, z));
                for (cell, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for &c in &comps {
                        let d = a[cell * NC + c] - b[cell * NC + c];
                        sum += d * d;
                    }
                }
            }
            sum / n
        })
        .collect())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn check_gain_input(mse_model: &[f64], mse_transformed: &[f64]) -> Result<(f64, f64)> {
    if mse_model.is_empty() || mse_model.len() != mse_transformed.len() {
        return Err(Error::ShapeMismatch(format!(
            "gain needs equal non-empty series, got {} and {}",
            mse_model.len(),
            mse_transformed.len()
        )));
    }
    let m_model = mean(mse_model);
    if m_model == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok((m_model, mean(mse_transformed)))
}

/// Correction gain in percent: `|M_transformed - M_model| / M_model * 100`,
/// with `M` the time-mean MSE against the reference.
pub fn gain(mse_model: &[f64], mse_transformed: &[f64]) -> Result<f64> {
    let (mm, mt) = check_gain_input(mse_model, mse_transformed)?;
    Ok((mt - mm).abs() / mm * 100.0)
}

/// Signed relative change of the time-mean MSE in percent; negative is an improvement.
pub fn signed_change(mse_model: &[f64], mse_transformed: &[f64]) -> Result<f64> {
    let (mm, mt) = check_gain_input(mse_model, mse_transformed)?;
    Ok((mt - mm) / mm * 100.0)
}

/// Two-pass Pearson correlation of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::DegenerateVariance(format!(
            "correlation needs two equal samples of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateVariance("constant sample".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn level_component(fs: &FieldSeries, level: usize, component: usize) -> Vec<f64> {
    let mask = fs.mask();
    (0..fs.nt())
        .flat_map(|t| {
            fs.level(t, level)
                .chunks_exact(NC)
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(move |(uv, _)| uv[component])
        })
        .collect()
}

/// Pearson correlation over every (frame, valid cell) pair of one level and component.
pub fn correlation(reference: &FieldSeries, cand: &FieldSeries, level: usize, component: usize) -> Result<f64> {
    reference.check_aligned(cand)?;
    if level >= reference.spec().nz || component >= NC {
        return Err(Error::Config(format!("no level {level} / component {component}")));
    }
    pearson(&level_component(reference, level, component), &level_component(cand, level, component))
}

pub const EOF_TOLERANCE: f64 = 1e-10;
pub const EOF_MAX_ITER: usize = 10_000;

/// Leading EOF of one level, with u and v stacked per cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Eof {
    /// Unit-norm pattern, `[u, v]` for each valid cell in row-major order.
    pub pattern: Vec<f64>,
    pub explained_variance: f64,
    /// Projection of the demeaned frames onto the pattern.
    pub pc: Vec<f64>,
    /// Row-major indices of the valid cells the pattern covers.
    pub cells: Vec<usize>,
}

impl Eof {
    /// Pattern as a one-frame, one-level series on `spec`'s horizontal grid.
    pub fn to_field(&self, spec: &GridSpec, depth_m: f64, mask: &[bool]) -> Result<FieldSeries> {
        let mut spec = spec.clone();
        spec.nz = 1;
        spec.depths_m = vec![depth_m];
        let mut data = vec![0.0; spec.frame_len()];
        for (i, &cell) in self.cells.iter().enumerate() {
            data[cell * NC..cell * NC + NC].copy_from_slice(&self.pattern[i * NC..i * NC + NC]);
        }
        FieldSeries::new(spec, 1, data, mask.to_vec())
    }
}

/// Leading eigenpair of a symmetric positive semidefinite `n x n` matrix.
fn power_iteration(g: &[f64], n: usize) -> Result<(f64, Vec<f64>)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
    let s = norm(&v);
    v.iter_mut().for_each(|x| *x /= s);
    let mut w = vec![0.0; n];
    for _ in 0..EOF_MAX_ITER {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = g[i * n..(i + 1) * n].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let lambda = norm(&w);
        if lambda == 0.0 {
            return Err(Error::DegenerateVariance("zero variance after removing the time mean".into()));
        }
        w.iter_mut().for_each(|x| *x /= lambda);
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        std::mem::swap(&mut v, &mut w);
        if delta <= EOF_TOLERANCE {
            return Ok((lambda, v));
        }
    }
    Err(Error::NonConvergence(EOF_MAX_ITER))
}

/// First EOF mode of `level`, via power iteration on the smaller Gram matrix.
///
/// The pattern sign is fixed so that its largest-magnitude entry is positive.
pub fn eof_mode1(fs: &FieldSeries, level: usize) -> Result<Eof> {
    let nt = fs.nt();
    if nt < 2 {
        return Err(Error::DegenerateVariance("EOF needs at least two frames".into()));
    }
    if level >= fs.spec().nz {
        return Err(Error::Config(format!("no level {level}")));
    }
    let cells: Vec<usize> = (0..fs.mask().len()).filter(|&c| fs.mask()[c]).collect();
    if cells.is_empty() {
        return Err(Error::EmptyMask);
    }
    let p = cells.len() * NC;
    // demeaned data matrix, nt x p
    let mut x = Vec::with_capacity(nt * p);
    for t in 0..nt {
        let l = fs.level(t, level);
        for &cell in &cells {
            x.extend_from_slice(&l[cell * NC..cell * NC + NC]);
        }
    }
    for j in 0..p {
        let m = (0..nt).map(|t| x[t * p + j]).sum::<f64>() / nt as f64;
        (0..nt).for_each(|t| x[t * p + j] -= m);
    }
    let total: f64 = x.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Err(Error::DegenerateVariance("zero variance after removing the time mean".into()));
    }

    let mut pattern = if nt <= p {
        let mut g = vec![0.0; nt * nt];
        for i in 0..nt {
            for j in 0..=i {
                let s: f64 = x[i * p..(i + 1) * p].iter().zip(&x[j * p..(j + 1) * p]).map(|(a, b)| a * b).sum();
                g[i * nt + j] = s;
                g[j * nt + i] = s;
            }
        }
        let (_, a) = power_iteration(&g, nt)?;
        let mut e = vec![0.0; p];
        for t in 0..nt {
            for (ej, xj) in e.iter_mut().zip(&x[t * p..(t + 1) * p]) {
                *ej += a[t] * xj;
            }
        }
        let s = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        e.iter_mut().for_each(|v| *v /= s);
        e
    } else {
        let mut g = vec![0.0; p * p];
        for t in 0..nt {
            let row = &x[t * p..(t + 1) * p];
            for i in 0..p {
                for j in 0..p {
                    g[i * p + j] += row[i] * row[j];
                }
            }
        }
        power_iteration(&g, p)?.1
    };
    let big = pattern
        .iter()
        .copied()
        .fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
    if big < 0.0 {
        pattern.iter_mut().for_each(|v| *v = -*v);
    }
    let pc: Vec<f64> = (0..nt)
        .map(|t| x[t * p..(t + 1) * p].iter().zip(&pattern).map(|(a, b)| a * b).sum())
        .collect();
    let explained = pc.iter().map(|v| v * v).sum::<f64>() / total;
    Ok(Eof {
        pattern,
        explained_variance: explained.clamp(0.0, 1.0),
        pc,
        cells,
    })
}

/// Pearson correlation between two EOF patterns on the same cells.
pub fn pattern_correlation(a: &Eof, b: &Eof) -> Result<f64> {
    if a.cells != b.cells {
        return Err(Error::Misaligned("EOF patterns cover different cells".into()));
    }
    pearson(&a.pattern, &b.pattern)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaylorStats {
    pub std_ref: f64,
    pub std_cand: f64,
    pub cc: f64,
    pub crmse: f64,
}

/// Spatial mean of `sqrt(u^2 + v^2)` over valid cells and levels, per frame.
pub fn mean_speed(fs: &FieldSeries) -> Vec<f64> {
    let n = (fs.valid_count() * fs.spec().nz) as f64;
    (0..fs.nt())
        .map(|t| {
            fs.frame(t)
                .chunks_exact(NC)
                .zip(fs.mask().iter().cycle())
                .filter(|(_, &m)| m)
                .map(|(uv, _)| uv[0].hypot(uv[1]))
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Standard deviations, correlation and centered RMSE of two time series.
pub fn taylor_from_series(r: &[f64], c: &[f64]) -> Result<TaylorStats> {
    let cc = pearson(r, c)?;
    let (mr, mc) = (mean(r), mean(c));
    let n = r.len() as f64;
    let std = |xs: &[f64], m: f64| (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    let crmse = (r
        .iter()
        .zip(c)
        .map(|(a, b)| {
            let d = (a - mr) - (b - mc);
            d * d
        })
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(TaylorStats {
        std_ref: std(r, mr),
        std_cand: std(c, mc),
        cc,
        crmse,
    })
}

/// Taylor statistics of the spatially averaged speed series.
pub fn taylor_stats(reference: &FieldSeries, cand: &FieldSeries) -> Result<TaylorStats> {
    reference.check_aligned(cand)?;
    if reference.valid_count() == 0 {
        return Err(Error::EmptyMask);
    }
    taylor_from_series(&mean_speed(reference), &mean_speed(cand))
}
