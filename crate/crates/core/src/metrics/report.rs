use std::path::Path;

use serde::Serialize;

use super::{correlation, eof_mode1, gain, mse_series, mse_series_component, pattern_correlation, signed_change, taylor_stats, Eof};
use crate::error::{Error, Result};
use crate::field::{fld, FieldSeries};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseRow {
    pub frame_index: usize,
    pub mse_model: f64,
    pub mse_transformed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcRow {
    pub depth_m: f64,
    pub component: &'static str,
    pub cc_model: f64,
    pub cc_transformed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainRow {
    pub depth_m: f64,
    /// `u`, `v`, or `uv` for both components jointly.
    pub component: &'static str,
    pub gain_pct: f64,
    pub signed_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorRow {
    pub depth_m: f64,
    pub candidate: &'static str,
    pub std_ref: f64,
    pub std_cand: f64,
    pub cc: f64,
    pub crmse: f64,
}

/// Mode-1 EOFs of the first evaluated level.
#[derive(Debug, Clone, PartialEq)]
pub struct EofSummary {
    pub depth_m: f64,
    pub reference: Eof,
    pub model: Eof,
    pub transformed: Eof,
    pub pattern_cc_model: f64,
    pub pattern_cc_transformed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mse: Vec<MseRow>,
    pub cc: Vec<CcRow>,
    pub gain: Vec<GainRow>,
    pub taylor: Vec<TaylorRow>,
    pub eof: EofSummary,
}

impl EvalReport {
    /// Joint (u, v) gain of the first level.
    pub fn headline_gain(&self) -> &GainRow {
        self.gain
            .iter()
            .find(|g| g.component == "uv")
            .expect("every report has a joint row")
    }

    pub fn mean_mse(&self) -> (f64, f64) {
        let n = self.mse.len() as f64;
        (
            self.mse.iter().map(|r| r.mse_model).sum::<f64>() / n,
            self.mse.iter().map(|r| r.mse_transformed).sum::<f64>() / n,
        )
    }
}

const COMPONENTS: [&str; 2] = ["u", "v"];

/// Scores the original model field and the transformed field against the
/// reference over the same frames. `first_frame` labels the MSE rows.
pub fn evaluate(reference: &FieldSeries, model: &FieldSeries, transformed: &FieldSeries, first_frame: usize) -> Result<EvalReport> {
    reference.check_aligned(model)?;
    reference.check_aligned(transformed)?;
    let mm = mse_series(reference, model)?;
    let mt = mse_series(reference, transformed)?;
    let mse = mm
        .iter()
        .zip(&mt)
        .enumerate()
        .map(|(i, (&a, &b))| MseRow {
            frame_index: first_frame + i,
            mse_model: a,
            mse_transformed: b,
        })
        .collect();

    let mut cc = Vec::new();
    let mut gains = Vec::new();
    let mut taylor = Vec::new();
    for (z, &depth_m) in reference.spec().depths_m.iter().enumerate() {
        let (r, m, t) = (reference.select_level(z)?, model.select_level(z)?, transformed.select_level(z)?);
        for (c, name) in COMPONENTS.iter().enumerate() {
            cc.push(CcRow {
                depth_m,
                component: name,
                cc_model: correlation(&r, &m, 0, c)?,
                cc_transformed: correlation(&r, &t, 0, c)?,
            });
        }
        for (component, name) in [(Some(0), "u"), (Some(1), "v"), (None, "uv")] {
            let a = mse_series_component(&r, &m, component)?;
            let b = mse_series_component(&r, &t, component)?;
            gains.push(GainRow {
                depth_m,
                component: name,
                gain_pct: gain(&a, &b)?,
                signed_pct: signed_change(&a, &b)?,
            });
        }
        for (cand, name) in [(&m, "model"), (&t, "transformed")] {
            let s = taylor_stats(&r, cand)?;
            taylor.push(TaylorRow {
                depth_m,
                candidate: name,
                std_ref: s.std_ref,
                std_cand: s.std_cand,
                cc: s.cc,
                crmse: s.crmse,
            });
        }
    }

    let reference_eof = eof_mode1(reference, 0)?;
    let model_eof = eof_mode1(model, 0)?;
    let transformed_eof = eof_mode1(transformed, 0)?;
    let eof = EofSummary {
        depth_m: reference.spec().depths_m[0],
        pattern_cc_model: pattern_correlation(&reference_eof, &model_eof)?,
        pattern_cc_transformed: pattern_correlation(&reference_eof, &transformed_eof)?,
        reference: reference_eof,
        model: model_eof,
        transformed: transformed_eof,
    };
    Ok(EvalReport {
        mse,
        cc,
        gain: gains,
        taylor,
        eof,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct EofRow<'a> {
    field: &'a str,
    depth_m: f64,
    explained_variance: f64,
    pattern_cc: f64,
}

/// Writes the CSV tables and the EOF pattern files into `dir`.
///
/// `grid` supplies the horizontal grid and mask for the pattern files.
pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>, grid: &FieldSeries) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join("mse_series.csv"), &report.mse)?;
    write_csv(&dir.join("cc_by_depth.csv"), &report.cc)?;
    write_csv(&dir.join("gain.csv"), &report.gain)?;
    write_csv(&dir.join("taylor.csv"), &report.taylor)?;
    let e = &report.eof;
    write_csv(
        &dir.join("eof1.csv"),
        &[
            EofRow { field: "reference", depth_m: e.depth_m, explained_variance: e.reference.explained_variance, pattern_cc: 1.0 },
            EofRow { field: "model", depth_m: e.depth_m, explained_variance: e.model.explained_variance, pattern_cc: e.pattern_cc_model },
            EofRow {
                field: "transformed",
                depth_m: e.depth_m,
                explained_variance: e.transformed.explained_variance,
                pattern_cc: e.pattern_cc_transformed,
            },
        ],
    )?;
    for (eof, name) in [
        (&e.transformed, "eof1_pattern.fld"),
        (&e.reference, "eof1_pattern_reference.fld"),
        (&e.model, "eof1_pattern_model.fld"),
    ] {
        fld::write(&eof.to_field(grid.spec(), e.depth_m, grid.mask())?, dir.join(name))?;
    }
    Ok(())
}
