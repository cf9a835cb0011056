use super::FieldSeries;
use crate::error::{Error, Result};

/// Per destination depth: `(lower level, upper level, lower weight, upper weight)`.
pub(crate) fn vertical_map(src: &[f64], dst: &[f64]) -> Result<Vec<(usize, usize, f64, f64)>> {
    let (min, max) = (src[0], src[src.len() - 1]);
    dst.iter()
        .map(|&d| {
            if !(d >= min && d <= max) {
                return Err(Error::Extrapolation { depth: d, min, max });
            }
            if let Some(k) = src.iter().position(|&s| s == d) {
                return Ok((k, k, 1.0, 0.0));
            }
            // strictly inside some interval
            let hi = src.iter().position(|&s| s > d).expect("depth below max");
            let lo = hi - 1;
            let w_hi = (d - src[lo]) / (src[hi] - src[lo]);
            Ok((lo, hi, 1.0 - w_hi, w_hi))
        })
        .collect()
}

pub(crate) fn block_len(src_dt: f64, dst_dt: f64) -> Result<usize> {
    let ratio = dst_dt / src_dt;
    let block = ratio.round();
    if dst_dt.is_nan() || dst_dt <= 0.0 || block < 1.0 || (ratio - block).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::IncompatibleInterval {
            src: src_dt,
            dst: dst_dt,
        });
    }
    Ok(block as usize)
}

/// Linear interpolation of every column onto `dst_depths_m`.
pub fn align_vertical(src: &FieldSeries, dst_depths_m: &[f64]) -> Result<FieldSeries> {
    if dst_depths_m.is_empty() {
        return Err(Error::Config("no destination depths".into()));
    }
    let map = vertical_map(&src.spec().depths_m, dst_depths_m)?;
    let mut spec = src.spec().clone();
    spec.nz = dst_depths_m.len();
    spec.depths_m = dst_depths_m.to_vec();
    spec.validate()?;

    let mut data = Vec::with_capacity(src.nt() * spec.frame_len());
    for t in 0..src.nt() {
        for &(lo, hi, wl, wh) in &map {
            let (a, b) = (src.level(t, lo), src.level(t, hi));
            if lo == hi {
                data.extend_from_slice(a);
            } else {
                data.extend(a.iter().zip(b).map(|(&p, &q)| wl * p + wh * q));
            }
        }
    }
    FieldSeries::new(spec, src.nt(), data, src.mask().to_vec())
}

/// Block-mean downsampling to `dst_dt_hours`; trailing partial blocks are dropped.
pub fn align_temporal(src: &FieldSeries, dst_dt_hours: f64) -> Result<FieldSeries> {
    let block = block_len(src.spec().dt_hours, dst_dt_hours)?;
    if block == 1 {
        let (mut spec, nt, data, mask) = src.clone().into_parts();
        spec.dt_hours = dst_dt_hours;
        return FieldSeries::new(spec, nt, data, mask);
    }
    let nt = src.nt() / block;
    if nt == 0 {
        return Err(Error::Config(format!(
            "{} frames cannot fill one block of {block}",
            src.nt()
        )));
    }
    let mut spec = src.spec().clone();
    spec.dt_hours = dst_dt_hours;
    let len = spec.frame_len();
    let mut data = vec![0.0; nt * len];
    for (t, out) in data.chunks_mut(len).enumerate() {
        for b in 0..block {
            for (o, &v) in out.iter_mut().zip(src.frame(t * block + b)) {
                *o += v;
            }
        }
        let n = block as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    FieldSeries::new(spec, nt, data, src.mask().to_vec())
}

/// Reverses frame order; the grid (including `t0`) is unchanged.
pub fn reverse_time(src: &FieldSeries) -> FieldSeries {
    let len = src.spec().frame_len();
    let mut data = Vec::with_capacity(src.data().len());
    for frame in src.data().chunks(len).rev() {
        data.extend_from_slice(frame);
    }
    src.with_data(data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn random_series(nt: usize, spec: GridSpec, seed: u64) -> FieldSeries {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let n = nt * spec.frame_len();
        let cells = spec.cells();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        FieldSeries::new(spec, nt, data, vec![true; cells]).unwrap()
    }

    fn lerp_oracle(xs: &[f64], ys: &[f64], x: f64) -> f64 {
        for i in 0..xs.len() - 1 {
            if x >= xs[i] && x <= xs[i + 1] {
                let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
                return ys[i] + t * (ys[i + 1] - ys[i]);
            }
        }
        panic!("outside")
    }

    #[test]
    fn vertical_identity_and_midpoint() {
        let spec = GridSpec::uniform(4, 4, 2, 20.0, 24.0);
        let fs = random_series(2, spec, 1);
        assert_eq!(align_vertical(&fs, &[0.0, 20.0]).unwrap(), fs);

        let mut data = Vec::new();
        for z in 0..2 {
            data.extend(std::iter::repeat_n(1.0 + 2.0 * z as f64, 32));
        }
        let fs = FieldSeries::new(GridSpec::uniform(4, 4, 2, 20.0, 24.0), 1, data, vec![true; 16])
            .unwrap();
        let mid = align_vertical(&fs, &[10.0]).unwrap();
        assert!(mid.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn vertical_matches_scalar_oracle() {
        let spec = GridSpec {
            depths_m: vec![0.0, 7.0, 20.0, 33.0, 60.0],
            ..GridSpec::uniform(4, 4, 5, 1.0, 24.0)
        };
        let fs = random_series(1, spec.clone(), 9);
        let dst = [3.5, 20.0, 51.25];
        let out = align_vertical(&fs, &dst).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..2 {
                    let col: Vec<f64> = (0..5).map(|z| fs.get(0, z, y, x, c)).collect();
                    for (k, &d) in dst.iter().enumerate() {
                        let want = lerp_oracle(&spec.depths_m, &col, d);
                        assert!((out.get(0, k, y, x, c) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn vertical_rejects_extrapolation() {
        let fs = random_series(1, GridSpec::uniform(4, 4, 2, 20.0, 24.0), 1);
        assert!(matches!(
            align_vertical(&fs, &[25.0]),
            Err(Error::Extrapolation { .. })
        ));
    }

    #[test]
    fn temporal_block_mean() {
        let fs = random_series(2, GridSpec::uniform(4, 4, 1, 20.0, 12.0), 2);
        let daily = align_temporal(&fs, 24.0).unwrap();
        assert_eq!(daily.nt(), 1);
        assert_eq!(daily.spec().dt_hours, 24.0);
        for i in 0..daily.data().len() {
            assert_eq!(daily.data()[i], (fs.data()[i] + fs.data()[32 + i]) / 2.0);
        }
        let same = align_temporal(&daily, 24.0).unwrap();
        assert_eq!(same, daily);
        assert!(matches!(
            align_temporal(&fs, 18.0),
            Err(Error::IncompatibleInterval { .. })
        ));
        assert!(align_temporal(&fs, 6.0).is_err());
    }

    #[test]
    fn half_day_to_daily_frame_count() {
        let fs = FieldSeries::zeros(GridSpec::uniform(4, 4, 1, 20.0, 12.0), 1810).unwrap();
        assert_eq!(align_temporal(&fs, 24.0).unwrap().nt(), 905);
        let odd = FieldSeries::zeros(GridSpec::uniform(4, 4, 1, 20.0, 12.0), 7).unwrap();
        assert_eq!(align_temporal(&odd, 24.0).unwrap().nt(), 3);
    }

    #[test]
    fn reverse_is_involution() {
        let fs = random_series(3, GridSpec::uniform(4, 5, 2, 20.0, 24.0), 4);
        let r = reverse_time(&fs);
        assert_eq!(r.frame(0), fs.frame(2));
        assert_eq!(r.frame(2), fs.frame(0));
        assert_eq!(reverse_time(&r), fs);
        let one = random_series(1, GridSpec::uniform(4, 4, 1, 20.0, 24.0), 5);
        assert_eq!(reverse_time(&one), one);
    }
}
