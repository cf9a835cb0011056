//! Leading EOF against a dense cyclic Jacobi eigensolver.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use transform_model::field::{FieldSeries, GridSpec};
use transform_model::metrics::eof_mode1;

/// All eigenpairs of a symmetric matrix; columns of the returned matrix are
/// the eigenvectors.
fn jacobi(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    (0..n).for_each(|i| v[i * n + i] = 1.0);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p * n + q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * a[p * n + q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

#[test]
fn mode1_matches_jacobi_on_small_matrices() {
    // 3 valid cells x 2 components = 6 columns, 4 frames.
    let spec = GridSpec::uniform(4, 4, 1, 10.0, 24.0);
    let mut mask = vec![false; 16];
    for c in [1, 6, 11] {
        mask[c] = true;
    }
    for seed in 0..10 {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let nt = 4;
        let data: Vec<f64> = (0..nt * 16 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fs = FieldSeries::new(spec.clone(), nt, data, mask.clone()).unwrap();

        let p = 6;
        let mut x = vec![0.0; nt * p];
        for t in 0..nt {
            for (i, &cell) in [1usize, 6, 11].iter().enumerate() {
                x[t * p + 2 * i] = fs.get(t, 0, cell / 4, cell % 4, 0);
                x[t * p + 2 * i + 1] = fs.get(t, 0, cell / 4, cell % 4, 1);
            }
        }
        for j in 0..p {
            let m = (0..nt).map(|t| x[t * p + j]).sum::<f64>() / nt as f64;
            (0..nt).for_each(|t| x[t * p + j] -= m);
        }
        let mut cov = vec![0.0; p * p];
        for t in 0..nt {
            for i in 0..p {
                for j in 0..p {
                    cov[i * p + j] += x[t * p + i] * x[t * p + j];
                }
            }
        }
        let trace: f64 = (0..p).map(|i| cov[i * p + i]).sum();
        let (vals, vecs) = jacobi(cov, p);
        let top = (0..p).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        let mut want: Vec<f64> = (0..p).map(|k| vecs[k * p + top]).collect();
        let big = want.iter().copied().fold(0.0_f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if big < 0.0 {
            want.iter_mut().for_each(|v| *v = -*v);
        }

        let eof = eof_mode1(&fs, 0).unwrap();
        assert_eq!(eof.cells, vec![1, 6, 11]);
        for (a, b) in eof.pattern.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-8, "seed {seed}: pattern {a} vs {b}");
        }
        let sigma1 = eof.pc.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((sigma1 - vals[top].sqrt()).abs() <= 1e-8, "seed {seed}: sigma1 {sigma1} vs {}", vals[top].sqrt());
        assert!((eof.explained_variance - vals[top] / trace).abs() <= 1e-8);
    }
}
