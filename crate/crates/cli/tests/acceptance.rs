//! Acceptance suite. Runs every criterion in sequence, prints one
//! `[PASS]`/`[FAIL]` line per criterion and fails if any criterion failed.
//!
//! Run alone with `cargo test -p transform-model-cli --test acceptance -- --nocapture`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use transform_model::field::{fld, regrid_horizontal, reverse_time, FieldSeries, GridSpec};
use transform_model::metrics::{eof_mode1, taylor_from_series};
use transform_model::nn::{
    conv2d_backward, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward, mse_loss, relu_backward, relu_forward,
    transposed_conv2x2_backward, transposed_conv2x2_forward, LayerParams, Tensor,
};
use transform_model::pipeline::{make_samples, run_experiment, train_with, ArchSection, ExperimentSpec, Split, TrainConfig, TrainSection};
use transform_model::stunet::{checkpoint, Direction, StuNetArch, StuNetModel};
use transform_model::synth::{self, SynthSpec};

const GRAD_EPS: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_CASES: usize = 20;
const OVERFIT_RATIO: f64 = 0.05;
const MSE_RATIO: f64 = 0.5;
const EOF_CC: f64 = 0.9;
const EOF_RANK1_TOL: f64 = 1e-10;
const TAYLOR_TOL: f64 = 1e-10;
const TAYLOR_PAIRS: usize = 100;
const REGRID_TOL: f64 = 1e-12;

type Check = Result<String, String>;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(id: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    let (mut pass, mut detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    if let Some(b) = budget {
        detail.push_str(&format!("; runtime {:.1} s (budget {} s)", elapsed.as_secs_f64(), b.as_secs()));
        if elapsed > b {
            pass = false;
        }
    } else {
        detail.push_str(&format!("; runtime {:.1} s", elapsed.as_secs_f64()));
    }
    Outcome { id, pass, detail, elapsed }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_layer(rng: &mut StdRng, mut p: LayerParams) -> LayerParams {
    p.weight = random_tensor(rng, p.weight.shape());
    p.bias = random_tensor(rng, p.bias.shape());
    p
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error (max-norm over the tensor) between `analytic` and
/// central differences of `f` at `at`.
fn fd_error(at: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..at.len() {
        let mut plus = at.clone();
        plus.data_mut()[i] += GRAD_EPS;
        let mut minus = at.clone();
        minus.data_mut()[i] -= GRAD_EPS;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * GRAD_EPS);
        let a = analytic.data()[i];
        diff = diff.max((a - numeric).abs());
        scale = scale.max(a.abs()).max(numeric.abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn criterion_1() -> Check {
    let mut rng = StdRng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut note = |name: &str, e: f64| -> Result<(), String> {
        worst = worst.max(e);
        checked += 1;
        ensure(e <= GRAD_TOL, || format!("{name}: relative error {e:.3e}"))
    };
    for _ in 0..3 {
        let b = rng.random_range(1..=2);
        let c = rng.random_range(1..=3);
        let oc = rng.random_range(1..=3);
        let h = 2 * rng.random_range(1..=3);
        let w = 2 * rng.random_range(1..=3);
        let x = random_tensor(&mut rng, &[b, c, h, w]);

        for (name, proto) in [("conv3x3", LayerParams::conv(oc, c, 3, 1)), ("conv1x1", LayerParams::head(oc, c))] {
            let p = random_layer(&mut rng, proto);
            let r = random_tensor(&mut rng, &[b, oc, h, w]);
            let (gx, gw, gb) = conv2d_backward(&x, &p, &r).map_err(err)?;
            note(name, fd_error(&x, &gx, |x| dot(&conv2d_forward(x, &p).unwrap(), &r)))?;
            note(name, fd_error(&p.weight, &gw, |wt| {
                let mut q = p.clone();
                q.weight = wt.clone();
                dot(&conv2d_forward(&x, &q).unwrap(), &r)
            }))?;
            note(name, fd_error(&p.bias, &gb, |bs| {
                let mut q = p.clone();
                q.bias = bs.clone();
                dot(&conv2d_forward(&x, &q).unwrap(), &r)
            }))?;
        }

        let p = random_layer(&mut rng, LayerParams::tconv(c, oc));
        let r = random_tensor(&mut rng, &[b, oc, 2 * h, 2 * w]);
        let (gx, gw, gb) = transposed_conv2x2_backward(&x, &p, &r).map_err(err)?;
        let f = |x: &Tensor, p: &LayerParams| dot(&transposed_conv2x2_forward(x, p).unwrap(), &r);
        note("tconv2x2", fd_error(&x, &gx, |x| f(x, &p)))?;
        note("tconv2x2", fd_error(&p.weight, &gw, |wt| {
            let mut q = p.clone();
            q.weight = wt.clone();
            f(&x, &q)
        }))?;
        note("tconv2x2", fd_error(&p.bias, &gb, |bs| {
            let mut q = p.clone();
            q.bias = bs.clone();
            f(&x, &q)
        }))?;

        let r = random_tensor(&mut rng, &[b, c, h / 2, w / 2]);
        let (_, idx) = maxpool2x2_forward(&x).map_err(err)?;
        let gx = maxpool2x2_backward(&idx, &r, x.shape()).map_err(err)?;
        note("maxpool", fd_error(&x, &gx, |x| dot(&maxpool2x2_forward(x).unwrap().0, &r)))?;

        let r = random_tensor(&mut rng, x.shape());
        let gx = relu_backward(&x, &r).map_err(err)?;
        note("relu", fd_error(&x, &gx, |x| dot(&relu_forward(x), &r)))?;

        let target = random_tensor(&mut rng, x.shape());
        let mask: Vec<bool> = (0..h * w).map(|i| i % 3 != 1).collect();
        let (_, gx) = mse_loss(&x, &target, &mask).map_err(err)?;
        note("mse_loss", fd_error(&x, &gx, |x| mse_loss(x, &target, &mask).unwrap().0))?;
    }
    Ok(format!("{checked} gradient checks, worst relative error {worst:.2e} (tolerance {GRAD_TOL:e})"))
}

fn naive_conv(x: &Tensor, p: &LayerParams) -> Vec<f64> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ws = p.weight.shape();
    let (oc, k) = (ws[0], ws[2]);
    let pad = p.padding as isize;
    let (oh, ow) = (h + 2 * p.padding + 1 - k, w + 2 * p.padding + 1 - k);
    let mut out = vec![0.0; b * oc * oh * ow];
    for n in 0..b {
        for o in 0..oc {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = p.bias.data()[o];
                    for i in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * c + i) * h + sy as usize) * w + sx as usize];
                                acc += xv * p.weight.data()[((o * c + i) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((n * oc + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn naive_tconv(x: &Tensor, p: &LayerParams) -> Vec<f64> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oc = p.weight.shape()[1];
    let mut out = vec![0.0; b * oc * 4 * h * w];
    for n in 0..b {
        for o in 0..oc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let (i, a, j, d) = (y / 2, y % 2, xx / 2, xx % 2);
                    let mut acc = p.bias.data()[o];
                    for ci in 0..c {
                        acc += x.data()[((n * c + ci) * h + i) * w + j] * p.weight.data()[((ci * oc + o) * 2 + a) * 2 + d];
                    }
                    out[((n * oc + o) * 2 * h + y) * 2 * w + xx] = acc;
                }
            }
        }
    }
    out
}

fn naive_pool(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = Vec::new();
    for p in 0..planes {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let at = |y: usize, xx: usize| x.data()[(p * h + y) * w + xx];
                out.push(at(2 * i, 2 * j).max(at(2 * i, 2 * j + 1)).max(at(2 * i + 1, 2 * j)).max(at(2 * i + 1, 2 * j + 1)));
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> Result<f64, String> {
    ensure(a.len() == b.len(), || format!("length {} vs {}", a.len(), b.len()))?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

fn criterion_2() -> Check {
    let mut rng = StdRng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut record = |name: &str, d: f64| -> Result<(), String> {
        worst = worst.max(d);
        ensure(d <= ORACLE_TOL, || format!("{name}: max difference {d:e}"))
    };
    for _ in 0..ORACLE_CASES {
        let b = rng.random_range(1..=3);
        let c = rng.random_range(1..=4);
        let oc = rng.random_range(1..=4);
        let h = 2 * rng.random_range(1..=5);
        let w = 2 * rng.random_range(1..=5);
        let x = random_tensor(&mut rng, &[b, c, h, w]);
        for proto in [LayerParams::conv(oc, c, 3, 1), LayerParams::head(oc, c)] {
            let p = random_layer(&mut rng, proto);
            record("conv", max_abs_diff(conv2d_forward(&x, &p).map_err(err)?.data(), &naive_conv(&x, &p))?)?;
        }
        let p = random_layer(&mut rng, LayerParams::tconv(c, oc));
        record("tconv", max_abs_diff(transposed_conv2x2_forward(&x, &p).map_err(err)?.data(), &naive_tconv(&x, &p))?)?;
        record("maxpool", max_abs_diff(maxpool2x2_forward(&x).map_err(err)?.0.data(), &naive_pool(&x))?)?;

        let target = random_tensor(&mut rng, x.shape());
        let mask: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.7)).collect();
        if mask.iter().any(|&m| m) {
            let (loss, _) = mse_loss(&x, &target, &mask).map_err(err)?;
            let (mut sum, mut n) = (0.0, 0usize);
            for plane in 0..b * c {
                for (cell, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    let k = plane * h * w + cell;
                    sum += (x.data()[k] - target.data()[k]).powi(2);
                    n += 1;
                }
            }
            record("mse_loss", (loss - sum / n as f64).abs())?;
        }
    }
    Ok(format!(
        "{ORACLE_CASES} randomized cases per op (conv3x3, conv1x1, tconv2x2, maxpool, mse), worst difference {worst:.1e}"
    ))
}

fn criterion_3() -> Check {
    let spec = SynthSpec {
        nx: 64,
        ny: 64,
        nt: 8,
        ..SynthSpec::default()
    };
    let (truth, model) = synth::generate(&spec).map_err(err)?;
    let cfg = TrainConfig {
        max_epochs: 500,
        drop_period: 1000,
        train_frames: [0, 8],
        ..TrainConfig::default()
    };
    let set = make_samples(&model, &truth, 0, &cfg).map_err(err)?;
    ensure(set.samples.len() == 8, || format!("{} samples", set.samples.len()))?;
    let net = StuNetModel::build(StuNetArch::new(64, 2, 16).map_err(err)?, cfg.seed).map_err(err)?;
    let (_, history) = train_with(net, &set, &cfg, |_| {}).map_err(err)?;
    let first = history.epochs.first().ok_or("no epochs")?.rmse;
    let last = history.epochs.last().ok_or("no epochs")?.rmse;
    let ratio = last / first;
    let msg = format!(
        "{} epochs, training RMSE {first:.4} -> {last:.4}, ratio {ratio:.4} (bound {OVERFIT_RATIO})",
        history.epochs.len()
    );
    ensure(ratio <= OVERFIT_RATIO, || msg.clone())?;
    Ok(msg)
}

struct TwinResult {
    gain: f64,
    mse_model: f64,
    mse_transformed: f64,
    eof_cc: f64,
    eof_cc_model: f64,
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect())
}

fn number(s: &str) -> Result<f64, String> {
    s.parse().map_err(|e| format!("{s:?}: {e}"))
}

/// Default twin experiment through the command line: `synth` writes the pair
/// and experiment spec, `run` trains and scores; the numbers come from the
/// CSV files the run writes.
fn twin_run(dir: &Path) -> Result<TwinResult, String> {
    let d = dir.to_str().unwrap();
    expect_exit(&["synth", "--out", d], 0)?;
    let exp = dir.join("experiment.json");
    expect_exit(&["run", "--config", exp.to_str().unwrap()], 0)?;
    let out = dir.join("out");
    let gain_rows = read_csv(&out.join("gain.csv"))?;
    let joint = gain_rows.iter().find(|r| r[1] == "uv").ok_or("gain.csv has no joint row")?;
    let mse = read_csv(&out.join("mse_series.csv"))?;
    let n = mse.len() as f64;
    let mean = |col: usize| -> Result<f64, String> { Ok(mse.iter().map(|r| number(&r[col])).sum::<Result<f64, _>>()? / n) };
    let eof = read_csv(&out.join("eof1.csv"))?;
    let cc = |field: &str| -> Result<f64, String> {
        number(&eof.iter().find(|r| r[0] == field).ok_or(format!("eof1.csv has no {field} row"))?[3])
    };
    Ok(TwinResult {
        gain: number(&joint[2])?,
        mse_model: mean(1)?,
        mse_transformed: mean(2)?,
        eof_cc: cc("transformed")?,
        eof_cc_model: cc("model")?,
    })
}

fn criterion_4(twin: &Result<TwinResult, String>) -> Check {
    let t = twin.as_ref().map_err(Clone::clone)?;
    let msg = format!(
        "held-out gain {:.2} % (frozen threshold {:.2} %, pilot {:.2} %)",
        t.gain,
        synth::TWIN_GAIN_THRESHOLD_PCT,
        synth::TWIN_PILOT_GAIN_PCT
    );
    ensure(t.gain >= synth::TWIN_GAIN_THRESHOLD_PCT, || msg.clone())?;
    Ok(msg)
}

fn criterion_5(twin: &Result<TwinResult, String>) -> Check {
    let t = twin.as_ref().map_err(Clone::clone)?;
    let ratio = t.mse_transformed / t.mse_model;
    let msg = format!(
        "mean held-out MSE {:.3e} (transformed) vs {:.3e} (biased), ratio {ratio:.3} (bound {MSE_RATIO})",
        t.mse_transformed, t.mse_model
    );
    ensure(ratio <= MSE_RATIO, || msg.clone())?;
    Ok(msg)
}

fn duality_spec(dir: &Path, direction: Direction, train: [usize; 2], test: [usize; 2]) -> ExperimentSpec {
    ExperimentSpec {
        model_field: dir.join("model.fld"),
        obs_field: dir.join("truth.fld"),
        direction,
        window: 2,
        split: Split { train, test },
        levels: None,
        arch: ArchSection {
            base_channels: 4,
            grid: 16,
            ..ArchSection::default()
        },
        train: TrainSection {
            max_epochs: 3,
            shuffle: true,
            ..TrainSection::default()
        },
        out_dir: dir.join("out"),
    }
}

fn criterion_6(root: &Path) -> Check {
    let spec = SynthSpec {
        nt: 20,
        nz: 2,
        nx: 16,
        ny: 16,
        ..SynthSpec::default()
    };
    let (fwd_dir, bwd_dir) = (root.join("reversed"), root.join("original"));
    let (truth, model) = synth::write_pair(&spec, &bwd_dir).map_err(err)?;
    std::fs::create_dir_all(&fwd_dir).map_err(err)?;
    fld::write(&reverse_time(&truth), fwd_dir.join("truth.fld")).map_err(err)?;
    fld::write(&reverse_time(&model), fwd_dir.join("model.fld")).map_err(err)?;

    // Backward: train on the later frames, correct the earlier ones.
    let b = run_experiment(&duality_spec(&bwd_dir, Direction::Backward, [8, 20], [0, 8]), 1, &|_, _| {}).map_err(err)?;
    let f = run_experiment(&duality_spec(&fwd_dir, Direction::Forward, [0, 12], [12, 20]), 1, &|_, _| {}).map_err(err)?;

    let reversed = reverse_time(&f.transformed);
    let same_bits = |a: &[f64], c: &[f64]| a.len() == c.len() && a.iter().zip(c).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(same_bits(b.transformed.data(), reversed.data()), || "transformed fields differ".into())?;
    ensure(b.transformed.mask() == reversed.mask(), || "masks differ".into())?;
    for (lb, lf) in b.levels.iter().zip(&f.levels) {
        for (pb, pf) in lb.model.params.iter().zip(&lf.model.params) {
            ensure(
                same_bits(pb.weight.data(), pf.weight.data()) && same_bits(pb.bias.data(), pf.bias.data()),
                || format!("level {} parameters differ", lb.level),
            )?;
        }
    }
    Ok(format!(
        "{} levels, {} transformed values bit-identical to the reversed forward run",
        b.levels.len(),
        b.transformed.data().len()
    ))
}

fn criterion_7(twin: &Result<TwinResult, String>) -> Check {
    let t = twin.as_ref().map_err(Clone::clone)?;
    let msg = format!(
        "mode-1 pattern correlation {:.4} (bound {EOF_CC}; biased model {:.4})",
        t.eof_cc, t.eof_cc_model
    );
    ensure(t.eof_cc >= EOF_CC, || msg.clone())?;

    let spec = GridSpec::uniform(12, 10, 1, 10.0, 24.0);
    let cells = spec.cells();
    let nt = 17;
    let mut data = Vec::with_capacity(nt * cells * 2);
    for t in 0..nt {
        let a = (0.7 * t as f64).sin() + 0.3 * (t as f64 * 1.9).cos();
        for cell in 0..cells {
            let p = (cell as f64 * 0.37).cos();
            data.push(0.5 + a * p);
            data.push(-0.2 + a * 0.5 * (cell as f64 * 0.11).sin());
        }
    }
    let fs = FieldSeries::new(spec, nt, data, vec![true; cells]).map_err(err)?;
    let ev = eof_mode1(&fs, 0).map_err(err)?.explained_variance;
    let rank1 = format!("rank-1 explained variance {ev:.14}");
    ensure((ev - 1.0).abs() <= EOF_RANK1_TOL, || rank1.clone())?;
    Ok(format!("{msg}; {rank1}"))
}

fn criterion_8() -> Check {
    let mut rng = StdRng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..TAYLOR_PAIRS {
        let n = rng.random_range(5..200);
        let scale = rng.random_range(0.1..10.0);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let mix = rng.random_range(-1.0..1.0);
        let c: Vec<f64> = r.iter().map(|v| mix * v + rng.random_range(-1.0..1.0) + 3.0).collect();
        let s = taylor_from_series(&r, &c).map_err(err)?;
        let rhs = s.std_ref.powi(2) + s.std_cand.powi(2) - 2.0 * s.std_ref * s.std_cand * s.cc;
        worst = worst.max((s.crmse.powi(2) - rhs).abs());
    }
    let msg = format!("{TAYLOR_PAIRS} random pairs, worst identity residual {worst:.1e} (tolerance {TAYLOR_TOL:e})");
    ensure(worst <= TAYLOR_TOL, || msg.clone())?;
    Ok(msg)
}

fn field_from(spec: GridSpec, f: impl Fn(f64, f64, usize) -> f64) -> FieldSeries {
    let (nx, ny) = (spec.nx, spec.ny);
    let mut data = Vec::with_capacity(spec.frame_len());
    for y in 0..ny {
        for x in 0..nx {
            let (fx, fy) = (x as f64 / (nx - 1) as f64, y as f64 / (ny - 1) as f64);
            data.push(f(fx, fy, 0));
            data.push(f(fx, fy, 1));
        }
    }
    FieldSeries::new(spec.clone(), 1, data, vec![true; spec.cells()]).unwrap()
}

fn criterion_9() -> Check {
    let linear = |x: f64, y: f64, c: usize| if c == 0 { 0.3 + 1.7 * x - 0.9 * y } else { -2.0 + 0.4 * x + 2.5 * y };
    let constant = |_: f64, _: f64, c: usize| if c == 0 { 1.25 } else { -0.75 };
    let src = GridSpec::uniform(17, 13, 1, 10.0, 24.0);
    let mut worst: f64 = 0.0;
    for (nx, ny) in [(33, 25), (9, 7), (20, 31), (17, 13)] {
        let dst = GridSpec { nx, ny, ..src.clone() };
        for f in [&linear as &dyn Fn(f64, f64, usize) -> f64, &constant] {
            let out = regrid_horizontal(&field_from(src.clone(), f), nx, ny).map_err(err)?;
            let expect = field_from(dst.clone(), f);
            worst = worst.max(max_abs_diff(out.data(), expect.data())?);
        }
    }
    let spec = SynthSpec {
        nt: 3,
        nx: 20,
        ny: 18,
        ..SynthSpec::default()
    };
    let (truth, _) = synth::generate(&spec).map_err(err)?;
    let same = regrid_horizontal(&truth, 20, 18).map_err(err)?;
    let self_diff = max_abs_diff(same.data(), truth.data())?;
    ensure(same.mask() == truth.mask(), || "regrid to self changed the mask".into())?;
    let msg = format!("constant/linear worst error {worst:.1e}, regrid-to-self error {self_diff:.1e} (tolerance {REGRID_TOL:e})");
    ensure(worst <= REGRID_TOL && self_diff <= REGRID_TOL, || msg.clone())?;
    Ok(msg)
}

fn tmodel(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tmodel")).args(args).output().expect("binary runs")
}

fn expect_exit(args: &[&str], code: i32) -> Result<(), String> {
    let out = tmodel(args);
    ensure(out.status.code() == Some(code), || {
        format!(
            "`tmodel {}` exited with {:?}, expected {code}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        )
    })
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_10(root: &Path) -> Check {
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    std::fs::create_dir_all(root).map_err(err)?;
    let data = root.join("data");
    let synth_cfg = root.join("synth.json");
    std::fs::write(&synth_cfg, r#"{"nt": 14, "nz": 2, "nx": 16, "ny": 16}"#).map_err(err)?;
    expect_exit(&["synth", "--config", &s(&synth_cfg), "--out", &s(&data)], 0)?;
    let exp = root.join("experiment.json");
    let text = r#"{"model_field": "data/model.fld", "obs_field": "data/truth.fld", "window": 2,
            "split": {"train": [0, 10], "test": [10, 14]},
            "arch": {"base_channels": 4, "grid": 16},
            "train": {"max_epochs": 2, "shuffle": true}, "out_dir": "unused"}"#;
    std::fs::write(&exp, text).map_err(err)?;
    let runs = [root.join("run_a"), root.join("run_b")];
    for out in &runs {
        expect_exit(&["run", "--config", &s(&exp), "--out", &s(out), "--seed", "7"], 0)?;
    }
    let mut compared = 0;
    for rel in [
        "checkpoints/manifest.json",
        "checkpoints/level_000.stu",
        "checkpoints/level_001.stu",
        "transformed.fld",
        "mse_series.csv",
        "cc_by_depth.csv",
        "gain.csv",
        "taylor.csv",
        "eof1.csv",
        "train_log.csv",
    ] {
        ensure(read(&runs[0].join(rel))? == read(&runs[1].join(rel))?, || format!("{rel} differs between runs"))?;
        compared += 1;
    }

    // FLD1 round trip is exact at f32.
    let (truth, _) = synth::generate(&SynthSpec { nt: 4, nx: 16, ny: 16, ..SynthSpec::default() }).map_err(err)?;
    let path = root.join("roundtrip.fld");
    fld::write(&truth, &path).map_err(err)?;
    let back = fld::read(&path).map_err(err)?;
    let rounded: Vec<f64> = truth.data().iter().map(|&v| v as f32 as f64).collect();
    ensure(back.data() == rounded.as_slice() && back.mask() == truth.mask(), || "FLD1 round trip mismatch".into())?;
    ensure(back.spec() == truth.spec(), || "FLD1 header mismatch".into())?;

    // Checkpoint round trip is exact at f32 and re-saves byte-identically.
    let ck = runs[0].join("checkpoints/level_000.stu");
    let model = checkpoint::load(&ck).map_err(err)?;
    let resaved = root.join("resaved.stu");
    checkpoint::save(&model, &resaved).map_err(err)?;
    ensure(read(&resaved)? == read(&ck)?, || "checkpoint re-save differs".into())?;
    let fresh = StuNetModel::build(model.arch, 3).map_err(err)?;
    checkpoint::save(&fresh, &resaved).map_err(err)?;
    let loaded = checkpoint::load(&resaved).map_err(err)?;
    for (a, b) in fresh.params.iter().zip(&loaded.params) {
        let f32_eq = |x: &Tensor, y: &Tensor| x.data().iter().zip(y.data()).all(|(p, q)| (*p as f32 as f64) == *q);
        ensure(f32_eq(&a.weight, &b.weight) && f32_eq(&a.bias, &b.bias), || "checkpoint round trip mismatch".into())?;
    }

    // Damaged files are rejected with the documented exit codes.
    let bytes = read(&path)?;
    let truncated = root.join("truncated.fld");
    std::fs::write(&truncated, &bytes[..bytes.len() - 10]).map_err(err)?;
    expect_exit(&["regrid", &s(&truncated), "--out", &s(&root.join("x.fld")), "--nx", "8"], 2)?;
    let bad_magic = root.join("magic.fld");
    let mut b = bytes.clone();
    b[0] = b'X';
    std::fs::write(&bad_magic, b).map_err(err)?;
    expect_exit(&["info", &s(&bad_magic)], 2)?;

    let bank = root.join("bank");
    std::fs::create_dir_all(&bank).map_err(err)?;
    for f in ["manifest.json", "level_000.stu", "level_001.stu"] {
        std::fs::copy(runs[0].join("checkpoints").join(f), bank.join(f)).map_err(err)?;
    }
    let mut ck_bytes = read(&bank.join("level_001.stu"))?;
    let n = ck_bytes.len();
    ck_bytes[n - 100] ^= 0x10;
    std::fs::write(bank.join("level_001.stu"), &ck_bytes).map_err(err)?;
    let model_fld = s(&data.join("model.fld"));
    let out_fld = s(&root.join("t.fld"));
    expect_exit(&["transform", "--checkpoints", &s(&bank), "--input", &model_fld, "--out", &out_fld], 2)?;
    std::fs::write(bank.join("level_001.stu"), &ck_bytes[..n / 2]).map_err(err)?;
    expect_exit(&["transform", "--checkpoints", &s(&bank), "--input", &model_fld, "--out", &out_fld], 2)?;

    // Usage errors and numerical failures.
    expect_exit(&["transform", "--frames", "x..y"], 1)?;
    expect_exit(&["run", "--config", &s(&synth_cfg)], 1)?;
    let flat = root.join("flat.fld");
    let spec = GridSpec::uniform(16, 16, 1, 10.0, 24.0);
    let cells = spec.cells();
    fld::write(&FieldSeries::new(spec, 3, vec![0.5; 3 * cells * 2], vec![true; cells]).map_err(err)?, &flat).map_err(err)?;
    expect_exit(
        &["eval", "--reference", &s(&flat), "--model", &s(&flat), "--transformed", &s(&flat), "--out", &s(&root.join("ev"))],
        3,
    )?;
    Ok(format!(
        "{compared} run artifacts byte-identical across seeded runs; FLD1 and checkpoint round trips exact at f32; damaged inputs exit 2, usage 1, numerical 3"
    ))
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().expect("temp dir");
    let root = root.path();
    let secs = Duration::from_secs;
    let mut outcomes = vec![
        timed("1 gradient correctness", Some(secs(30)), criterion_1),
        timed("2 oracle equivalence", Some(secs(10)), criterion_2),
        timed("8 taylor identity", None, criterion_8),
        timed("9 regridding exactness", None, criterion_9),
        timed("10 determinism and formats", None, || criterion_10(&root.join("c10"))),
        timed("6 forward/backward duality", Some(secs(300)), || criterion_6(&root.join("c6"))),
        timed("3 overfit capacity", Some(secs(180)), criterion_3),
    ];
    let start = Instant::now();
    let twin = twin_run(&root.join("twin"));
    let twin_elapsed = start.elapsed();
    let mut c4 = timed("4 twin-experiment gain", None, || criterion_4(&twin));
    c4.elapsed += twin_elapsed;
    c4.detail.push_str(&format!("; twin run {:.1} s (budget 600 s)", twin_elapsed.as_secs_f64()));
    c4.pass &= twin_elapsed <= secs(600);
    outcomes.push(c4);
    outcomes.push(timed("5 mse reduction", None, || criterion_5(&twin)));
    outcomes.push(timed("7 eof fidelity", None, || criterion_7(&twin)));
    outcomes.sort_by_key(|o| o.id.split(' ').next().unwrap().parse::<u32>().unwrap());

    println!();
    for o in &outcomes {
        println!("[{}] criterion {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail);
    }
    let total: Duration = outcomes.iter().map(|o| o.elapsed).sum();
    println!("total {:.1} s", total.as_secs_f64());
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
