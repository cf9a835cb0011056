//! Convolution layers: stride-1 zero-padded cross-correlation (3x3 "same" and
//! 1x1 head) and the 2x2 stride-2 transposed convolution of the decoder.
//!
//! Both lower to GEMM. Large planes are unfolded per sample in row tiles,
//! small planes several samples at a time.

use super::tensor::{gemm, gemm_strided, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Weights `[out, in, k, k]`.
    Conv2d,
    /// Weights `[in, out, 2, 2]`, stride 2.
    TransposedConv2d,
    /// 1x1 linear regression head, weights `[out, in, 1, 1]`.
    DenseHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

/// Gradients with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ParamGrads {
    pub fn zeros_like(p: &LayerParams) -> Self {
        ParamGrads {
            weight: Tensor::zeros(p.weight.shape()),
            bias: Tensor::zeros(p.bias.shape()),
        }
    }
}

impl LayerParams {
    /// Zero-initialised square convolution.
    pub fn conv(out_ch: usize, in_ch: usize, k: usize, padding: usize) -> Self {
        LayerParams {
            kind: LayerKind::Conv2d,
            weight: Tensor::zeros(&[out_ch, in_ch, k, k]),
            bias: Tensor::zeros(&[out_ch]),
            stride: 1,
            padding,
        }
    }

    pub fn head(out_ch: usize, in_ch: usize) -> Self {
        LayerParams {
            kind: LayerKind::DenseHead,
            ..LayerParams::conv(out_ch, in_ch, 1, 0)
        }
    }

    pub fn tconv(in_ch: usize, out_ch: usize) -> Self {
        LayerParams {
            kind: LayerKind::TransposedConv2d,
            weight: Tensor::zeros(&[in_ch, out_ch, 2, 2]),
            bias: Tensor::zeros(&[out_ch]),
            stride: 2,
            padding: 0,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            LayerKind::TransposedConv2d => self.weight.shape()[0],
            _ => self.weight.shape()[1],
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::TransposedConv2d => self.weight.shape()[1],
            _ => self.weight.shape()[0],
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Number of inputs feeding one output value.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::TransposedConv2d => self.in_channels(),
            _ => self.in_channels() * self.kernel() * self.kernel(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check(&self) -> Result<()> {
        let ws = self.weight.shape();
        let ok = ws.len() == 4
            && ws[2] == ws[3]
            && self.bias.shape() == [self.out_channels()]
            && match self.kind {
                LayerKind::TransposedConv2d => ws[2] == 2 && self.stride == 2 && self.padding == 0,
                LayerKind::DenseHead => ws[2] == 1 && self.stride == 1 && self.padding == 0,
                LayerKind::Conv2d => self.stride == 1,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "unsupported {:?} layer: weight {:?}, bias {:?}, stride {}, padding {}",
                self.kind,
                ws,
                self.bias.shape(),
                self.stride,
                self.padding
            )))
        }
    }
}

fn conv_out_size(h: usize, w: usize, k: usize, pad: usize) -> Result<(usize, usize)> {
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::ShapeMismatch(format!(
            "input {h}x{w} smaller than kernel {k} with padding {pad}"
        )));
    }
    Ok((h + 2 * pad - k + 1, w + 2 * pad - k + 1))
}

/// Target size (in values) of one unfolded tile; keeps the patch matrix in cache.
const TILE_VALUES: usize = 1 << 16;

/// Output rows per tile for a patch matrix with `rows` rows.
fn tile_rows(rows: usize, oh: usize, ow: usize) -> usize {
    (TILE_VALUES / (rows * ow).max(1)).clamp(1, oh)
}

/// Minimum patch-matrix width; small planes are unfolded several samples
/// at a time to reach it.
const MIN_COLS: usize = 256;

/// Samples per unfolded block.
fn group_size(hw: usize, b: usize) -> usize {
    (MIN_COLS / hw.max(1)).clamp(1, b.max(1))
}

/// Geometry of a stride-1 convolution on one sample.
#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ow: usize,
}

impl Geom {
    /// Output columns `[x_lo, x_hi)` whose source column `ox + kx - pad` is in bounds.
    fn x_span(&self, kx: usize) -> (usize, usize) {
        let x_lo = self.pad.saturating_sub(kx).min(self.ow);
        let x_hi = (self.w + self.pad).saturating_sub(kx).min(self.ow).max(x_lo);
        (x_lo, x_hi)
    }

    /// Source row for output row `oy` and kernel row `ky`, if in bounds.
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy + ky;
        (iy >= self.pad && iy - self.pad < self.h).then(|| iy - self.pad)
    }
}

/// Unfolds output rows `[y0, y1)` of one `[c, h, w]` sample into the
/// `[c*k*k, (y1-y0)*ow]` block of `col` that starts at column `at` of a
/// matrix with row stride `ld`.
fn im2col(x: &[f64], g: Geom, y0: usize, y1: usize, col: &mut [f64], ld: usize, at: usize) {
    let (k, ow, h, w) = (g.k, g.ow, g.h, g.w);
    let cols = (y1 - y0) * ow;
    let mut row = 0;
    for ic in 0..g.c {
        let plane = &x[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * ld + at..row * ld + at + cols];
                let (x_lo, x_hi) = g.x_span(kx);
                for oy in y0..y1 {
                    let d = &mut dst[(oy - y0) * ow..(oy - y0 + 1) * ow];
                    let Some(sy) = g.src_row(oy, ky) else {
                        d.fill(0.0);
                        continue;
                    };
                    let src = &plane[sy * w..(sy + 1) * w];
                    d[..x_lo].fill(0.0);
                    d[x_hi..].fill(0.0);
                    let sx0 = x_lo + kx - g.pad;
                    d[x_lo..x_hi].copy_from_slice(&src[sx0..sx0 + (x_hi - x_lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a block back into a `[c, h, w]` sample.
fn col2im(col: &[f64], g: Geom, y0: usize, y1: usize, x: &mut [f64], ld: usize, at: usize) {
    let (k, ow, h, w) = (g.k, g.ow, g.h, g.w);
    let cols = (y1 - y0) * ow;
    let mut row = 0;
    for ic in 0..g.c {
        let plane = &mut x[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * ld + at..row * ld + at + cols];
                let (x_lo, x_hi) = g.x_span(kx);
                for oy in y0..y1 {
                    let Some(sy) = g.src_row(oy, ky) else {
                        continue;
                    };
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    let sx0 = x_lo + kx - g.pad;
                    let s = &src[(oy - y0) * ow + x_lo..(oy - y0) * ow + x_hi];
                    for (d, v) in dst[sx0..sx0 + (x_hi - x_lo)].iter_mut().zip(s) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

fn is_pointwise(p: &LayerParams) -> bool {
    p.kernel() == 1 && p.padding == 0
}

/// Stride-1 convolution (cross-correlation) plus bias.
pub fn conv2d_forward(x: &Tensor, p: &LayerParams) -> Result<Tensor> {
    p.check()?;
    if p.kind == LayerKind::TransposedConv2d {
        return Err(Error::ShapeMismatch("transposed layer passed to conv2d".into()));
    }
    let [b, c, h, w] = x.dims4()?;
    if c != p.in_channels() {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, got {c}",
            p.in_channels()
        )));
    }
    let (k, pad, oc) = (p.kernel(), p.padding, p.out_channels());
    let (oh, ow) = conv_out_size(h, w, k, pad)?;
    let rows = c * k * k;
    let hw = oh * ow;
    let geom = Geom { c, h, w, k, pad, ow };
    let pointwise = is_pointwise(p);
    let ty = tile_rows(rows, oh, ow);
    let group = if pointwise { 1 } else { group_size(hw, b) };
    let mut out = Tensor::zeros(&[b, oc, oh, ow]);
    let xin = x.data();
    let wt = p.weight.data();
    let plane_in = c * h * w;
    if group > 1 {
        let ld = group * hw;
        let mut col = vec![0.0; rows * ld];
        let mut acc = vec![0.0; oc * ld];
        for (g0, o) in out.data_mut().chunks_mut(group * oc * hw).enumerate() {
            let n = o.len() / (oc * hw);
            let ld_n = n * hw;
            for j in 0..n {
                let s = g0 * group + j;
                im2col(&xin[s * plane_in..(s + 1) * plane_in], geom, 0, oh, &mut col, ld_n, j * hw);
            }
            gemm(oc, rows, ld_n, wt, false, &col[..rows * ld_n], false, 0.0, &mut acc[..oc * ld_n]);
            for j in 0..n {
                for (i, &bv) in p.bias.data().iter().enumerate() {
                    let src = &acc[i * ld_n + j * hw..i * ld_n + (j + 1) * hw];
                    let dst = &mut o[(j * oc + i) * hw..(j * oc + i + 1) * hw];
                    dst.iter_mut().zip(src).for_each(|(d, v)| *d = v + bv);
                }
            }
        }
        return Ok(out);
    }
    let mut col = vec![0.0; if pointwise { 0 } else { rows * ty * ow }];
    for (s, o) in out.data_mut().chunks_mut(oc * hw).enumerate() {
        let xs = &xin[s * plane_in..(s + 1) * plane_in];
        if pointwise {
            gemm(oc, rows, hw, wt, false, xs, false, 0.0, o);
        } else {
            for y0 in (0..oh).step_by(ty) {
                let y1 = (y0 + ty).min(oh);
                let cols = (y1 - y0) * ow;
                im2col(xs, geom, y0, y1, &mut col, cols, 0);
                gemm_strided(
                    oc,
                    rows,
                    cols,
                    (wt, rows as isize, 1),
                    (&col, cols as isize, 1),
                    0.0,
                    (&mut o[y0 * ow..], hw as isize, 1),
                );
            }
        }
        for (plane, &bv) in o.chunks_mut(hw).zip(p.bias.data()) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// Gradients of a conv layer; `input` is `None` when not requested.
#[derive(Debug, Clone)]
pub struct ConvBackward {
    pub input: Option<Tensor>,
    pub params: ParamGrads,
}

/// Exact gradients of [`conv2d_forward`] with respect to input, weights and bias.
pub fn conv2d_backward(x: &Tensor, p: &LayerParams, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv2d_backward_with(x, p, grad_out, true)?;
    Ok((g.input.expect("requested"), g.params.weight, g.params.bias))
}

pub fn conv2d_backward_with(
    x: &Tensor,
    p: &LayerParams,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvBackward> {
    p.check()?;
    let [b, c, h, w] = x.dims4()?;
    let (k, pad, oc) = (p.kernel(), p.padding, p.out_channels());
    let (oh, ow) = conv_out_size(h, w, k, pad)?;
    if c != p.in_channels() || grad_out.shape() != [b, oc, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "conv backward: input {:?}, grad {:?}, weight {:?}",
            x.shape(),
            grad_out.shape(),
            p.weight.shape()
        )));
    }
    let rows = c * k * k;
    let hw = oh * ow;
    let geom = Geom { c, h, w, k, pad, ow };
    let pointwise = is_pointwise(p);
    let ty = tile_rows(rows, oh, ow);
    let group = if pointwise { 1 } else { group_size(hw, b) };
    let mut gw = Tensor::zeros(p.weight.shape());
    let mut gb = Tensor::zeros(p.bias.shape());
    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    let xin = x.data();
    let gout = grad_out.data();
    let wt = p.weight.data();
    let plane_in = c * h * w;
    for s in 0..b {
        let gs = &gout[s * oc * hw..(s + 1) * oc * hw];
        for (o, gb) in gb.data_mut().iter_mut().enumerate() {
            *gb += gs[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
    }
    if group > 1 {
        let ld = group * hw;
        let mut col = vec![0.0; rows * ld];
        let mut gcol = vec![0.0; if need_input { rows * ld } else { 0 }];
        let mut gt = vec![0.0; oc * ld];
        for s0 in (0..b).step_by(group) {
            let n = group.min(b - s0);
            let ld_n = n * hw;
            for j in 0..n {
                let s = s0 + j;
                im2col(&xin[s * plane_in..(s + 1) * plane_in], geom, 0, oh, &mut col, ld_n, j * hw);
                for i in 0..oc {
                    gt[i * ld_n + j * hw..i * ld_n + (j + 1) * hw]
                        .copy_from_slice(&gout[(s * oc + i) * hw..(s * oc + i + 1) * hw]);
                }
            }
            let (col, gt) = (&col[..rows * ld_n], &gt[..oc * ld_n]);
            // dW[oc, rows] += G[oc, n*hw] * col[rows, n*hw]^T
            gemm(oc, ld_n, rows, gt, false, col, true, 1.0, gw.data_mut());
            if let Some(gx) = gx.as_mut() {
                gemm(rows, oc, ld_n, wt, true, gt, false, 0.0, &mut gcol[..rows * ld_n]);
                for j in 0..n {
                    let s = s0 + j;
                    col2im(&gcol, geom, 0, oh, &mut gx.data_mut()[s * plane_in..(s + 1) * plane_in], ld_n, j * hw);
                }
            }
        }
        return Ok(ConvBackward {
            input: gx,
            params: ParamGrads { weight: gw, bias: gb },
        });
    }
    let mut col = vec![0.0; if pointwise { 0 } else { rows * ty * ow }];
    let mut gcol = vec![0.0; if pointwise || !need_input { 0 } else { rows * ty * ow }];
    for s in 0..b {
        let xs = &xin[s * plane_in..(s + 1) * plane_in];
        let gs = &gout[s * oc * hw..(s + 1) * oc * hw];
        if pointwise {
            // dW[oc, c] += G[oc, hw] * X[c, hw]^T ; dX[c, hw] = W^T * G
            gemm(oc, hw, rows, gs, false, xs, true, 1.0, gw.data_mut());
            if let Some(gx) = gx.as_mut() {
                let gxs = &mut gx.data_mut()[s * plane_in..(s + 1) * plane_in];
                gemm(rows, oc, hw, wt, true, gs, false, 0.0, gxs);
            }
            continue;
        }
        for y0 in (0..oh).step_by(ty) {
            let y1 = (y0 + ty).min(oh);
            let cols = (y1 - y0) * ow;
            let g_tile = (&gs[y0 * ow..], hw as isize, 1);
            im2col(xs, geom, y0, y1, &mut col, cols, 0);
            // dW[oc, rows] += G_tile[oc, cols] * col[rows, cols]^T
            gemm_strided(oc, cols, rows, g_tile, (&col, 1, cols as isize), 1.0, (gw.data_mut(), rows as isize, 1));
            if let Some(gx) = gx.as_mut() {
                // dcol[rows, cols] = W^T[rows, oc] * G_tile[oc, cols]
                gemm_strided(rows, oc, cols, (wt, 1, rows as isize), g_tile, 0.0, (&mut gcol, cols as isize, 1));
                let gxs = &mut gx.data_mut()[s * plane_in..(s + 1) * plane_in];
                col2im(&gcol, geom, y0, y1, gxs, cols, 0);
            }
        }
    }
    Ok(ConvBackward {
        input: gx,
        params: ParamGrads { weight: gw, bias: gb },
    })
}

/// 2x2 stride-2 transposed convolution; output is twice the input size.
pub fn transposed_conv2x2_forward(x: &Tensor, p: &LayerParams) -> Result<Tensor> {
    p.check()?;
    if p.kind != LayerKind::TransposedConv2d {
        return Err(Error::ShapeMismatch("expected a transposed conv layer".into()));
    }
    let [b, c, h, w] = x.dims4()?;
    if c != p.in_channels() {
        return Err(Error::ShapeMismatch(format!(
            "transposed conv expects {} input channels, got {c}",
            p.in_channels()
        )));
    }
    let oc = p.out_channels();
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, oc, oh, ow]);
    let mut y = vec![0.0; oc * 4 * hw];
    for (s, o) in out.data_mut().chunks_mut(oc * oh * ow).enumerate() {
        let xs = &x.data()[s * c * hw..(s + 1) * c * hw];
        // Y[oc*4, hw] = W[c, oc*4]^T * X[c, hw]
        gemm(oc * 4, c, hw, p.weight.data(), true, xs, false, 0.0, &mut y);
        for o_ch in 0..oc {
            let bv = p.bias.data()[o_ch];
            let plane = &mut o[o_ch * oh * ow..(o_ch + 1) * oh * ow];
            for tap in 0..4 {
                let (dy, dx) = (tap / 2, tap % 2);
                let src = &y[(o_ch * 4 + tap) * hw..(o_ch * 4 + tap + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        plane[(2 * i + dy) * ow + 2 * j + dx] = src[i * w + j] + bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn transposed_conv2x2_backward(
    x: &Tensor,
    p: &LayerParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    p.check()?;
    let [b, c, h, w] = x.dims4()?;
    let oc = p.out_channels();
    let (oh, ow) = (2 * h, 2 * w);
    if c != p.in_channels() || grad_out.shape() != [b, oc, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "transposed conv backward: input {:?}, grad {:?}, weight {:?}",
            x.shape(),
            grad_out.shape(),
            p.weight.shape()
        )));
    }
    let hw = h * w;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(p.weight.shape());
    let mut gb = Tensor::zeros(p.bias.shape());
    let mut gy = vec![0.0; oc * 4 * hw];
    for s in 0..b {
        let gs = &grad_out.data()[s * oc * oh * ow..(s + 1) * oc * oh * ow];
        for o_ch in 0..oc {
            let plane = &gs[o_ch * oh * ow..(o_ch + 1) * oh * ow];
            gb.data_mut()[o_ch] += plane.iter().sum::<f64>();
            for tap in 0..4 {
                let (dy, dx) = (tap / 2, tap % 2);
                let dst = &mut gy[(o_ch * 4 + tap) * hw..(o_ch * 4 + tap + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        dst[i * w + j] = plane[(2 * i + dy) * ow + 2 * j + dx];
                    }
                }
            }
        }
        let xs = &x.data()[s * c * hw..(s + 1) * c * hw];
        // dX[c, hw] = W[c, oc*4] * GY[oc*4, hw]
        gemm(c, oc * 4, hw, p.weight.data(), false, &gy, false, 0.0, &mut gx.data_mut()[s * c * hw..(s + 1) * c * hw]);
        // dW[c, oc*4] += X[c, hw] * GY[oc*4, hw]^T
        gemm(c, hw, oc * 4, xs, false, &gy, true, 1.0, gw.data_mut());
    }
    Ok((gx, gw, gb))
}
