use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Passes `grad_out` where `x > 0`. `x` may be the pre- or post-activation.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch(format!(
            "relu backward: {:?} vs {:?}",
            x.shape(),
            grad_out.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Channel-axis concatenation `[a; b]` of two `[b, c, h, w]` tensors.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [na, ca, ha, wa] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::ShapeMismatch(format!(
            "concat: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let hw = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for s in 0..na {
        data.extend_from_slice(&a.data()[s * ca * hw..(s + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[s * cb * hw..(s + 1) * cb * hw]);
    }
    Tensor::new(vec![na, ca + cb, ha, wa], data)
}

/// Splits channels `[0, first)` and `[first, c)`; the inverse of [`concat_channels`].
pub fn split_channels(x: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = x.dims4()?;
    if first > c {
        return Err(Error::ShapeMismatch(format!("cannot split {c} channels at {first}")));
    }
    let hw = h * w;
    let mut a = Vec::with_capacity(n * first * hw);
    let mut b = Vec::with_capacity(n * (c - first) * hw);
    for s in 0..n {
        let sample = &x.data()[s * c * hw..(s + 1) * c * hw];
        a.extend_from_slice(&sample[..first * hw]);
        b.extend_from_slice(&sample[first * hw..]);
    }
    Ok((
        Tensor::new(vec![n, first, h, w], a)?,
        Tensor::new(vec![n, c - first, h, w], b)?,
    ))
}
