use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Masked mean squared error over `[b, c, h, w]` tensors.
///
/// `mask` covers the `h*w` cells and is broadcast over batch and channels.
/// Returns the loss and its gradient (zero at masked-out cells).
pub fn mse_loss(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<(f64, Tensor)> {
    let [b, c, h, w] = pred.dims4()?;
    if pred.shape() != target.shape() || mask.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "mse: pred {:?}, target {:?}, mask {}",
            pred.shape(),
            target.shape(),
            mask.len()
        )));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::EmptyMask);
    }
    let n = (b * c * valid) as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    let (p, t) = (pred.data(), target.data());
    for plane in 0..b * c {
        for (cell, &m) in mask.iter().enumerate() {
            if m {
                let k = plane * h * w + cell;
                let d = p[k] - t[k];
                sum += d * d;
                grad.data_mut()[k] = 2.0 * d / n;
            }
        }
    }
    Ok((sum / n, grad))
}
