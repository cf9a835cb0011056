use super::tensor::Tensor;
use crate::error::{Error, Result};

/// 2x2 non-overlapping max pooling.
///
/// Returns the pooled tensor and, per output value, the flat index of the
/// winning input element. Ties go to the first element in row-major order.
pub fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [b, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddDimension { h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut idx = vec![0usize; b * c * oh * ow];
    let xd = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * i + dy) * w + 2 * j + dx;
                    if xd[k] > xd[best] {
                        best = k;
                    }
                }
                let o = (plane * oh + i) * ow + j;
                out.data_mut()[o] = xd[best];
                idx[o] = best;
            }
        }
    }
    Ok((out, idx))
}

/// Routes each output gradient to its recorded winner.
pub fn maxpool2x2_backward(indices: &[usize], grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    if indices.len() != grad_out.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pool indices for {} gradients",
            indices.len(),
            grad_out.len()
        )));
    }
    let mut gx = Tensor::zeros(input_shape);
    for (&k, &g) in indices.iter().zip(grad_out.data()) {
        let slot = gx
            .data_mut()
            .get_mut(k)
            .ok_or_else(|| Error::ShapeMismatch(format!("pool index {k} out of range")))?;
        *slot += g;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_grad, random_tensor};

    #[test]
    fn single_window() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn ties_pick_first_scanned() {
        let x = Tensor::full(&[1, 2, 4, 4], 0.5);
        let (_, idx) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(&idx[..4], &[0, 2, 8, 10]);
        assert_eq!(idx[4], 16);
    }

    #[test]
    fn odd_sizes_rejected() {
        let x = Tensor::zeros(&[1, 1, 3, 4]);
        assert!(matches!(maxpool2x2_forward(&x), Err(Error::OddDimension { .. })));
    }

    #[test]
    fn matches_window_oracle() {
        for seed in 0..20 {
            let x = random_tensor(&[2, 3, 4, 6], seed);
            let (y, _) = maxpool2x2_forward(&x).unwrap();
            for p in 0..6 {
                for i in 0..2 {
                    for j in 0..3 {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(x.data()[p * 24 + (2 * i + dy) * 6 + 2 * j + dx]);
                            }
                        }
                        assert_eq!(y.data()[p * 6 + i * 3 + j], m);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_conserves_mass_and_matches_fd() {
        let x = random_tensor(&[2, 2, 4, 4], 9);
        let (y, idx) = maxpool2x2_forward(&x).unwrap();
        let g = random_tensor(y.shape(), 10);
        let gx = maxpool2x2_backward(&idx, &g, x.shape()).unwrap();
        assert!((gx.sum() - g.sum()).abs() <= 1e-12);
        check_grad(&x, &gx, |t| {
            let (y, _) = maxpool2x2_forward(t).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        });
    }
}
