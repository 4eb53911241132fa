//! Max pooling with first-occurrence argmax routing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pooled output plus, for each output element, the flat input index that won.
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<Pooled> {
    let (c, h, w) = input.dims3("maxpool2d")?;
    if k == 0 || stride == 0 {
        return Err(Error::invalid("maxpool2d", "window and stride must be positive"));
    }
    if h < k || w < k {
        return Err(Error::invalid(
            "maxpool2d",
            format!("window {k}x{k} larger than input {h}x{w}"),
        ));
    }
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..k {
                    let row = (ch * h + oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        // strict comparison keeps the first maximum in row-major order
                        if x[row + kx] > best {
                            best = x[row + kx];
                            best_i = row + kx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(&[c, ho, wo], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        d[i] += g;
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_pools_to_last_element() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let p = maxpool2d(&x, 4, 4).unwrap();
        assert_eq!(p.output.data(), &[15.0]);
    }

    #[test]
    fn constant_input_gives_constant_output_and_first_argmax() {
        let x = Tensor::full(&[2, 8, 8], 0.25);
        let p = maxpool2d(&x, 4, 4).unwrap();
        assert!(p.output.data().iter().all(|&v| v == 0.25));
        // ties resolve to the top-left element of each window
        assert_eq!(p.argmax[..4], [0, 4, 32, 36]);
        let g = maxpool2d_backward(x.shape(), &p.argmax, &Tensor::full(&[2, 2, 2], 1.0));
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.data()[1], 0.0);
    }

    #[test]
    fn matches_window_scan() {
        let x = Tensor::from_fn(&[3, 16, 16], |i| ((i * 7919) % 101) as f64 / 101.0);
        let p = maxpool2d(&x, 4, 4).unwrap();
        for c in 0..3 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut m = f64::MIN;
                    for y in oy * 4..oy * 4 + 4 {
                        for xx in ox * 4..ox * 4 + 4 {
                            m = m.max(x.at3(c, y, xx));
                        }
                    }
                    assert_eq!(p.output.at3(c, oy, ox), m);
                }
            }
        }
    }

    #[test]
    fn window_larger_than_input_is_rejected() {
        assert!(maxpool2d(&Tensor::zeros(&[1, 3, 8]), 4, 4).is_err());
    }
}
