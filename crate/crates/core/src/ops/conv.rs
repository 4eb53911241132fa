//! Direct 2-D cross-correlation over `[C, H, W]` inputs.

use super::gemm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c_in, h, w) = input.dims3("conv2d")?;
        let (c_out, wc, kh, kw) = match weight.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape("conv2d", "weight rank", 4, weight.rank())),
        };
        if wc != c_in {
            return Err(Error::shape("conv2d", "input channels (weight dim 1)", c_in, wc));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", "kernel width", kh, kw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let k = kh;
        if h + 2 * padding < k {
            return Err(Error::shape("conv2d", "height", format!(">= {}", k), h + 2 * padding));
        }
        if w + 2 * padding < k {
            return Err(Error::shape("conv2d", "width", format!(">= {}", k), w + 2 * padding));
        }
        Ok(ConvGeometry {
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (w + 2 * padding - k) / stride + 1,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + kx - padding` is in range.
    fn ox_range(&self, kx: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let kx = kx as isize;
        let lo = (p - kx + s - 1).div_euclid(s).max(0) as usize;
        let hi = ((self.w as isize - 1 + p - kx).div_euclid(s) + 1).clamp(0, self.w_out as isize)
            as usize;
        lo..hi.max(lo)
    }

    fn iy(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    fn ix(&self, ox: usize, kx: usize) -> usize {
        ox * self.stride + kx - self.padding
    }
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    /// Visits every unfolded row `r`, output row `oy`, the input span it reads
    /// from and the output columns it covers.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, std::ops::Range<usize>, std::ops::Range<usize>)) {
        for ci in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let range = self.ox_range(kx);
                    if range.is_empty() {
                        continue;
                    }
                    let ix0 = self.ix(range.start, kx);
                    for oy in 0..self.h_out {
                        if let Some(iy) = self.iy(oy, ky) {
                            let row = ci * self.h * self.w + iy * self.w;
                            f(r, oy, row + ix0..row + self.w, range.clone());
                        }
                    }
                }
            }
        }
    }

    /// Unfolds the input into a `[C_in*k*k, H_out*W_out]` matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (p, s) = (self.cols(), self.stride);
        let mut col = vec![0.0; self.rows() * p];
        self.for_each_row(|r, oy, span, range| {
            let dst = &mut col[r * p + oy * self.w_out + range.start..r * p + oy * self.w_out + range.end];
            for (d, &v) in dst.iter_mut().zip(x[span].iter().step_by(s)) {
                *d = v;
            }
        });
        col
    }

    /// Adds the unfolded matrix back onto an input-shaped buffer.
    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let (p, s) = (self.cols(), self.stride);
        self.for_each_row(|r, oy, span, range| {
            let src = &col[r * p + oy * self.w_out + range.start..r * p + oy * self.w_out + range.end];
            for (d, &v) in x[span].iter_mut().step_by(s).zip(src) {
                *d += v;
            }
        });
    }
}

pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weight, stride, padding)?;
    let owned;
    let col = if g.is_pointwise() {
        input.data()
    } else {
        owned = g.im2col(input.data());
        &owned
    };
    let mut out = vec![0.0; g.c_out * g.cols()];
    gemm(g.c_out, g.rows(), g.cols(), weight.data(), false, col, false, &mut out);
    Tensor::new(&[g.c_out, g.h_out, g.w_out], out)
}

/// Returns `(d input, d weight)` for upstream gradient `grad` of the output.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad: &Tensor,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeometry::new(input, weight, stride, padding)?;
    if grad.shape() != [g.c_out, g.h_out, g.w_out] {
        return Err(Error::shape(
            "conv2d",
            "output gradient",
            format!("[{}, {}, {}]", g.c_out, g.h_out, g.w_out),
            format!("{:?}", grad.shape()),
        ));
    }
    let (rows, cols) = (g.rows(), g.cols());
    let gw = if need_weight {
        let owned;
        let col = if g.is_pointwise() {
            input.data()
        } else {
            owned = g.im2col(input.data());
            &owned
        };
        let mut gw = vec![0.0; weight.len()];
        gemm(g.c_out, cols, rows, grad.data(), false, col, true, &mut gw);
        Some(Tensor::new(weight.shape(), gw)?)
    } else {
        None
    };
    let gx = if need_input {
        let mut gcol = vec![0.0; rows * cols];
        gemm(rows, g.c_out, cols, weight.data(), true, grad.data(), false, &mut gcol);
        let gx = if g.is_pointwise() {
            gcol
        } else {
            let mut gx = vec![0.0; input.len()];
            g.col2im(&gcol, &mut gx);
            gx
        };
        Some(Tensor::new(input.shape(), gx)?)
    } else {
        None
    };
    Ok((gx, gw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (ci_n, h, wd) = x.dims3("t").unwrap();
        let (co_n, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[co_n, ho, wo]);
        for co in 0..co_n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..ci_n {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.at3(ci, iy as usize, ix as usize)
                                    * w.data()[((co * ci_n + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.set3(co, oy, ox, s);
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 5, 6], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::full(&[1, 4, 4], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.at3(0, 1, 1), 9.0);
        assert_eq!(y.at3(0, 2, 2), 9.0);
        assert_eq!(y.at3(0, 0, 0), 4.0);
        assert_eq!(y.at3(0, 3, 3), 4.0);
        assert_eq!(y.at3(0, 0, 1), 6.0);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(ci, co, h, w, k, s, p) in &[
            (3, 4, 8, 8, 3, 1, 1),
            (4, 8, 16, 16, 3, 2, 1),
            (2, 3, 9, 7, 5, 1, 2),
            (4, 4, 16, 16, 3, 1, 0),
            (3, 2, 11, 10, 3, 3, 1),
        ] {
            let x = random(&[ci, h, w], &mut rng);
            let wt = random(&[co, ci, k, k], &mut rng);
            let fast = conv2d(&x, &wt, s, p).unwrap();
            let slow = naive(&x, &wt, s, p);
            assert_eq!(fast.shape(), slow.shape());
            let err = fast
                .data()
                .iter()
                .zip(slow.data())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-10, "err {err}");
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(&[3, 8, 8]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &w, 1, 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
    }
}
