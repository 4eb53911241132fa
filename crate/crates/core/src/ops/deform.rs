//! Deformable convolution with a per-pixel guiding flow.
//!
//! Output pixel `p` reads tap `(ky, kx)` of the `k x k` kernel at
//! `p + (kx - r, ky - r) + flow(p) + offset_t(p)`, where `r = (k-1)/2` and
//! `t = ky*k + kx`. Offset channel `2t` is the horizontal component and
//! channel `2t + 1` the vertical one. Stride is 1 and the output has the
//! input's spatial extent.

use super::{gemm, taps, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const OP: &str = "deformable_conv";

#[derive(Clone, Copy, Debug)]
pub struct DeformConv {
    pub k: usize,
    pub padding: Padding,
}

struct Dims {
    c: usize,
    co: usize,
    h: usize,
    w: usize,
    taps: usize,
}

impl DeformConv {
    pub fn new(k: usize, padding: Padding) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::invalid(OP, format!("kernel size must be odd, got {k}")));
        }
        Ok(DeformConv { k, padding })
    }

    fn dims(&self, x: &Tensor, offsets: &Tensor, flow: &Tensor, weight: &Tensor) -> Result<Dims> {
        let (c, h, w) = x.dims3(OP)?;
        let kk = self.k * self.k;
        if offsets.shape() != [2 * kk, h, w] {
            return Err(Error::shape(
                OP,
                "offsets",
                format!("[{}, {h}, {w}]", 2 * kk),
                format!("{:?}", offsets.shape()),
            ));
        }
        if flow.shape() != [2, h, w] {
            return Err(Error::shape(OP, "flow", format!("[2, {h}, {w}]"), format!("{:?}", flow.shape())));
        }
        match weight.shape()[..] {
            [co, ci, a, b] if ci == c && a == self.k && b == self.k => Ok(Dims { c, co, h, w, taps: kk }),
            _ => Err(Error::shape(
                OP,
                "weight",
                format!("[C_out, {c}, {}, {}]", self.k, self.k),
                format!("{:?}", weight.shape()),
            )),
        }
    }

    fn position(&self, p: usize, t: usize, w: usize, n: usize, off: &[f64], flow: &[f64]) -> (f64, f64) {
        let r = (self.k / 2) as f64;
        let (ky, kx) = (t / self.k, t % self.k);
        let (y, x) = (p / w, p % w);
        (
            x as f64 + kx as f64 - r + flow[p] + off[2 * t * n + p],
            y as f64 + ky as f64 - r + flow[n + p] + off[(2 * t + 1) * n + p],
        )
    }

    /// Sampled columns `[C * K^2, H * W]`, row index `ci * K^2 + t`.
    fn columns(&self, x: &Tensor, offsets: &Tensor, flow: &Tensor, dm: &Dims) -> Vec<f64> {
        let n = dm.h * dm.w;
        let (xd, off, fl) = (x.data(), offsets.data(), flow.data());
        let mut cols = vec![0.0; dm.c * dm.taps * n];
        for t in 0..dm.taps {
            for p in 0..n {
                let (sx, sy) = self.position(p, t, dm.w, n, off, fl);
                let tp = taps(sx, sy, dm.h, dm.w, self.padding);
                for ci in 0..dm.c {
                    let plane = &xd[ci * n..(ci + 1) * n];
                    cols[(ci * dm.taps + t) * n + p] = tp.w[0] * plane[tp.idx[0]]
                        + tp.w[1] * plane[tp.idx[1]]
                        + tp.w[2] * plane[tp.idx[2]]
                        + tp.w[3] * plane[tp.idx[3]];
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Tensor, offsets: &Tensor, flow: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let dm = self.dims(x, offsets, flow, weight)?;
        let n = dm.h * dm.w;
        let rows = dm.c * dm.taps;
        let cols = self.columns(x, offsets, flow, &dm);
        let mut out = vec![0.0; dm.co * n];
        gemm(dm.co, rows, n, weight.data(), false, &cols, false, &mut out);
        Tensor::new(&[dm.co, dm.h, dm.w], out)
    }

    /// Returns gradients for `(x, offsets, flow, weight)`.
    pub fn backward(
        &self,
        x: &Tensor,
        offsets: &Tensor,
        flow: &Tensor,
        weight: &Tensor,
        grad: &Tensor,
    ) -> Result<[Tensor; 4]> {
        let dm = self.dims(x, offsets, flow, weight)?;
        let n = dm.h * dm.w;
        let rows = dm.c * dm.taps;
        let cols = self.columns(x, offsets, flow, &dm);
        let mut gw = vec![0.0; weight.len()];
        let mut gcols = vec![0.0; rows * n];
        gemm(dm.co, n, rows, grad.data(), false, &cols, true, &mut gw);
        gemm(rows, dm.co, n, weight.data(), true, grad.data(), false, &mut gcols);
        let (xd, off, fl) = (x.data(), offsets.data(), flow.data());
        let mut gx = vec![0.0; xd.len()];
        let mut goff = vec![0.0; off.len()];
        let mut gflow = vec![0.0; fl.len()];
        for t in 0..dm.taps {
            for p in 0..n {
                let (sx, sy) = self.position(p, t, dm.w, n, off, fl);
                let tp = taps(sx, sy, dm.h, dm.w, self.padding);
                let (mut gpx, mut gpy) = (0.0, 0.0);
                for ci in 0..dm.c {
                    let gc = gcols[(ci * dm.taps + t) * n + p];
                    if gc == 0.0 {
                        continue;
                    }
                    let base = ci * n;
                    for j in 0..4 {
                        let v = xd[base + tp.idx[j]];
                        gx[base + tp.idx[j]] += tp.w[j] * gc;
                        gpx += tp.dx[j] * v * gc;
                        gpy += tp.dy[j] * v * gc;
                    }
                }
                goff[2 * t * n + p] += gpx;
                goff[(2 * t + 1) * n + p] += gpy;
                gflow[p] += gpx;
                gflow[n + p] += gpy;
            }
        }
        Ok([
            Tensor::new(x.shape(), gx)?,
            Tensor::new(offsets.shape(), goff)?,
            Tensor::new(flow.shape(), gflow)?,
            Tensor::new(weight.shape(), gw)?,
        ])
    }
}

/// `[C, C, k, k]` kernel whose center tap is the identity and all else zero.
pub fn center_identity(c: usize, k: usize) -> Tensor {
    let mut w = Tensor::zeros(&[c, c, k, k]);
    let center = (k / 2) * k + k / 2;
    for i in 0..c {
        w.data_mut()[(i * c + i) * k * k + center] = 1.0;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| ((i * 37 % 23) as f64 / 23.0) - 0.5)
    }

    #[test]
    fn identity_degeneracy_is_bit_exact() {
        let x = feature(4, 6, 7);
        let dc = DeformConv::new(3, Padding::Border).unwrap();
        let y = dc
            .forward(&x, &Tensor::zeros(&[18, 6, 7]), &Tensor::zeros(&[2, 6, 7]), &center_identity(4, 3))
            .unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn integer_flow_shifts_with_border_clamp() {
        let x = feature(2, 5, 6);
        let dc = DeformConv::new(3, Padding::Border).unwrap();
        let mut flow = Tensor::zeros(&[2, 5, 6]);
        flow.data_mut()[..30].iter_mut().for_each(|v| *v = 1.0);
        let y = dc
            .forward(&x, &Tensor::zeros(&[18, 5, 6]), &flow, &center_identity(2, 3))
            .unwrap();
        for c in 0..2 {
            for yy in 0..5 {
                for xx in 0..6 {
                    assert_eq!(y.at3(c, yy, xx), x.at3(c, yy, (xx + 1).min(5)));
                }
            }
        }
    }

    #[test]
    fn rejects_wrong_offset_channels() {
        let x = feature(2, 5, 6);
        let dc = DeformConv::new(3, Padding::Border).unwrap();
        let r = dc.forward(&x, &Tensor::zeros(&[9, 5, 6]), &Tensor::zeros(&[2, 5, 6]), &center_identity(2, 3));
        assert!(r.unwrap_err().to_string().contains("offsets"));
    }
}
