//! Windowed cosine attention over bilinearly sampled keys and values.
//!
//! For each query position `p` with sampling center `c(p)`, keys and values
//! are read at `c(p) + e` for every tap `e` of the window. Attention logits
//! are `cos(Q_p, K_e) * scale`, normalized by a softmax over the window, and
//! the output is the weighted sum of the sampled values.

use serde::{Deserialize, Serialize};

use super::{dot, norm, taps, to_channel_major, to_pixel_major, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape of the sampling window around the flow-displaced center.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowShape {
    /// All integer offsets with `max(|ex|, |ey|) <= (k-1)/2`; `k*k` taps.
    #[default]
    Square,
    /// All integer offsets with `|ex| + |ey| <= (k-1)/2`.
    Diamond,
}

impl WindowShape {
    /// Integer tap offsets `(dx, dy)` in row-major order.
    pub fn offsets(self, k: usize) -> Vec<(isize, isize)> {
        let r = (k / 2) as isize;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let keep = match self {
                    WindowShape::Square => true,
                    WindowShape::Diamond => dx.abs() + dy.abs() <= r,
                };
                if keep {
                    out.push((dx, dy));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub offsets: Vec<(isize, isize)>,
    /// Multiplier on the cosine logits (`1/sqrt(d)` for the projected dimension).
    pub scale: f64,
    pub eps: f64,
    pub padding: Padding,
}

pub struct AttentionOutput {
    pub output: Tensor,
    /// `[S, Hq, Wq]` softmax weights, one plane per window tap.
    pub weights: Tensor,
}

struct Dims {
    d: usize,
    hq: usize,
    wq: usize,
    h: usize,
    w: usize,
}

impl WindowAttention {
    pub fn new(k: usize, shape: WindowShape, dim: usize, padding: Padding) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::invalid(
                "flow_guided_attention",
                format!("kernel size must be odd and positive, got {k}"),
            ));
        }
        Ok(WindowAttention {
            offsets: shape.offsets(k),
            scale: 1.0 / (dim as f64).sqrt(),
            eps: super::softmax::COSINE_EPS,
            padding,
        })
    }

    fn dims(&self, q: &Tensor, k: &Tensor, v: &Tensor, centers: &Tensor) -> Result<Dims> {
        const OP: &str = "flow_guided_attention";
        let (d, hq, wq) = q.dims3(OP)?;
        let (dk, h, w) = k.dims3(OP)?;
        if k.shape() != v.shape() {
            return Err(Error::shape(OP, "value shape", format!("{:?}", k.shape()), format!("{:?}", v.shape())));
        }
        if dk != d {
            return Err(Error::shape(OP, "key channels", d, dk));
        }
        if centers.shape() != [2, hq, wq] {
            return Err(Error::shape(OP, "sampling centers", format!("[2, {hq}, {wq}]"), format!("{:?}", centers.shape())));
        }
        if !centers.is_finite() {
            return Err(Error::invalid(OP, "sampling centers contain non-finite values"));
        }
        if self.offsets.is_empty() {
            return Err(Error::invalid(OP, "empty sampling window"));
        }
        Ok(Dims { d, hq, wq, h, w })
    }

    pub fn forward(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        centers: &Tensor,
    ) -> Result<AttentionOutput> {
        let Dims { d, hq, wq, h, w } = self.dims(q, k, v, centers)?;
        let (nq, n) = (hq * wq, h * w);
        let s_count = self.offsets.len();
        let qt = to_pixel_major(q.data(), d, nq);
        let kt = to_pixel_major(k.data(), d, n);
        let vt = to_pixel_major(v.data(), d, n);
        let c = centers.data();
        let mut out = vec![0.0; nq * d];
        let mut weights = vec![0.0; s_count * nq];
        let mut ks = vec![0.0; d];
        let mut vs = vec![0.0; s_count * d];
        let mut logits = vec![0.0; s_count];
        for p in 0..nq {
            let qv = &qt[p * d..(p + 1) * d];
            let nqv = norm(qv).max(self.eps);
            for (s, &(ex, ey)) in self.offsets.iter().enumerate() {
                let t = taps(c[p] + ex as f64, c[nq + p] + ey as f64, h, w, self.padding);
                sample_into(&kt, d, &t, &mut ks);
                sample_into(&vt, d, &t, &mut vs[s * d..(s + 1) * d]);
                let nk = norm(&ks).max(self.eps);
                logits[s] = (dot(qv, &ks) / (nqv * nk)) * self.scale;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - m).exp();
                z += *l;
            }
            let o = &mut out[p * d..(p + 1) * d];
            for s in 0..s_count {
                let wgt = logits[s] / z;
                weights[s * nq + p] = wgt;
                for (oc, &vc) in o.iter_mut().zip(&vs[s * d..(s + 1) * d]) {
                    *oc += wgt * vc;
                }
            }
        }
        Ok(AttentionOutput {
            output: Tensor::new(&[d, hq, wq], to_channel_major(&out, d, nq))?,
            weights: Tensor::new(&[s_count, hq, wq], weights)?,
        })
    }

    /// Returns gradients for `(q, k, v, centers)`; the centers gradient is
    /// left at zero unless `need_centers`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        centers: &Tensor,
        weights: &Tensor,
        grad: &Tensor,
        need_centers: bool,
    ) -> Result<[Tensor; 4]> {
        let Dims { d, hq, wq, h, w } = self.dims(q, k, v, centers)?;
        let (nq, n) = (hq * wq, h * w);
        let s_count = self.offsets.len();
        let qt = to_pixel_major(q.data(), d, nq);
        let kt = to_pixel_major(k.data(), d, n);
        let vt = to_pixel_major(v.data(), d, n);
        let gt = to_pixel_major(grad.data(), d, nq);
        let (c, wts) = (centers.data(), weights.data());
        let mut gq = vec![0.0; nq * d];
        let mut gk = vec![0.0; n * d];
        let mut gv = vec![0.0; n * d];
        let mut gc = vec![0.0; 2 * nq];
        let mut ks = vec![0.0; s_count * d];
        let mut vs = vec![0.0; s_count * d];
        let mut all_taps = Vec::with_capacity(s_count);
        let mut gw = vec![0.0; s_count];
        let mut gks = vec![0.0; d];
        let mut gvs = vec![0.0; d];
        for p in 0..nq {
            let qv = &qt[p * d..(p + 1) * d];
            let go = &gt[p * d..(p + 1) * d];
            let rq = norm(qv);
            let nqv = rq.max(self.eps);
            all_taps.clear();
            for (s, &(ex, ey)) in self.offsets.iter().enumerate() {
                let t = taps(c[p] + ex as f64, c[nq + p] + ey as f64, h, w, self.padding);
                sample_into(&kt, d, &t, &mut ks[s * d..(s + 1) * d]);
                sample_into(&vt, d, &t, &mut vs[s * d..(s + 1) * d]);
                gw[s] = dot(go, &vs[s * d..(s + 1) * d]);
                all_taps.push(t);
            }
            let mean: f64 = (0..s_count).map(|s| wts[s * nq + p] * gw[s]).sum();
            let mut q_radial = 0.0;
            let gqp = &mut gq[p * d..(p + 1) * d];
            let (mut gcx, mut gcy) = (0.0, 0.0);
            for (s, t) in all_taps.iter().enumerate() {
                let wgt = wts[s * nq + p];
                let gcos = wgt * (gw[s] - mean) * self.scale;
                let kv = &ks[s * d..(s + 1) * d];
                let rk = norm(kv);
                let nk = rk.max(self.eps);
                let inv = 1.0 / (nqv * nk);
                let cos = dot(qv, kv) * inv;
                if rq > self.eps {
                    q_radial += gcos * cos / (nqv * nqv);
                }
                let k_radial = if rk > self.eps { gcos * cos / (nk * nk) } else { 0.0 };
                let a = gcos * inv;
                for ch in 0..d {
                    gqp[ch] += a * kv[ch];
                    gks[ch] = a * qv[ch] - k_radial * kv[ch];
                    gvs[ch] = wgt * go[ch];
                }
                for j in 0..4 {
                    let base = t.idx[j] * d;
                    let tw = t.w[j];
                    if tw != 0.0 {
                        for (g, &v) in gk[base..base + d].iter_mut().zip(&gks) {
                            *g += tw * v;
                        }
                        for (g, &v) in gv[base..base + d].iter_mut().zip(&gvs) {
                            *g += tw * v;
                        }
                    }
                    let (tdx, tdy) = (t.dx[j], t.dy[j]);
                    if need_centers && (tdx != 0.0 || tdy != 0.0) {
                        let both = dot(&kt[base..base + d], &gks) + dot(&vt[base..base + d], &gvs);
                        gcx += tdx * both;
                        gcy += tdy * both;
                    }
                }
            }
            for (g, &qc) in gqp.iter_mut().zip(qv) {
                *g -= q_radial * qc;
            }
            gc[p] = gcx;
            gc[nq + p] = gcy;
        }
        Ok([
            Tensor::new(q.shape(), to_channel_major(&gq, d, nq))?,
            Tensor::new(k.shape(), to_channel_major(&gk, d, n))?,
            Tensor::new(v.shape(), to_channel_major(&gv, d, n))?,
            Tensor::new(centers.shape(), gc)?,
        ])
    }
}

fn sample_into(src: &[f64], d: usize, t: &super::Taps, out: &mut [f64]) {
    let r0 = &src[t.idx[0] * d..t.idx[0] * d + d];
    let r1 = &src[t.idx[1] * d..t.idx[1] * d + d];
    let r2 = &src[t.idx[2] * d..t.idx[2] * d + d];
    let r3 = &src[t.idx[3] * d..t.idx[3] * d + d];
    for ch in 0..d {
        out[ch] = t.w[0] * r0[ch] + t.w[1] * r1[ch] + t.w[2] * r2[ch] + t.w[3] * r3[ch];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sample::grid_plus;

    #[test]
    fn window_tap_counts() {
        assert_eq!(WindowShape::Square.offsets(7).len(), 49);
        assert_eq!(WindowShape::Diamond.offsets(7).len(), 25);
        assert_eq!(WindowShape::Diamond.offsets(1), vec![(0, 0)]);
    }

    #[test]
    fn single_tap_returns_value_at_center() {
        let q = Tensor::from_fn(&[3, 4, 5], |i| (i as f64 * 0.7).sin());
        let k = Tensor::from_fn(&[3, 4, 5], |i| (i as f64 * 1.3).cos());
        let v = Tensor::from_fn(&[3, 4, 5], |i| (i as f64 * 0.2).sin());
        let att = WindowAttention::new(1, WindowShape::Square, 3, Padding::Border).unwrap();
        let out = att.forward(&q, &k, &v, &grid_plus(4, 5, None)).unwrap();
        assert_eq!(out.output, v);
        assert!(out.weights.data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(WindowAttention::new(4, WindowShape::Square, 8, Padding::Border).is_err());
    }
}
