//! Contextual loss between two feature sets.
//!
//! Features are the `C`-vectors at each spatial position of `[C, H, W]`
//! maps. With cosine distances `d_ij` between source feature `i` and target
//! feature `j`:
//!
//! ```text
//! d~_ij = d_ij / (min_k d_ik + eps)
//! w_ij  = exp((1 - d~_ij) / h)
//! CX_ij = w_ij / sum_k w_ik
//! loss  = -ln( (1/m) * sum_j max_i CX_ij )
//! ```

use serde::{Deserialize, Serialize};

use super::softmax::COSINE_EPS;
use super::{dot, gemm, norm, to_pixel_major};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const OP: &str = "contextual_loss";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextualParams {
    pub bandwidth: f64,
    pub eps: f64,
    /// Larger maps are subsampled on a regular spatial stride down to this count.
    pub max_features: usize,
}

impl Default for ContextualParams {
    fn default() -> Self {
        ContextualParams {
            bandwidth: 0.5,
            eps: 1e-5,
            max_features: 1024,
        }
    }
}

/// Flat spatial positions kept after strided subsampling.
pub fn select_positions(h: usize, w: usize, max: usize) -> Vec<usize> {
    let mut stride = 1;
    while h.div_ceil(stride) * w.div_ceil(stride) > max.max(1) {
        stride += 1;
    }
    let mut out = Vec::new();
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            out.push(y * w + x);
        }
    }
    out
}

struct Features {
    positions: Vec<usize>,
    /// Unit vectors, `[n, C]`.
    unit: Vec<f64>,
    norms: Vec<f64>,
}

fn features(t: &Tensor, params: &ContextualParams) -> Result<Features> {
    let (c, h, w) = t.dims3(OP)?;
    let positions = select_positions(h, w, params.max_features);
    let all = to_pixel_major(t.data(), c, h * w);
    let mut unit = Vec::with_capacity(positions.len() * c);
    let mut norms = Vec::with_capacity(positions.len());
    for &p in &positions {
        let f = &all[p * c..(p + 1) * c];
        let n = norm(f);
        let denom = n.max(COSINE_EPS);
        unit.extend(f.iter().map(|v| v / denom));
        norms.push(n);
    }
    Ok(Features {
        positions,
        unit,
        norms,
    })
}

struct Forward {
    x: Features,
    y: Features,
    /// Cosine distances `[n, m]`.
    dist: Vec<f64>,
    /// Row-normalized contextual similarities `[n, m]`.
    cx: Vec<f64>,
    row_min: Vec<(usize, f64)>,
    col_max: Vec<usize>,
    total: f64,
}

/// Sum of values in `[0, 1]` accumulated in 64-bit fixed point, so the
/// result does not depend on their order.
fn unit_sum(values: &[f64]) -> f64 {
    const ONE: f64 = (1u128 << 64) as f64;
    let acc: u128 = values.iter().map(|&v| (v * ONE) as u128).sum();
    acc as f64 / ONE
}

fn forward_full(x: &Tensor, y: &Tensor, params: &ContextualParams) -> Result<Forward> {
    if x.rank() != 3 || y.rank() != 3 || x.shape()[0] != y.shape()[0] {
        return Err(Error::shape(
            OP,
            "feature channels",
            format!("{:?}", x.shape()),
            format!("{:?}", y.shape()),
        ));
    }
    let c = x.shape()[0];
    let fx = features(x, params)?;
    let fy = features(y, params)?;
    let (n, m) = (fx.positions.len(), fy.positions.len());
    let mut dist = vec![0.0; n * m];
    gemm(n, c, m, &fx.unit, false, &fy.unit, true, &mut dist);
    dist.iter_mut().for_each(|d| *d = 1.0 - *d);
    let mut cx = vec![0.0; n * m];
    let mut row_min = Vec::with_capacity(n);
    for i in 0..n {
        let row = &dist[i * m..(i + 1) * m];
        let (kmin, dmin) = row
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |b, (k, &v)| if v < b.1 { (k, v) } else { b });
        row_min.push((kmin, dmin));
        let denom = dmin + params.eps;
        let out = &mut cx[i * m..(i + 1) * m];
        // the row maximum of (1 - d~)/h is attained at kmin
        let amax = (1.0 - dmin / denom) / params.bandwidth;
        for (o, &d) in out.iter_mut().zip(row) {
            *o = ((1.0 - d / denom) / params.bandwidth - amax).exp();
        }
        let z = unit_sum(out);
        out.iter_mut().for_each(|o| *o /= z);
    }
    let mut col_max = Vec::with_capacity(m);
    let mut maxima = Vec::with_capacity(m);
    for j in 0..m {
        let (imax, v) = (0..n).fold((0, f64::NEG_INFINITY), |b, i| {
            if cx[i * m + j] > b.1 {
                (i, cx[i * m + j])
            } else {
                b
            }
        });
        col_max.push(imax);
        maxima.push(v);
    }
    let total = unit_sum(&maxima);
    Ok(Forward {
        x: fx,
        y: fy,
        dist,
        cx,
        row_min,
        col_max,
        total,
    })
}

pub fn contextual_loss(x: &Tensor, y: &Tensor, params: &ContextualParams) -> Result<f64> {
    let f = forward_full(x, y, params)?;
    let m = f.y.positions.len() as f64;
    Ok(-(f.total / m).ln())
}

/// Gradients of the loss with respect to `x` and `y`.
pub fn contextual_loss_backward(
    x: &Tensor,
    y: &Tensor,
    params: &ContextualParams,
    grad: f64,
) -> Result<(Tensor, Tensor)> {
    let f = forward_full(x, y, params)?;
    let c = x.shape()[0];
    let (n, m) = (f.x.positions.len(), f.y.positions.len());
    let h = params.bandwidth;
    let g_total = -grad / f.total;

    // dL/dCX is nonzero only at each column's winning row.
    let mut winners: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (j, &i) in f.col_max.iter().enumerate() {
        winners[i].push(j);
    }

    // dL/d(cos) for every pair; cos = 1 - d.
    let mut gcos = vec![0.0; n * m];
    let mut ga = vec![0.0; m];
    for i in 0..n {
        let cx = &f.cx[i * m..(i + 1) * m];
        let r: f64 = winners[i].iter().map(|&j| g_total * cx[j]).sum();
        for (k, g) in ga.iter_mut().enumerate() {
            *g = -cx[k] * r;
        }
        for &j in &winners[i] {
            ga[j] += cx[j] * g_total;
        }
        let (kmin, dmin) = f.row_min[i];
        let denom = dmin + params.eps;
        let row = &f.dist[i * m..(i + 1) * m];
        let mut through_min = 0.0;
        for k in 0..m {
            let gd = -ga[k] / (h * denom);
            through_min += ga[k] * row[k] / (h * denom * denom);
            gcos[i * m + k] = -gd;
        }
        gcos[i * m + kmin] -= through_min;
    }

    let mut gx_unit = vec![0.0; n * c];
    let mut gy_unit = vec![0.0; m * c];
    gemm(n, m, c, &gcos, false, &f.y.unit, false, &mut gx_unit);
    gemm(m, n, c, &gcos, true, &f.x.unit, false, &mut gy_unit);
    Ok((
        scatter_through_normalize(x, &f.x, &gx_unit)?,
        scatter_through_normalize(y, &f.y, &gy_unit)?,
    ))
}

/// Chains gradients on unit vectors back to raw features.
fn scatter_through_normalize(t: &Tensor, f: &Features, g_unit: &[f64]) -> Result<Tensor> {
    let (c, h, w) = t.dims3(OP)?;
    let hw = h * w;
    let mut g = vec![0.0; c * hw];
    for (i, &p) in f.positions.iter().enumerate() {
        let u = &f.unit[i * c..(i + 1) * c];
        let gu = &g_unit[i * c..(i + 1) * c];
        let n = f.norms[i];
        if n > COSINE_EPS {
            let radial = dot(gu, u);
            for ch in 0..c {
                g[ch * hw + p] = (gu[ch] - radial * u[ch]) / n;
            }
        } else {
            for ch in 0..c {
                g[ch * hw + p] = gu[ch] / COSINE_EPS;
            }
        }
    }
    Tensor::new(t.shape(), g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsampling_respects_cap() {
        assert_eq!(select_positions(32, 32, 1024).len(), 1024);
        let p = select_positions(64, 64, 1024);
        assert!(p.len() <= 1024);
        assert_eq!(p.len(), 1024);
        assert!(select_positions(33, 33, 1024).len() <= 1024);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let a = Tensor::zeros(&[3, 2, 2]);
        let b = Tensor::zeros(&[4, 2, 2]);
        assert!(contextual_loss(&a, &b, &ContextualParams::default()).is_err());
    }

    #[test]
    fn identical_distinct_features_are_near_zero() {
        let x = Tensor::from_fn(&[4, 3, 3], |i| ((i * 17 % 11) as f64 - 5.0) / 5.0 + 0.01 * i as f64);
        let l = contextual_loss(&x, &x, &ContextualParams::default()).unwrap();
        assert!(l >= 0.0 && l < 1e-6, "{l}");
    }
}
