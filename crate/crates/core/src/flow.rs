//! Coarse optical flow between adjacent frames.
//!
//! A flow field is `[2, H, W]` with channel 0 horizontal. A forward field
//! lives on frame `t-1`'s grid and points to where each pixel lands in frame
//! `t`; a backward field lives on frame `t`'s grid and points into `t-1`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze::FrameSequence;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    /// Exact displacements recorded at synthesis time.
    Truth,
    /// Integer block matching followed by box smoothing.
    #[default]
    Blockmatch,
    /// Tensor files on disk.
    File,
}

impl std::str::FromStr for FlowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" => Ok(FlowKind::Truth),
            "blockmatch" => Ok(FlowKind::Blockmatch),
            "file" => Ok(FlowKind::File),
            _ => Err(Error::invalid("flow", format!("unknown flow kind `{s}`"))),
        }
    }
}

/// Forward and backward flow between frames `t-1` and `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub fw: Tensor,
    pub bw: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockMatchParams {
    pub block: usize,
    pub radius: usize,
    /// Half-width of the box filter applied to the blocky field.
    pub smooth: usize,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        BlockMatchParams {
            block: 8,
            radius: 8,
            smooth: 8,
        }
    }
}

/// Constant field `(dx, dy)` over `h x w`.
pub fn constant_flow(h: usize, w: usize, dx: f64, dy: f64) -> Tensor {
    Tensor::from_fn(&[2, h, w], |i| if i < h * w { dx } else { dy })
}

/// Flows for a camera whose view of frame `t` sits at `offsets[t]` on a
/// static canvas.
pub fn truth_flows(offsets: &[(f64, f64)], h: usize, w: usize) -> Vec<FlowPair> {
    offsets
        .windows(2)
        .map(|o| {
            let (dx, dy) = (o[1].0 - o[0].0, o[1].1 - o[0].1);
            FlowPair {
                fw: constant_flow(h, w, -dx, -dy),
                bw: constant_flow(h, w, dx, dy),
            }
        })
        .collect()
}

/// Mean absolute difference between the block of `from` at `(x0, y0)` and
/// `to` displaced by `(dx, dy)`, over the part that stays inside `to`.
/// `None` when less than half of the block overlaps.
#[allow(clippy::too_many_arguments)]
fn block_cost(from: &Tensor, to: &Tensor, x0: usize, y0: usize, bw: usize, bh: usize, dx: isize, dy: isize) -> Option<f64> {
    let (c, h, w) = (from.shape()[0], from.shape()[1], from.shape()[2]);
    let xa = (x0 as isize).max(-dx) as usize;
    let xb = ((x0 + bw) as isize).min(w as isize - dx);
    let ya = (y0 as isize).max(-dy) as usize;
    let yb = ((y0 + bh) as isize).min(h as isize - dy);
    if xb <= xa as isize || yb <= ya as isize {
        return None;
    }
    let (xb, yb) = (xb as usize, yb as usize);
    let count = (xb - xa) * (yb - ya);
    if 2 * count < bw * bh {
        return None;
    }
    let (a, b) = (from.data(), to.data());
    let mut s = 0.0;
    for ch in 0..c {
        for y in ya..yb {
            let ra = ch * h * w + y * w;
            let rb = ch * h * w + (y as isize + dy) as usize * w;
            let tx = (xa as isize + dx) as usize;
            s += a[ra + xa..ra + xb]
                .iter()
                .zip(&b[rb + tx..rb + tx + (xb - xa)])
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>();
        }
    }
    Some(s / (c * count) as f64)
}

/// Flow on `from`'s grid pointing into `to`.
///
/// Each block takes the integer displacement with the smallest mean absolute
/// difference; ties go to the shorter displacement and then to scan order.
/// The blocky field is then box-filtered with every block weighted by the
/// cost margin between its match and the best rival at least two pixels
/// away, so featureless or repetitive blocks inherit the motion of
/// distinctive neighbours.
pub fn blockmatch(from: &Tensor, to: &Tensor, params: &BlockMatchParams) -> Result<Tensor> {
    const OP: &str = "blockmatch";
    let (_, h, w) = from.dims3(OP)?;
    if from.shape() != to.shape() {
        return Err(Error::shape(OP, "frames", format!("{:?}", from.shape()), format!("{:?}", to.shape())));
    }
    if params.block == 0 {
        return Err(Error::invalid(OP, "block size must be positive"));
    }
    let r = params.radius as isize;
    let mut field = Tensor::zeros(&[2, h, w]);
    let mut confidence = Tensor::zeros(&[h, w]);
    for y0 in (0..h).step_by(params.block) {
        for x0 in (0..w).step_by(params.block) {
            let (bw, bh) = (params.block.min(w - x0), params.block.min(h - y0));
            let mut best = (f64::INFINITY, 0, 0, 0);
            let mut costs = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
            for dy in -r..=r {
                for dx in -r..=r {
                    if let Some(s) = block_cost(from, to, x0, y0, bw, bh, dx, dy) {
                        costs.push((s, dx, dy));
                        let len = dx.abs() + dy.abs();
                        if s < best.0 || (s == best.0 && len < best.3) {
                            best = (s, dx, dy, len);
                        }
                    }
                }
            }
            // margin to the best match at least two pixels away from the winner
            let rival = costs
                .iter()
                .filter(|c| (c.1 - best.1).abs().max((c.2 - best.2).abs()) > 1)
                .map(|c| c.0)
                .fold(f64::INFINITY, f64::min);
            let conf = if rival.is_finite() { rival - best.0 } else { 0.0 };
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    field.set3(0, y, x, best.1 as f64);
                    field.set3(1, y, x, best.2 as f64);
                    confidence.data_mut()[y * w + x] = conf;
                }
            }
        }
    }
    Ok(weighted_box_filter(&field, &confidence, params.smooth))
}

/// Weighted mean over a `(2r+1)^2` window clipped to the frame; windows
/// without weight fall back to the plain mean.
fn weighted_box_filter(t: &Tensor, weight: &Tensor, r: usize) -> Tensor {
    if r == 0 {
        return t.clone();
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let wt = weight.data();
    let mut out = Tensor::zeros(t.shape());
    for y in 0..h {
        let (ya, yb) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let (xa, xb) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut z = 0.0;
            for yy in ya..=yb {
                z += wt[yy * w + xa..=yy * w + xb].iter().sum::<f64>();
            }
            for ch in 0..c {
                let (mut s, mut plain) = (0.0, 0.0);
                for yy in ya..=yb {
                    for xx in xa..=xb {
                        let v = t.at3(ch, yy, xx);
                        s += wt[yy * w + xx] * v;
                        plain += v;
                    }
                }
                let n = ((yb - ya + 1) * (xb - xa + 1)) as f64;
                out.set3(ch, y, x, if z > 0.0 { s / z } else { plain / n });
            }
        }
    }
    out
}

pub fn blockmatch_flows(frames: &FrameSequence, params: &BlockMatchParams) -> Result<Vec<FlowPair>> {
    frames
        .frames
        .windows(2)
        .map(|f| {
            Ok(FlowPair {
                fw: blockmatch(&f[0], &f[1], params)?,
                bw: blockmatch(&f[1], &f[0], params)?,
            })
        })
        .collect()
}

/// File names of the pair ending at frame `t`.
pub fn flow_paths(dir: &Path, t: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("fw_{t:04}.dvdt")), dir.join(format!("bw_{t:04}.dvdt")))
}

pub fn save_flows(dir: &Path, flows: &[FlowPair]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in flows.iter().enumerate() {
        let (fw, bw) = flow_paths(dir, i + 1);
        f.fw.save(fw)?;
        f.bw.save(bw)?;
    }
    Ok(())
}

/// Loads the `count` pairs for frames `1..=count`, checking their extent.
pub fn load_flows(dir: &Path, count: usize, h: usize, w: usize) -> Result<Vec<FlowPair>> {
    (1..=count)
        .map(|t| {
            let (fw, bw) = flow_paths(dir, t);
            let pair = FlowPair {
                fw: Tensor::load(&fw)?,
                bw: Tensor::load(&bw)?,
            };
            for (p, f) in [(&fw, &pair.fw), (&bw, &pair.bw)] {
                if f.shape() != [2, h, w] {
                    return Err(Error::Format {
                        path: p.clone(),
                        msg: format!("flow shape {:?}, expected [2, {h}, {w}]", f.shape()),
                    });
                }
            }
            Ok(pair)
        })
        .collect()
}

/// Mean endpoint error between two fields.
pub fn endpoint_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (_, h, w) = a.dims3("endpoint_error")?;
    if a.shape() != b.shape() {
        return Err(Error::shape("endpoint_error", "fields", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let n = h * w;
    let (x, y) = (a.data(), b.data());
    Ok((0..n).map(|p| (x[p] - y[p]).hypot(x[n + p] - y[n + p])).sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_flows_are_opposite() {
        let f = truth_flows(&[(0.0, 0.0), (3.0, -1.0)], 4, 5);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].bw.at3(0, 2, 2), 3.0);
        assert_eq!(f[0].fw.at3(1, 0, 0), 1.0);
    }

    #[test]
    fn box_filter_keeps_constants() {
        let t = constant_flow(6, 7, 2.0, -1.0);
        assert_eq!(weighted_box_filter(&t, &Tensor::zeros(&[6, 7]), 2), t);
        assert_eq!(weighted_box_filter(&t, &Tensor::full(&[6, 7], 0.5), 2), t);
    }

    #[test]
    fn flow_kind_parses() {
        assert_eq!("truth".parse::<FlowKind>().unwrap(), FlowKind::Truth);
        assert!("spynet".parse::<FlowKind>().is_err());
    }
}
