//! Flow-guided cosine attention, offset prediction, deformable alignment and
//! the coarse-to-fine pyramid around them.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::attention::WindowAttention;
use crate::ops::deform::DeformConv;
use crate::ops::sample::grid_plus;
use crate::ops::Padding;
use crate::params::Bound;
use crate::tensor::Tensor;

use super::{conv_bias, AlignMode, NetConfig};

/// `W^q`, `W^k`, `W^v` stored as `[d, C, 1, 1]` kernels.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

pub struct Attended {
    pub output: Var,
    /// `[S, Hq, Wq]` softmax weights.
    pub weights: Tensor,
}

/// Queries come from `f_query` at `p`; keys and values are projected from
/// `f_source` and sampled around `p + flow(p)`.
///
/// With `query_stride = 2` queries are taken at every other row and column
/// and the result is bilinearly upsampled back to full extent.
pub fn flow_guided_attention(
    tape: &mut Tape,
    f_query: Var,
    f_source: Var,
    flow: Var,
    proj: &Projections,
    op: &WindowAttention,
    query_stride: usize,
) -> Result<Attended> {
    const OP: &str = "flow_guided_attention";
    let (_, h, w) = tape.value(f_query).dims3(OP)?;
    if tape.shape(f_source)[1..] != [h, w] {
        return Err(Error::shape(
            OP,
            "source extent",
            format!("[{h}, {w}]"),
            format!("{:?}", &tape.shape(f_source)[1..]),
        ));
    }
    if tape.shape(flow) != [2, h, w] {
        return Err(Error::shape(OP, "flow", format!("[2, {h}, {w}]"), format!("{:?}", tape.shape(flow))));
    }
    if !(1..=2).contains(&query_stride) {
        return Err(Error::invalid(OP, format!("query stride must be 1 or 2, got {query_stride}")));
    }
    let s = query_stride;
    let q = tape.conv2d(f_query, proj.wq, s, 0)?;
    let k = tape.conv2d(f_source, proj.wk, 1, 0)?;
    let v = tape.conv2d(f_source, proj.wv, 1, 0)?;
    let (hq, wq) = (tape.shape(q)[1], tape.shape(q)[2]);
    let grid = Tensor::from_fn(&[2, hq, wq], |i| {
        let p = i % (hq * wq);
        if i < hq * wq {
            (s * (p % wq)) as f64
        } else {
            (s * (p / wq)) as f64
        }
    });
    let grid = tape.constant(grid);
    let flow_q = if s == 1 { flow } else { subsample(tape, flow)? };
    let centers = tape.add(grid, flow_q)?;
    let (out, weights) = tape.window_attention(op, q, k, v, centers)?;
    let output = if s == 1 { out } else { tape.resize(out, h, w)? };
    Ok(Attended { output, weights })
}

/// Every other row and column via a strided identity convolution.
fn subsample(tape: &mut Tape, x: Var) -> Result<Var> {
    let c = tape.shape(x)[0];
    let eye = tape.constant(Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 }));
    tape.conv2d(x, eye, 2, 0)
}

/// `Conv3x3(Cat(F, F_attn, flow[, coarser offsets])) + b`.
pub fn fcas_offsets(
    tape: &mut Tape,
    f: Var,
    f_attn: Var,
    flow: Var,
    coarse: Option<Var>,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let mut parts = vec![f, f_attn, flow];
    parts.extend(coarse);
    let extent = &tape.shape(f)[1..];
    for &p in &parts[1..] {
        if &tape.shape(p)[1..] != extent {
            return Err(Error::shape(
                "fcas_offsets",
                "extent",
                format!("{extent:?}"),
                format!("{:?}", &tape.shape(p)[1..]),
            ));
        }
    }
    let x = tape.concat(&parts)?;
    conv_bias(tape, x, weight, bias, 1, 1)
}

/// Deformable convolution over `f_src` with taps at grid + flow + offset.
pub fn deformable_align(
    tape: &mut Tape,
    f_src: Var,
    offsets: Var,
    flow: Var,
    weight: Var,
    op: &DeformConv,
) -> Result<Var> {
    tape.deform_conv(op, f_src, offsets, flow, weight)
}

/// Resamples a full-resolution flow to `h x w`, scaling its values.
pub fn flow_at(tape: &mut Tape, flow: Var, h: usize, w: usize) -> Result<Var> {
    let (_, fh, fw) = tape.value(flow).dims3("flow_at")?;
    if (fh, fw) == (h, w) {
        return Ok(flow);
    }
    let r = tape.resize(flow, h, w)?;
    let scale = Tensor::from_fn(&[2, h, w], |i| if i < h * w { w as f64 / fw as f64 } else { h as f64 / fh as f64 });
    let scale = tape.constant(scale);
    tape.mul(r, scale)
}

pub struct GpcasOutput {
    pub aligned: Var,
    /// Offsets per level, finest first.
    pub offsets: Vec<Var>,
    /// Attention weights per level, finest first (empty without FCAS).
    pub weights: Vec<Tensor>,
}

/// Offset channels predicted per level.
pub fn offset_channels(cfg: &NetConfig) -> usize {
    match cfg.align_mode {
        AlignMode::Deform => 2 * cfg.deform_kernel * cfg.deform_kernel,
        AlignMode::Warp => 2,
    }
}

/// Coarse-to-fine alignment of `src` (previous frame) onto `query` (current
/// frame). `flow` maps current-frame pixels into the previous frame.
pub fn gpcas_pyramid(
    tape: &mut Tape,
    params: &Bound,
    cfg: &NetConfig,
    query: &[Var],
    src: &[Var],
    flow: Var,
) -> Result<GpcasOutput> {
    let levels = cfg.levels;
    if query.len() < levels || src.len() < levels || levels == 0 {
        return Err(Error::shape("gpcas_pyramid", "levels", levels, query.len().min(src.len())));
    }
    let attn_op = WindowAttention::new(cfg.kernel, cfg.window, cfg.dim, Padding::Border)?;
    let mut coarse: Option<Var> = None;
    let mut offsets = Vec::with_capacity(levels);
    let mut weights = Vec::with_capacity(levels);
    for l in (0..levels).rev() {
        let (_, h, w) = tape.value(query[l]).dims3("gpcas_pyramid")?;
        let fl = flow_at(tape, flow, h, w)?;
        let f_attn = if cfg.fcas {
            let proj = Projections {
                wq: params.get(&format!("gpcas.{l}.q.w"))?,
                wk: params.get(&format!("gpcas.{l}.k.w"))?,
                wv: params.get(&format!("gpcas.{l}.v.w"))?,
            };
            let a = flow_guided_attention(tape, query[l], src[l], fl, &proj, &attn_op, cfg.query_stride)?;
            weights.push(a.weights);
            a.output
        } else {
            let g = tape.constant(grid_plus(h, w, None));
            let c = tape.add(g, fl)?;
            tape.bilinear_sample(src[l], c, Padding::Border)?
        };
        let up = match coarse {
            Some(o) => {
                let r = tape.resize(o, h, w)?;
                Some(tape.scale(r, 2.0)?)
            }
            None => None,
        };
        let wt = params.get(&format!("gpcas.{l}.off.w"))?;
        let b = params.get(&format!("gpcas.{l}.off.b"))?;
        let mut off = fcas_offsets(tape, query[l], f_attn, fl, up, wt, b)?;
        if let Some(u) = up {
            off = tape.add(off, u)?;
        }
        offsets.push(off);
        coarse = Some(off);
    }
    offsets.reverse();
    weights.reverse();
    let fl = flow_at(tape, flow, tape.shape(src[0])[1], tape.shape(src[0])[2])?;
    let aligned = match cfg.align_mode {
        AlignMode::Deform => {
            let op = DeformConv::new(cfg.deform_kernel, Padding::Border)?;
            let wt = params.get("gpcas.deform.w")?;
            deformable_align(tape, src[0], offsets[0], fl, wt, &op)?
        }
        AlignMode::Warp => {
            let (h, w) = (tape.shape(src[0])[1], tape.shape(src[0])[2]);
            let g = tape.constant(grid_plus(h, w, None));
            let c = tape.add(g, fl)?;
            let c = tape.add(c, offsets[0])?;
            tape.bilinear_sample(src[0], c, Padding::Border)?
        }
    };
    Ok(GpcasOutput {
        aligned,
        offsets,
        weights,
    })
}
