//! Deformable cosine attention fusion of aligned and current features.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::attention::WindowAttention;
use crate::ops::deform::DeformConv;
use crate::ops::sample::grid_plus;
use crate::ops::Padding;
use crate::params::Bound;
use crate::tensor::Tensor;

use super::{conv_bias, NetConfig};

pub const POOL: usize = 4;

pub struct Fused {
    pub output: Var,
    /// `[S, H/4, W/4]` attention weights.
    pub weights: Tensor,
}

/// Pooled queries from `f_align` attend over deformably resampled pooled
/// keys and values from `f_cur`; the result is upsampled and added to
/// `f_cur` through a 1x1 convolution of `Cat(upsampled, f_align)`.
pub fn dcaf_fuse(tape: &mut Tape, params: &Bound, cfg: &NetConfig, f_align: Var, f_cur: Var) -> Result<Fused> {
    const OP: &str = "dcaf_fuse";
    if tape.shape(f_align) != tape.shape(f_cur) {
        return Err(Error::shape(
            OP,
            "features",
            format!("{:?}", tape.shape(f_cur)),
            format!("{:?}", tape.shape(f_align)),
        ));
    }
    let (_, h, w) = tape.value(f_cur).dims3(OP)?;
    if h < POOL || w < POOL {
        return Err(Error::invalid(OP, format!("features {h}x{w} are smaller than the {POOL}x{POOL} pool")));
    }
    let wq = params.get("dcaf.q.w")?;
    let wk = params.get("dcaf.k.w")?;
    let wv = params.get("dcaf.v.w")?;
    let q = tape.conv2d(f_align, wq, 1, 0)?;
    let q = tape.maxpool2d(q, POOL, POOL)?;
    let k = tape.conv2d(f_cur, wk, 1, 0)?;
    let k = tape.maxpool2d(k, POOL, POOL)?;
    let v = tape.conv2d(f_cur, wv, 1, 0)?;
    let v = tape.maxpool2d(v, POOL, POOL)?;
    let (hp, wp) = (tape.shape(q)[1], tape.shape(q)[2]);
    let off = conv_bias(tape, k, params.get("dcaf.off.w")?, params.get("dcaf.off.b")?, 1, 1)?;
    let zero = tape.constant(Tensor::zeros(&[2, hp, wp]));
    let dconv = DeformConv::new(cfg.deform_kernel, Padding::Border)?;
    let k = tape.deform_conv(&dconv, k, off, zero, params.get("dcaf.dk.w")?)?;
    let v = tape.deform_conv(&dconv, v, off, zero, params.get("dcaf.dv.w")?)?;
    let op = WindowAttention::new(cfg.kernel, cfg.window, cfg.dim, Padding::Border)?;
    let centers = tape.constant(grid_plus(hp, wp, None));
    let (attn, weights) = tape.window_attention(&op, q, k, v, centers)?;
    let up = tape.resize(attn, h, w)?;
    let cat = tape.concat(&[up, f_align])?;
    let res = conv_bias(tape, cat, params.get("dcaf.out.w")?, params.get("dcaf.out.b")?, 1, 0)?;
    Ok(Fused {
        output: tape.add(f_cur, res)?,
        weights,
    })
}
