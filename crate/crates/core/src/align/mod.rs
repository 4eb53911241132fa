//! The two-frame dehazing network: encoder, pyramid alignment, fusion and a
//! residual decoder.

pub mod dcaf;
pub mod fcas;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::attention::WindowShape;
use crate::ops::deform::center_identity;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

pub use dcaf::dcaf_fuse;
pub use fcas::{deformable_align, fcas_offsets, flow_guided_attention, gpcas_pyramid, Projections};

const SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Deformable convolution with per-tap offsets.
    #[default]
    Deform,
    /// Single bilinear warp by flow plus a two-channel offset.
    Warp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Encoder channels per level, finest first.
    pub channels: [usize; 3],
    /// Pyramid levels used for alignment (1 to 3).
    pub levels: usize,
    /// Attention window size `k`.
    pub kernel: usize,
    pub window: WindowShape,
    /// Projection dimension `d`.
    pub dim: usize,
    pub deform_kernel: usize,
    pub query_stride: usize,
    pub align_mode: AlignMode,
    /// Attention sampling in the alignment pyramid; off means plain flow warp.
    pub fcas: bool,
    /// Attention fusion; off means a 1x1 convolution of both features.
    pub dcaf: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: [16, 32, 64],
            levels: 3,
            kernel: 7,
            window: WindowShape::Square,
            dim: 32,
            deform_kernel: 3,
            query_stride: 1,
            align_mode: AlignMode::Deform,
            fcas: true,
            dcaf: true,
            seed: 1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "net_config";
        if !(1..=3).contains(&self.levels) {
            return Err(Error::invalid(OP, format!("levels must be 1..=3, got {}", self.levels)));
        }
        if self.kernel % 2 == 0 || self.deform_kernel % 2 == 0 {
            return Err(Error::invalid(OP, "kernel sizes must be odd"));
        }
        if self.dim == 0 || self.channels.contains(&0) {
            return Err(Error::invalid(OP, "dimensions must be positive"));
        }
        if !(1..=2).contains(&self.query_stride) {
            return Err(Error::invalid(OP, "query stride must be 1 or 2"));
        }
        Ok(())
    }

    /// Smallest frame side the network accepts: every pyramid level keeps
    /// at least one fusion pool.
    pub fn min_extent(&self) -> usize {
        dcaf::POOL << (self.levels - 1)
    }
}

pub(crate) fn conv_bias(tape: &mut Tape, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = tape.conv2d(x, w, stride, pad)?;
    tape.channel_bias(y, b)
}

/// Fresh parameters for `cfg`.
///
/// Offset predictors and the last decoder layer start at zero and the
/// deformable kernels at the center-tap identity, so the untrained network
/// warps by the given flow and returns its current input unchanged.
pub fn init_params(cfg: &NetConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut init = Init::new(cfg.seed);
    let mut p = ParamStore::new();
    let [c0, c1, c2] = cfg.channels;
    let d = cfg.dim;
    let kd = cfg.deform_kernel;
    let oc = fcas::offset_channels(cfg);
    for (i, (ci, co)) in [(3, c0), (c0, c1), (c1, c2)].into_iter().enumerate() {
        p.insert(format!("enc.{i}.w"), init.conv(co, ci, 3, 1.0));
        p.insert(format!("enc.{i}.b"), Tensor::zeros(&[co]));
    }
    for l in 0..cfg.levels {
        let c = cfg.channels[l];
        let attn = if cfg.fcas {
            for n in ["q", "k", "v"] {
                p.insert(format!("gpcas.{l}.{n}.w"), init.conv(d, c, 1, 0.5));
            }
            d
        } else {
            c
        };
        let coarse = if l + 1 < cfg.levels { oc } else { 0 };
        p.insert(format!("gpcas.{l}.off.w"), Tensor::zeros(&[oc, c + attn + 2 + coarse, 3, 3]));
        p.insert(format!("gpcas.{l}.off.b"), Tensor::zeros(&[oc]));
    }
    if cfg.align_mode == AlignMode::Deform {
        p.insert("gpcas.deform.w", center_identity(c0, kd));
    }
    if cfg.dcaf {
        for n in ["q", "k", "v"] {
            p.insert(format!("dcaf.{n}.w"), init.conv(d, c0, 1, 0.5));
        }
        p.insert("dcaf.off.w", Tensor::zeros(&[2 * kd * kd, d, 3, 3]));
        p.insert("dcaf.off.b", Tensor::zeros(&[2 * kd * kd]));
        p.insert("dcaf.dk.w", center_identity(d, kd));
        p.insert("dcaf.dv.w", center_identity(d, kd));
        p.insert("dcaf.out.w", init.conv(c0, d + c0, 1, 0.5));
        p.insert("dcaf.out.b", Tensor::zeros(&[c0]));
    } else {
        p.insert("fuse.w", init.conv(c0, 2 * c0, 1, 0.5));
        p.insert("fuse.b", Tensor::zeros(&[c0]));
    }
    p.insert("dec.0.w", init.conv(c0, c0, 3, 1.0));
    p.insert("dec.0.b", Tensor::zeros(&[c0]));
    p.insert("dec.1.w", Tensor::zeros(&[3, c0, 3, 3]));
    p.insert("dec.1.b", Tensor::zeros(&[3]));
    Ok(p)
}

/// Encoder features, finest first; only the first `levels` are computed.
pub fn encode(tape: &mut Tape, params: &Bound, frame: Var, levels: usize) -> Result<Vec<Var>> {
    let mut x = tape.add_scalar(frame, -0.5)?;
    let mut out = Vec::with_capacity(levels);
    for i in 0..levels {
        let stride = if i == 0 { 1 } else { 2 };
        let y = conv_bias(tape, x, params.get(&format!("enc.{i}.w"))?, params.get(&format!("enc.{i}.b"))?, stride, 1)?;
        x = tape.leaky_relu(y, SLOPE)?;
        out.push(x);
    }
    Ok(out)
}

/// Everything one dehazing step exposes to the losses.
pub struct StepOutput {
    pub output: Var,
    pub aligned: Var,
    pub current: Var,
    pub offsets: Vec<Var>,
    pub fcas_weights: Vec<Tensor>,
    pub dcaf_weights: Option<Tensor>,
}

/// Dehazes `j_cur` with help from `j_prev`. `flow` maps current-frame pixels
/// to their position in the previous frame.
pub fn dehaze_step(
    tape: &mut Tape,
    params: &Bound,
    cfg: &NetConfig,
    j_prev: Var,
    j_cur: Var,
    flow: Var,
) -> Result<StepOutput> {
    const OP: &str = "dehaze_step";
    let (c, h, w) = tape.value(j_cur).dims3(OP)?;
    if c != 3 {
        return Err(Error::shape(OP, "channels", 3, c));
    }
    if tape.shape(j_prev) != tape.shape(j_cur) {
        return Err(Error::shape(
            OP,
            "previous frame",
            format!("{:?}", tape.shape(j_cur)),
            format!("{:?}", tape.shape(j_prev)),
        ));
    }
    if tape.shape(flow) != [2, h, w] {
        return Err(Error::shape(OP, "flow", format!("[2, {h}, {w}]"), format!("{:?}", tape.shape(flow))));
    }
    let f_prev = encode(tape, params, j_prev, cfg.levels)?;
    let f_cur = encode(tape, params, j_cur, cfg.levels)?;
    let g = gpcas_pyramid(tape, params, cfg, &f_cur, &f_prev, flow)?;
    let (fused, dcaf_weights) = if cfg.dcaf {
        let f = dcaf_fuse(tape, params, cfg, g.aligned, f_cur[0])?;
        (f.output, Some(f.weights))
    } else {
        let cat = tape.concat(&[g.aligned, f_cur[0]])?;
        let r = conv_bias(tape, cat, params.get("fuse.w")?, params.get("fuse.b")?, 1, 0)?;
        (tape.add(f_cur[0], r)?, None)
    };
    let y = conv_bias(tape, fused, params.get("dec.0.w")?, params.get("dec.0.b")?, 1, 1)?;
    let y = tape.leaky_relu(y, SLOPE)?;
    let r = conv_bias(tape, y, params.get("dec.1.w")?, params.get("dec.1.b")?, 1, 1)?;
    let sum = tape.add(j_cur, r)?;
    Ok(StepOutput {
        output: tape.clamp(sum, 0.0, 1.0)?,
        aligned: g.aligned,
        current: f_cur[0],
        offsets: g.offsets,
        fcas_weights: g.weights,
        dcaf_weights,
    })
}

/// Forward pass without gradients.
pub fn infer(params: &ParamStore, cfg: &NetConfig, j_prev: &Tensor, j_cur: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let p = tape.constant(j_prev.clone());
    let c = tape.constant(j_cur.clone());
    let f = tape.constant(flow.clone());
    let out = dehaze_step(&mut tape, &b, cfg, p, c, f)?;
    Ok(tape.value(out.output).clone())
}
