//! Training objective: reference, alignment, temporal consistency and
//! adversarial terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::embed::{global_avg_pool, Embedder, FeaturePyramid, InputNorm};
use crate::error::{Error, Result};
use crate::ops::contextual::ContextualParams;
use crate::ops::sample::{bilinear_sample, grid_plus};
use crate::ops::softmax::COSINE_EPS;
use crate::ops::Padding;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

pub use crate::ops::contextual::contextual_loss;

/// Probabilities are clamped to `[P_MIN, 1 - P_MIN]` before the log.
pub const P_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefDistance {
    #[default]
    Contextual,
    /// Cosine distance of globally pooled features.
    PooledCosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adv: f64,
    pub mfr: f64,
    pub align: f64,
    pub cr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 1.0,
            mfr: 1.0,
            align: 1.0,
            cr: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub distance: RefDistance,
    pub contextual: ContextualParams,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            distance: RefDistance::Contextual,
            contextual: ContextualParams::default(),
            alpha1: 0.01,
            alpha2: 0.5,
        }
    }
}

/// Centered reference pyramid as used by [`mfr_loss`].
pub fn reference_features(embedder: &Embedder, frame: &Tensor) -> Result<FeaturePyramid> {
    embedder.embed_with(frame, InputNorm::Center)
}

/// Sum over levels and both references of the distance between the output's
/// features and the reference features.
pub fn mfr_loss(
    tape: &mut Tape,
    embedder: &Embedder,
    out: Var,
    refs: [&FeaturePyramid; 2],
    cfg: &LossConfig,
) -> Result<Var> {
    let levels = embedder.embed_var(tape, out)?;
    let mut terms = Vec::with_capacity(2 * levels.len());
    for r in refs {
        if r.levels.len() != levels.len() {
            return Err(Error::shape("mfr_loss", "levels", levels.len(), r.levels.len()));
        }
        for (&x, y) in levels.iter().zip(&r.levels) {
            if tape.shape(x) != y.shape() {
                return Err(Error::shape(
                    "mfr_loss",
                    "level geometry",
                    format!("{:?}", tape.shape(x)),
                    format!("{:?}", y.shape()),
                ));
            }
            let term = match cfg.distance {
                RefDistance::Contextual => {
                    let yv = tape.constant(y.clone());
                    tape.contextual_loss(x, yv, cfg.contextual)?
                }
                RefDistance::PooledCosine => {
                    let px = tape.global_avg_pool(x)?;
                    let py = tape.constant(Tensor::new(&[y.shape()[0]], global_avg_pool(y))?);
                    let s = tape.cosine_similarity(px, py, COSINE_EPS)?;
                    let n = tape.scale(s, -1.0)?;
                    tape.add_scalar(n, 1.0)?
                }
            };
            terms.push(term);
        }
    }
    sum_all(tape, &terms)
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Mean absolute difference between aligned and current features.
pub fn align_loss(tape: &mut Tape, aligned: Var, current: Var) -> Result<Var> {
    if tape.shape(aligned) != tape.shape(current) {
        return Err(Error::shape(
            "align_loss",
            "features",
            format!("{:?}", tape.shape(current)),
            format!("{:?}", tape.shape(aligned)),
        ));
    }
    tape.mean_abs_diff(aligned, current)
}

/// Forward-backward check: `p` is trusted when
/// `|fw(p) + bw(p + fw(p))|^2 < a1 (|fw(p)|^2 + |bw(p + fw(p))|^2) + a2`.
pub fn occlusion_mask(fw: &Tensor, bw: &Tensor, alpha1: f64, alpha2: f64) -> Result<Tensor> {
    let (c, h, w) = fw.dims3("occlusion_mask")?;
    if c != 2 || bw.shape() != fw.shape() {
        return Err(Error::shape(
            "occlusion_mask",
            "flows",
            format!("{:?}", fw.shape()),
            format!("{:?}", bw.shape()),
        ));
    }
    let bw_warped = bilinear_sample(bw, &grid_plus(h, w, Some(fw)), Padding::Border)?;
    let n = h * w;
    let (f, b) = (fw.data(), bw_warped.data());
    let mask = (0..n)
        .map(|p| {
            let (fx, fy, bx, by) = (f[p], f[n + p], b[p], b[n + p]);
            let lhs = (fx + bx).powi(2) + (fy + by).powi(2);
            let rhs = alpha1 * (fx * fx + fy * fy + bx * bx + by * by) + alpha2;
            if lhs < rhs {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(&[1, h, w], mask)
}

pub struct Consistency {
    pub loss: Var,
    /// The mask trusted no pixel, so the loss is a constant zero.
    pub empty_mask: bool,
}

/// Warps `out_t` onto the previous frame's grid with `flow` (previous-frame
/// pixels to their position in frame `t`) and compares against `out_prev`
/// over trusted pixels.
pub fn consistency_loss(tape: &mut Tape, out_t: Var, out_prev: Var, flow: &Tensor, mask: &Tensor) -> Result<Consistency> {
    const OP: &str = "consistency_loss";
    let (_, h, w) = tape.value(out_t).dims3(OP)?;
    if tape.shape(out_prev) != tape.shape(out_t) {
        return Err(Error::shape(
            OP,
            "previous output",
            format!("{:?}", tape.shape(out_t)),
            format!("{:?}", tape.shape(out_prev)),
        ));
    }
    if flow.shape() != [2, h, w] || mask.shape() != [1, h, w] {
        return Err(Error::shape(
            OP,
            "flow and mask",
            format!("[2, {h}, {w}] and [1, {h}, {w}]"),
            format!("{:?} and {:?}", flow.shape(), mask.shape()),
        ));
    }
    let coords = tape.constant(grid_plus(h, w, Some(flow)));
    let warped = tape.bilinear_sample(out_t, coords, Padding::Border)?;
    let empty_mask = mask.sum() == 0.0;
    if empty_mask {
        log::warn!("consistency_loss: occlusion mask is empty, term is zero");
    }
    Ok(Consistency {
        loss: tape.masked_mean_abs_diff(warped, out_prev, mask)?,
        empty_mask,
    })
}

/// Patch discriminator: three stride-2 3x3 convolutions (16, 32, 64
/// channels) with leaky ReLU, then a 3x3 convolution to one logit per patch.
pub fn init_discriminator(seed: u64) -> ParamStore {
    let mut init = Init::new(seed);
    let mut p = ParamStore::new();
    for (i, (ci, co)) in [(3, 16), (16, 32), (32, 64), (64, 1)].into_iter().enumerate() {
        p.insert(format!("disc.{i}.w"), init.conv(co, ci, 3, 1.0));
        p.insert(format!("disc.{i}.b"), Tensor::zeros(&[co]));
    }
    p
}

/// Clamped per-patch probabilities `[1, h, w]`.
pub fn discriminate(tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
    let mut y = tape.add_scalar(x, -0.5)?;
    for i in 0..4 {
        let stride = if i < 3 { 2 } else { 1 };
        let c = tape.conv2d(y, params.get(&format!("disc.{i}.w"))?, stride, 1)?;
        y = tape.channel_bias(c, params.get(&format!("disc.{i}.b"))?)?;
        if i < 3 {
            y = tape.leaky_relu(y, 0.2)?;
        }
    }
    let p = tape.sigmoid(y)?;
    tape.clamp(p, P_MIN, 1.0 - P_MIN)
}

fn neg_mean_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let l = tape.log(p)?;
    let m = tape.mean(l)?;
    tape.scale(m, -1.0)
}

fn one_minus(tape: &mut Tape, p: Var) -> Result<Var> {
    let n = tape.scale(p, -1.0)?;
    tape.add_scalar(n, 1.0)
}

/// Non-saturating generator loss `-E[log D(out)]`.
pub fn generator_loss(tape: &mut Tape, disc: &Bound, out: Var) -> Result<Var> {
    let p = discriminate(tape, disc, out)?;
    neg_mean_log(tape, p)
}

/// `-E[log D(ref)] - E[log(1 - D(out))]`, averaged over the references.
pub fn discriminator_loss(tape: &mut Tape, disc: &Bound, out: Var, refs: &[Var]) -> Result<Var> {
    if refs.is_empty() {
        return Err(Error::invalid("adversarial_loss", "no reference frames"));
    }
    let mut real = Vec::with_capacity(refs.len());
    for &r in refs {
        let p = discriminate(tape, disc, r)?;
        real.push(neg_mean_log(tape, p)?);
    }
    let s = sum_all(tape, &real)?;
    let real = tape.scale(s, 1.0 / refs.len() as f64)?;
    let p = discriminate(tape, disc, out)?;
    let q = one_minus(tape, p)?;
    let fake = neg_mean_log(tape, q)?;
    tape.add(real, fake)
}

/// Generator and discriminator losses evaluated on one tape.
pub fn adversarial_loss(tape: &mut Tape, disc: &Bound, out: Var, refs: &[Var]) -> Result<(Var, Var)> {
    Ok((generator_loss(tape, disc, out)?, discriminator_loss(tape, disc, out, refs)?))
}

/// Per-term values of one step; `total` is the sum of the weighted terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv: f64,
    pub mfr: f64,
    pub align: f64,
    pub cr: f64,
    pub total: f64,
}

/// Raw term values before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub adv: f64,
    pub mfr: f64,
    pub align: f64,
    pub cr: f64,
}

/// Weights each term and sums; the report holds weighted terms.
pub fn total_loss(parts: LossParts, w: &LossWeights) -> Result<LossReport> {
    let named = [("adv", parts.adv), ("mfr", parts.mfr), ("align", parts.align), ("cr", parts.cr)];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss(name));
    }
    let (adv, mfr, align, cr) = (w.adv * parts.adv, w.mfr * parts.mfr, w.align * parts.align, w.cr * parts.cr);
    Ok(LossReport {
        adv,
        mfr,
        align,
        cr,
        total: adv + mfr + align + cr,
    })
}

/// The weighted sum on the tape, in the same order as [`total_loss`].
pub fn weighted_total(tape: &mut Tape, terms: [Var; 4], w: &LossWeights) -> Result<Var> {
    let ws = [w.adv, w.mfr, w.align, w.cr];
    let mut scaled = Vec::with_capacity(4);
    for (t, k) in terms.into_iter().zip(ws) {
        scaled.push(tape.scale(t, k)?);
    }
    sum_all(tape, &scaled)
}
