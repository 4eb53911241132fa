//! Central finite-difference checks of every differentiable operator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::align::{dcaf_fuse, deformable_align, fcas_offsets, flow_guided_attention, NetConfig, Projections};
use crate::autodiff::{Tape, Var};
use crate::embed::Embedder;
use crate::error::Result;
use crate::losses::{
    align_loss, consistency_loss, discriminator_loss, generator_loss, init_discriminator, mfr_loss,
    reference_features, weighted_total, LossConfig, LossWeights, RefDistance,
};
use crate::ops::attention::{WindowAttention, WindowShape};
use crate::ops::contextual::ContextualParams;
use crate::ops::deform::DeformConv;
use crate::ops::Padding;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seeds: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Inputs larger than this are checked on a seeded subset of coordinates.
    pub max_coords: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: 20,
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    /// Coordinates excluded for straddling a kink, over all seeds.
    pub kinks: usize,
    pub passed: bool,
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// One instance of an operator check: inputs and how to compute from them.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
}

fn scalar_of(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let r = tape.constant(proj.clone());
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

fn evaluate(case: &Case, inputs: &[Tensor], proj: &Option<Tensor>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let l = match proj {
        Some(p) => scalar_of(&mut tape, out, p)?,
        None => out,
    };
    Ok(tape.value(l).item())
}

/// Result of one seeded check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseError {
    pub rel_error: f64,
    /// Coordinates skipped because the difference window straddles a kink.
    pub kinks: usize,
}

/// Norm-wise relative error `|g - n| / max(|g|, |n|)` between the tape
/// gradient and central differences, over all checked coordinates.
///
/// A coordinate whose difference disagrees with the tape is re-estimated
/// with a tenth of the step; if the two estimates disagree with each other
/// the window contains a non-differentiable point and the coordinate is
/// excluded.
pub fn relative_error(case: &Case, cfg: &GradcheckConfig, seed: u64) -> Result<CaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let proj = (tape.value(out).len() != 1).then(|| normal(tape.value(out).shape(), &mut rng));
    let loss = match &proj {
        Some(p) => scalar_of(&mut tape, out, p)?,
        None => out,
    };
    let grads = tape.backward(loss)?;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    let mut kinks = 0;
    let mut inputs = case.inputs.clone();
    for (i, &v) in vars.iter().enumerate() {
        let g = grads.get_or_zeros(v, case.inputs[i].shape());
        let floor = 1e-2 * g.max_abs();
        let len = case.inputs[i].len();
        let coords: Vec<usize> = if len <= cfg.max_coords {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, cfg.max_coords).into_vec()
        };
        for j in coords {
            let x0 = inputs[i].data()[j];
            let mut central = |h: f64| -> Result<f64> {
                inputs[i].data_mut()[j] = x0 + h;
                let fp = evaluate(case, &inputs, &proj)?;
                inputs[i].data_mut()[j] = x0 - h;
                let fm = evaluate(case, &inputs, &proj)?;
                inputs[i].data_mut()[j] = x0;
                Ok((fp - fm) / (2.0 * h))
            };
            let num = central(cfg.step)?;
            let a = g.data()[j];
            let scale = a.abs().max(num.abs()).max(floor);
            if (a - num).abs() > cfg.tolerance * scale {
                let fine = central(cfg.step / 10.0)?;
                if (fine - num).abs() > cfg.tolerance * scale.max(fine.abs()) {
                    kinks += 1;
                    continue;
                }
            }
            diff += (a - num) * (a - num);
            na += a * a;
            nn += num * num;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    Ok(CaseError {
        rel_error: if denom == 0.0 { 0.0 } else { diff.sqrt() / denom },
        kinks,
    })
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values whose fractional part stays in `[0.1, 0.9]`, away from the
/// bilinear kinks at integer positions.
fn fractional(shape: &[usize], lo: i32, hi: i32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi) as f64 + rng.random_range(0.1..0.9))
}

fn coords(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = h * w;
    Tensor::from_fn(&[2, h, w], |i| {
        let extent = if i < n { w } else { h };
        rng.random_range(0..extent - 1) as f64 + rng.random_range(0.1..0.9)
    })
}

fn small_net() -> NetConfig {
    NetConfig {
        channels: [4, 4, 4],
        levels: 1,
        kernel: 3,
        dim: 4,
        deform_kernel: 3,
        ..NetConfig::default()
    }
}

fn with_params(
    mut inputs: Vec<Tensor>,
    params: &ParamStore,
    f: impl Fn(&mut Tape, &[Var], &Bound) -> Result<Var> + 'static,
) -> Case {
    let lead = inputs.len();
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    inputs.extend(params.iter().map(|(_, v)| v.clone()));
    Case {
        inputs,
        build: Box::new(move |tape, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars[lead..].iter().copied()));
            f(tape, &vars[..lead], &bound)
        }),
    }
}

fn random_disc(seed: u64, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = init_discriminator(seed);
    let names: Vec<String> = p.iter().map(|(k, _)| k.clone()).collect();
    for n in names {
        if n.ends_with(".b") {
            let t = p.get_mut(&n).expect("known name");
            *t = uniform(t.shape(), -0.1, 0.1, rng);
        }
    }
    p
}

/// The operator names covered by [`make_case`], in report order.
pub const OPS: [&str; 15] = [
    "conv2d",
    "maxpool2d",
    "bilinear_sample",
    "softmax",
    "flow_guided_attention",
    "fcas_offsets",
    "deformable_align",
    "dcaf_fuse",
    "contextual_loss",
    "mfr_loss",
    "align_loss",
    "consistency_loss",
    "generator_loss",
    "discriminator_loss",
    "total_loss",
];

/// Random inputs for `op` drawn from `seed`.
pub fn make_case(op: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let case = match op {
        "conv2d" => {
            let stride = 1 + (seed % 2) as usize;
            Case {
                inputs: vec![normal(&[3, 6, 6], r), normal(&[4, 3, 3, 3], r)],
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, 1)),
            }
        }
        "maxpool2d" => {
            let (k, s) = if seed % 2 == 0 { (2, 2) } else { (3, 1) };
            Case {
                inputs: vec![normal(&[2, 8, 8], r)],
                build: Box::new(move |t, v| t.maxpool2d(v[0], k, s)),
            }
        }
        "bilinear_sample" => {
            let pad = [Padding::Border, Padding::Reflection, Padding::Zeros][(seed % 3) as usize];
            Case {
                inputs: vec![normal(&[2, 6, 6], r), coords(5, 5, r)],
                build: Box::new(move |t, v| t.bilinear_sample(v[0], v[1], pad)),
            }
        }
        "softmax" => {
            let axis = (seed % 3) as usize;
            Case {
                inputs: vec![normal(&[4, 3, 5], r)],
                build: Box::new(move |t, v| t.softmax(v[0], axis)),
            }
        }
        "flow_guided_attention" => {
            let shape = if seed % 2 == 0 { WindowShape::Square } else { WindowShape::Diamond };
            let stride = if seed % 4 == 3 { 2 } else { 1 };
            let op = WindowAttention::new(3, shape, 4, Padding::Border)?;
            Case {
                inputs: vec![
                    normal(&[4, 8, 8], r),
                    normal(&[4, 8, 8], r),
                    fractional(&[2, 8, 8], -2, 2, r),
                    normal(&[4, 4, 1, 1], r),
                    normal(&[4, 4, 1, 1], r),
                    normal(&[4, 4, 1, 1], r),
                ],
                build: Box::new(move |t, v| {
                    let proj = Projections {
                        wq: v[3],
                        wk: v[4],
                        wv: v[5],
                    };
                    Ok(flow_guided_attention(t, v[0], v[1], v[2], &proj, &op, stride)?.output)
                }),
            }
        }
        "fcas_offsets" => {
            let coarse = seed % 2 == 0;
            let cin = 4 + 4 + 2 + if coarse { 18 } else { 0 };
            let mut inputs = vec![
                normal(&[4, 6, 6], r),
                normal(&[4, 6, 6], r),
                normal(&[2, 6, 6], r),
                normal(&[18, cin, 3, 3], r),
                normal(&[18], r),
            ];
            if coarse {
                inputs.push(normal(&[18, 6, 6], r));
            }
            Case {
                inputs,
                build: Box::new(move |t, v| fcas_offsets(t, v[0], v[1], v[2], v.get(5).copied(), v[3], v[4])),
            }
        }
        "deformable_align" => {
            let op = DeformConv::new(3, Padding::Border)?;
            Case {
                inputs: vec![
                    normal(&[3, 6, 6], r),
                    fractional(&[18, 6, 6], -1, 1, r),
                    uniform(&[2, 6, 6], -0.05, 0.05, r),
                    normal(&[4, 3, 3, 3], r),
                ],
                build: Box::new(move |t, v| deformable_align(t, v[0], v[1], v[2], v[3], &op)),
            }
        }
        "dcaf_fuse" => {
            let cfg = small_net();
            let mut p = ParamStore::new();
            for n in ["q", "k", "v"] {
                p.insert(format!("dcaf.{n}.w"), normal(&[4, 4, 1, 1], r));
            }
            p.insert("dcaf.off.w", uniform(&[18, 4, 3, 3], -0.3, 0.3, r));
            p.insert("dcaf.off.b", fractional(&[18], -1, 1, r));
            p.insert("dcaf.dk.w", normal(&[4, 4, 3, 3], r));
            p.insert("dcaf.dv.w", normal(&[4, 4, 3, 3], r));
            p.insert("dcaf.out.w", normal(&[4, 8, 1, 1], r));
            p.insert("dcaf.out.b", normal(&[4], r));
            let inputs = vec![normal(&[4, 8, 8], r), normal(&[4, 8, 8], r)];
            with_params(inputs, &p, move |t, v, b| Ok(dcaf_fuse(t, b, &cfg, v[0], v[1])?.output))
        }
        "contextual_loss" => {
            let params = ContextualParams::default();
            Case {
                inputs: vec![normal(&[4, 3, 3], r), normal(&[4, 3, 3], r)],
                build: Box::new(move |t, v| t.contextual_loss(v[0], v[1], params)),
            }
        }
        "mfr_loss" => {
            let embedder = Embedder::default();
            let refs = [
                reference_features(&embedder, &uniform(&[3, 32, 32], 0.0, 1.0, r))?,
                reference_features(&embedder, &uniform(&[3, 32, 32], 0.0, 1.0, r))?,
            ];
            let cfg = LossConfig {
                distance: if seed % 2 == 0 { RefDistance::Contextual } else { RefDistance::PooledCosine },
                ..LossConfig::default()
            };
            Case {
                inputs: vec![uniform(&[3, 32, 32], 0.05, 0.95, r)],
                build: Box::new(move |t, v| mfr_loss(t, &embedder, v[0], [&refs[0], &refs[1]], &cfg)),
            }
        }
        "align_loss" => Case {
            inputs: vec![normal(&[4, 8, 8], r), normal(&[4, 8, 8], r)],
            build: Box::new(|t, v| align_loss(t, v[0], v[1])),
        },
        "consistency_loss" => {
            let flow = fractional(&[2, 8, 8], -2, 2, r);
            let mask = Tensor::from_fn(&[1, 8, 8], |_| if r.random_bool(0.6) { 1.0 } else { 0.0 });
            Case {
                inputs: vec![uniform(&[3, 8, 8], 0.0, 1.0, r), uniform(&[3, 8, 8], 0.0, 1.0, r)],
                build: Box::new(move |t, v| Ok(consistency_loss(t, v[0], v[1], &flow, &mask)?.loss)),
            }
        }
        "generator_loss" => {
            let p = random_disc(seed, r);
            with_params(vec![uniform(&[3, 16, 16], 0.0, 1.0, r)], &p, |t, v, b| generator_loss(t, b, v[0]))
        }
        "discriminator_loss" => {
            let p = random_disc(seed, r);
            let inputs = (0..3).map(|_| uniform(&[3, 16, 16], 0.0, 1.0, r)).collect();
            with_params(inputs, &p, |t, v, b| discriminator_loss(t, b, v[0], &v[1..]))
        }
        "total_loss" => {
            let w = LossWeights {
                adv: r.random_range(0.1..2.0),
                mfr: r.random_range(0.1..2.0),
                align: r.random_range(0.1..2.0),
                cr: r.random_range(0.1..2.0),
            };
            Case {
                inputs: (0..4).map(|_| Tensor::scalar(StandardNormal.sample(&mut *r))).collect(),
                build: Box::new(move |t, v| weighted_total(t, [v[0], v[1], v[2], v[3]], &w)),
            }
        }
        _ => return Err(crate::error::Error::invalid("gradcheck", format!("unknown operator `{op}`"))),
    };
    Ok(case)
}

/// Checks one operator over `cfg.seeds` seeds.
pub fn check_op(op: &str, cfg: &GradcheckConfig) -> Result<OpCheck> {
    let (mut worst, mut worst_seed, mut kinks) = (0.0_f64, 0, 0);
    for seed in 0..cfg.seeds as u64 {
        let e = relative_error(&make_case(op, seed)?, cfg, seed)?;
        kinks += e.kinks;
        if e.rel_error > worst || e.rel_error.is_nan() {
            worst = e.rel_error;
            worst_seed = seed;
        }
    }
    Ok(OpCheck {
        op: op.to_string(),
        seeds: cfg.seeds,
        max_rel_error: worst,
        worst_seed,
        kinks,
        passed: worst < cfg.tolerance,
    })
}

pub fn gradcheck_suite(cfg: &GradcheckConfig) -> Result<Vec<OpCheck>> {
    OPS.iter().map(|op| check_op(op, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let case = Case {
            inputs: vec![Tensor::from_fn(&[5], |i| i as f64 - 2.5)],
            build: Box::new(|t, v| t.scale(v[0], 2.0)),
        };
        assert!(relative_error(&case, &GradcheckConfig::default(), 0).unwrap().rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // detach hides the dependence from the tape but not from the differences
        let case = Case {
            inputs: vec![Tensor::from_fn(&[4], |i| i as f64 + 0.5)],
            build: Box::new(|t, v| {
                let d = t.detach(v[0]);
                let p = t.mul(v[0], d)?;
                t.sum(p)
            }),
        };
        let e = relative_error(&case, &GradcheckConfig::default(), 0).unwrap();
        assert!(e.rel_error > 0.1 && e.kinks == 0);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let case = Case {
            inputs: vec![Tensor::new(&[2], vec![3e-6, 1.0]).unwrap()],
            build: Box::new(|t, v| {
                let r = t.leaky_relu(v[0], 0.0)?;
                t.sum(r)
            }),
        };
        let e = relative_error(&case, &GradcheckConfig::default(), 0).unwrap();
        assert_eq!(e.kinks, 1);
        assert!(e.rel_error < 1e-8);
    }

    #[test]
    fn unknown_operator_rejected() {
        assert!(make_case("fft", 0).is_err());
    }
}
