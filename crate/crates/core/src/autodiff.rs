//! Operator-level reverse-mode differentiation.
//!
//! A [`Tape`] records one node per operator call. Nodes are appended in
//! evaluation order, so every node's inputs precede it and walking the node
//! list backwards visits operators in reverse topological order. Each node
//! carries whatever its vector-Jacobian product needs (pooling argmax,
//! attention weights, ...).
//!
//! ```
//! use dvd_core::autodiff::Tape;
//! use dvd_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::attention::WindowAttention;
use crate::ops::contextual::{contextual_loss, contextual_loss_backward, ContextualParams};
use crate::ops::deform::DeformConv;
use crate::ops::{conv, pool, sample, softmax, Padding};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    ChannelBias(usize, usize),
    Concat(Vec<usize>),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    GlobalAvgPool(usize),
    MeanAbsDiff(usize, usize),
    MaskedMeanAbsDiff(usize, usize, Tensor, f64),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Sample {
        x: usize,
        coords: usize,
        padding: Padding,
    },
    Softmax(usize, usize),
    Cosine(usize, usize, f64),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        centers: usize,
        op: WindowAttention,
        weights: Tensor,
    },
    Deform {
        x: usize,
        offsets: usize,
        flow: usize,
        weight: usize,
        op: DeformConv,
    },
    Contextual(usize, usize, ContextualParams),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operators for one forward pass; exclusively owned by one step.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or input being checked).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Copies `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn same_shape(&self, name: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(Error::shape(name, "operand shape", format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", a, b)?;
        let v = self.val(a).zip_map(self.val(b), |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", a, b)?;
        let v = self.val(a).zip_map(self.val(b), |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", a, b)?;
        let v = self.val(a).zip_map(self.val(b), |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.val(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.val(a).map(|x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.val(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push("leaky_relu", v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.val(a).map(f64::tanh);
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.val(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.val(a).map(f64::ln);
        self.push("log", v, Op::Log(a), &[a])
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.val(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", v, Op::Clamp(a, lo, hi), &[a])
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C, ...]` tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(bias)?);
        let c = self.val(xi).shape()[0];
        if self.val(bi).len() != c {
            return Err(Error::shape("channel_bias", "bias length", c, self.val(bi).len()));
        }
        let plane = self.val(xi).len() / c;
        let b = self.val(bi).data().to_vec();
        let mut v = self.val(xi).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += b[i / plane];
        }
        self.push("channel_bias", v, Op::ChannelBias(xi, bi), &[xi, bi])
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let tail = self.val(idx[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let t = self.val(i);
            if t.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    "trailing dims",
                    format!("{tail:?}"),
                    format!("{:?}", &t.shape()[1..]),
                ));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::new(&shape, data)?;
        self.push("concat", v, Op::Concat(idx.clone()), &idx)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.val(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = Tensor::scalar(self.val(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = Tensor::scalar(self.val(a).mean());
        self.push("mean", v, Op::Mean(a), &[a])
    }

    /// `[C, H, W]` to the `[C]` vector of spatial means.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let (c, h, w) = self.val(a).dims3("global_avg_pool")?;
        let n = (h * w) as f64;
        let d = self.val(a).data();
        let v: Vec<f64> = (0..c)
            .map(|ch| d[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / n)
            .collect();
        let v = Tensor::new(&[c], v)?;
        self.push("global_avg_pool", v, Op::GlobalAvgPool(a), &[a])
    }

    /// Mean absolute difference, a scalar.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mean_abs_diff", a, b)?;
        let v = Tensor::scalar(self.val(a).mean_abs_diff(self.val(b)));
        self.push("mean_abs_diff", v, Op::MeanAbsDiff(a, b), &[a, b])
    }

    /// `sum(mask * |a - b|) / (C * sum(mask))` with a `[1, H, W]` mask
    /// broadcast over the channels of `[C, H, W]` operands. Zero when the
    /// mask is empty.
    pub fn masked_mean_abs_diff(&mut self, a: Var, b: Var, mask: &Tensor) -> Result<Var> {
        const OP: &str = "masked_mean_abs_diff";
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(OP, a, b)?;
        let (c, h, w) = self.val(a).dims3(OP)?;
        if mask.shape() != [1, h, w] {
            return Err(Error::shape(OP, "mask", format!("[1, {h}, {w}]"), format!("{:?}", mask.shape())));
        }
        let count = mask.sum() * c as f64;
        let (da, db, m) = (self.val(a).data(), self.val(b).data(), mask.data());
        let mut s = 0.0;
        for (i, (x, y)) in da.iter().zip(db).enumerate() {
            s += m[i % (h * w)] * (x - y).abs();
        }
        let v = Tensor::scalar(if count > 0.0 { s / count } else { 0.0 });
        self.push(OP, v, Op::MaskedMeanAbsDiff(a, b, mask.clone(), count), &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let v = conv::conv2d(self.val(xi), self.val(wi), stride, padding)?;
        self.push(
            "conv2d",
            v,
            Op::Conv2d {
                x: xi,
                w: wi,
                stride,
                padding,
            },
            &[xi, wi],
        )
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let p = pool::maxpool2d(self.val(xi), k, stride)?;
        self.push(
            "maxpool2d",
            p.output,
            Op::MaxPool {
                x: xi,
                argmax: p.argmax,
            },
            &[xi],
        )
    }

    pub fn bilinear_sample(&mut self, x: Var, coords: Var, padding: Padding) -> Result<Var> {
        let (xi, ci) = (self.idx(x)?, self.idx(coords)?);
        let v = sample::bilinear_sample(self.val(xi), self.val(ci), padding)?;
        self.push(
            "bilinear_sample",
            v,
            Op::Sample {
                x: xi,
                coords: ci,
                padding,
            },
            &[xi, ci],
        )
    }

    /// Bilinear resize of `[C, H, W]` to `[C, ho, wo]`.
    pub fn resize(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3("resize")?;
        let grid = self.constant(sample::resize_grid(h, w, ho, wo));
        self.bilinear_sample(x, grid, Padding::Border)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = softmax::softmax(self.val(xi), axis)?;
        self.push("softmax", v, Op::Softmax(xi, axis), &[xi])
    }

    /// Cosine similarity of two equal-length vectors, a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.val(ai).len() != self.val(bi).len() {
            return Err(Error::shape(
                "cosine_similarity",
                "length",
                self.val(ai).len(),
                self.val(bi).len(),
            ));
        }
        let s = softmax::cosine_similarity(self.val(ai).data(), self.val(bi).data(), eps);
        self.push("cosine_similarity", Tensor::scalar(s), Op::Cosine(ai, bi, eps), &[ai, bi])
    }

    /// Windowed cosine attention; returns the output and the `[S, H, W]` weights.
    pub fn window_attention(
        &mut self,
        op: &WindowAttention,
        q: Var,
        k: Var,
        v: Var,
        centers: Var,
    ) -> Result<(Var, Tensor)> {
        let (qi, ki, vi, ci) = (self.idx(q)?, self.idx(k)?, self.idx(v)?, self.idx(centers)?);
        let out = op.forward(self.val(qi), self.val(ki), self.val(vi), self.val(ci))?;
        let weights = out.weights.clone();
        let var = self.push(
            "flow_guided_attention",
            out.output,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                centers: ci,
                op: op.clone(),
                weights: out.weights,
            },
            &[qi, ki, vi, ci],
        )?;
        Ok((var, weights))
    }

    pub fn deform_conv(&mut self, op: &DeformConv, x: Var, offsets: Var, flow: Var, weight: Var) -> Result<Var> {
        let (xi, oi, fi, wi) = (self.idx(x)?, self.idx(offsets)?, self.idx(flow)?, self.idx(weight)?);
        let v = op.forward(self.val(xi), self.val(oi), self.val(fi), self.val(wi))?;
        self.push(
            "deformable_conv",
            v,
            Op::Deform {
                x: xi,
                offsets: oi,
                flow: fi,
                weight: wi,
                op: *op,
            },
            &[xi, oi, fi, wi],
        )
    }

    pub fn contextual_loss(&mut self, x: Var, y: Var, params: ContextualParams) -> Result<Var> {
        let (xi, yi) = (self.idx(x)?, self.idx(y)?);
        let l = contextual_loss(self.val(xi), self.val(yi), &params)?;
        self.push("contextual_loss", Tensor::scalar(l), Op::Contextual(xi, yi, params), &[xi, yi])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if !self.val(li).is_scalar() {
            return Err(Error::shape("backward", "loss elements", 1, self.val(li).len()));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::invalid(
                "backward",
                "loss is not connected to any differentiable input",
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[li] = Some(Tensor::full(self.val(li).shape(), 1.0));
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.vjp(i, &g)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.axpy(1.0, &gi),
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gs = g.data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(self.val(*b), |x, y| x * y)),
                (*b, g.zip_map(self.val(*a), |x, y| x * y)),
            ],
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::LeakyRelu(a, slope) => {
                vec![(*a, g.zip_map(self.val(*a), |gv, x| if x > 0.0 { gv } else { gv * slope }))]
            }
            Op::Tanh(a) => vec![(*a, g.zip_map(out, |gv, y| gv * (1.0 - y * y)))],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |gv, y| gv * y * (1.0 - y)))],
            Op::Log(a) => vec![(*a, g.zip_map(self.val(*a), |gv, x| gv / x))],
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                g.zip_map(self.val(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 }),
            )],
            Op::ChannelBias(x, b) => {
                let c = self.val(*b).len();
                let plane = gs.len() / c;
                let gb: Vec<f64> = (0..c).map(|ch| gs[ch * plane..(ch + 1) * plane].iter().sum()).collect();
                vec![(*x, g.clone()), (*b, Tensor::new(self.val(*b).shape(), gb)?)]
            }
            Op::Concat(parts) => {
                let mut at = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.val(p).len();
                    out.push((p, Tensor::new(self.val(p).shape(), gs[at..at + n].to_vec())?));
                    at += n;
                }
                out
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(self.val(*a).shape())?)],
            Op::Sum(a) => vec![(*a, Tensor::full(self.val(*a).shape(), gs[0]))],
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                vec![(*a, Tensor::full(self.val(*a).shape(), gs[0] / n))]
            }
            Op::GlobalAvgPool(a) => {
                let (_, h, w) = self.val(*a).dims3("global_avg_pool")?;
                let n = (h * w) as f64;
                let t = Tensor::from_fn(self.val(*a).shape(), |j| gs[j / (h * w)] / n);
                vec![(*a, t)]
            }
            Op::MeanAbsDiff(a, b) => {
                let n = self.val(*a).len() as f64;
                let s = gs[0] / n;
                let ga = self.val(*a).zip_map(self.val(*b), |x, y| s * sign(x - y));
                let gb = ga.map(|v| -v);
                vec![(*a, ga), (*b, gb)]
            }
            Op::MaskedMeanAbsDiff(a, b, mask, count) => {
                if *count <= 0.0 {
                    return Ok(vec![]);
                }
                let plane = mask.len();
                let m = mask.data();
                let s = gs[0] / count;
                let da = self.val(*a).data();
                let db = self.val(*b).data();
                let ga: Vec<f64> = (0..da.len()).map(|j| s * m[j % plane] * sign(da[j] - db[j])).collect();
                let ga = Tensor::new(self.val(*a).shape(), ga)?;
                let gb = ga.map(|v| -v);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { x, w, stride, padding } => {
                let (gx, gw) = conv::conv2d_backward(
                    self.val(*x),
                    self.val(*w),
                    *stride,
                    *padding,
                    g,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                gx.map(|t| (*x, t)).into_iter().chain(gw.map(|t| (*w, t))).collect()
            }
            Op::MaxPool { x, argmax } => {
                vec![(*x, pool::maxpool2d_backward(self.val(*x).shape(), argmax, g))]
            }
            Op::Sample { x, coords, padding } => {
                let (gx, gc) = sample::bilinear_sample_backward(self.val(*x), self.val(*coords), *padding, g)?;
                vec![(*x, gx), (*coords, gc)]
            }
            Op::Softmax(x, axis) => vec![(*x, softmax::softmax_backward(out, *axis, g)?)],
            Op::Cosine(a, b, eps) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                softmax::cosine_grad_wrt(va, vb, *eps, &mut ga, gs[0]);
                softmax::cosine_grad_wrt(vb, va, *eps, &mut gb, gs[0]);
                vec![
                    (*a, Tensor::new(self.val(*a).shape(), ga)?),
                    (*b, Tensor::new(self.val(*b).shape(), gb)?),
                ]
            }
            Op::Attention { q, k, v, centers, op, weights } => {
                let [gq, gk, gv, gc] = op.backward(
                    self.val(*q),
                    self.val(*k),
                    self.val(*v),
                    self.val(*centers),
                    weights,
                    g,
                    self.needs(*centers),
                )?;
                vec![(*q, gq), (*k, gk), (*v, gv), (*centers, gc)]
            }
            Op::Deform { x, offsets, flow, weight, op } => {
                let [gx, go, gf, gw] = op.backward(
                    self.val(*x),
                    self.val(*offsets),
                    self.val(*flow),
                    self.val(*weight),
                    g,
                )?;
                vec![(*x, gx), (*offsets, go), (*flow, gf), (*weight, gw)]
            }
            Op::Contextual(x, y, params) => {
                let (gx, gy) = contextual_loss_backward(self.val(*x), self.val(*y), params, gs[0])?;
                vec![(*x, gx), (*y, gy)]
            }
        })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let l = t.sum(x).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut t = Tape::new();
        let xv = Tensor::from_fn(&[5], |i| i as f64 - 2.5);
        let x = t.leaf(xv.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let l = t.scale(s, 0.5).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv);
    }

    #[test]
    fn foreign_and_disconnected_losses_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        let y = b.leaf(Tensor::scalar(2.0));
        let _ = a.sum(x).unwrap();
        assert!(matches!(a.backward(y), Err(Error::ForeignVar)));
        let c = a.constant(Tensor::scalar(3.0));
        let s = a.sum(c).unwrap();
        assert!(a.backward(s).is_err());
        let v = a.leaf(Tensor::zeros(&[2]));
        assert!(a.backward(v).is_err());
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        assert!(matches!(t.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = t.add(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let l = t.sum(z).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }
}
