//! The two-frame training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{dehaze_step, infer, init_params, NetConfig};
use crate::autodiff::Tape;
use crate::embed::{Embedder, FeaturePyramid};
use crate::error::{Error, Result};
use crate::flow::{BlockMatchParams, FlowKind, FlowPair};
use crate::haze::{predehaze_dcp, DcpParams, FrameSequence};
use crate::losses::{
    align_loss, consistency_loss, discriminator_loss, generator_loss, init_discriminator, mfr_loss,
    occlusion_mask, reference_features, total_loss, weighted_total, LossConfig, LossParts, LossReport,
};
use crate::nrfm::MatchTable;
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub precision: Precision,
    /// Steps between checkpoints; zero keeps only the final one.
    pub checkpoint_every: usize,
    pub dcp: DcpParams,
    pub flow: FlowKind,
    pub blockmatch: BlockMatchParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            lr: 1e-4,
            disc_lr: 1e-4,
            net: NetConfig::default(),
            loss: LossConfig::default(),
            seed: 1,
            precision: Precision::F64,
            checkpoint_every: 100,
            dcp: DcpParams::default(),
            flow: FlowKind::Blockmatch,
            blockmatch: BlockMatchParams::default(),
        }
    }
}

/// One video prepared for training: pre-dehazed inputs, flows and the
/// matched references of every frame.
pub struct TrainingSet {
    pub inputs: FrameSequence,
    /// `flows[t - 1]` joins frames `t - 1` and `t`.
    pub flows: Vec<FlowPair>,
    pub refs: Vec<[usize; 2]>,
    pub clear: FrameSequence,
    ref_features: Vec<FeaturePyramid>,
}

impl TrainingSet {
    pub fn new(
        hazy: &FrameSequence,
        clear: &FrameSequence,
        table: &MatchTable,
        flows: Vec<FlowPair>,
        dcp: &DcpParams,
        embedder: &Embedder,
    ) -> Result<Self> {
        const OP: &str = "training_set";
        if hazy.is_empty() {
            return Err(Error::invalid(OP, "empty hazy sequence"));
        }
        if table.records.len() != hazy.len() {
            return Err(Error::shape(OP, "match records", hazy.len(), table.records.len()));
        }
        if flows.len() + 1 != hazy.len() {
            return Err(Error::shape(OP, "flow pairs", hazy.len() - 1, flows.len()));
        }
        let refs: Vec<[usize; 2]> = table.records.iter().map(|r| [r.k, r.k2]).collect();
        if let Some(k) = refs.iter().flatten().find(|&&k| k >= clear.len()) {
            return Err(Error::invalid(OP, format!("reference {k} outside {} clear frames", clear.len())));
        }
        let inputs = hazy.frames.iter().map(|f| predehaze_dcp(f, dcp)).collect::<Result<Vec<_>>>()?;
        let ref_features = clear.frames.iter().map(|f| reference_features(embedder, f)).collect::<Result<_>>()?;
        Ok(TrainingSet {
            inputs: FrameSequence::new(inputs),
            flows,
            refs,
            clear: clear.clone(),
            ref_features,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Backward flow into the previous frame; zero for the first frame.
    pub fn bw(&self, t: usize) -> Tensor {
        match t {
            0 => zero_flow(&self.inputs.frames[0]),
            _ => self.flows[t - 1].bw.clone(),
        }
    }
}

fn zero_flow(frame: &Tensor) -> Tensor {
    Tensor::zeros(&[2, frame.shape()[1], frame.shape()[2]])
}

/// Generator, discriminator and their optimizers.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ParamStore,
    pub disc: ParamStore,
    pub embedder: Embedder,
    pub step: usize,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let params = init_params(&cfg.net)?;
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: TrainConfig, params: ParamStore) -> Result<Self> {
        cfg.net.validate()?;
        if !(cfg.lr > 0.0) || !(cfg.disc_lr > 0.0) {
            return Err(Error::invalid("train", "learning rates must be positive"));
        }
        let adam = |lr| {
            Adam::new(AdamConfig {
                lr,
                ..AdamConfig::default()
            })
        };
        Ok(Trainer {
            params,
            disc: init_discriminator(cfg.seed.wrapping_add(1)),
            embedder: Embedder::default(),
            step: 0,
            opt_g: adam(cfg.lr),
            opt_d: adam(cfg.disc_lr),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
        })
    }

    /// Detached output for frame `t`, paired with `t - 1` (or itself).
    fn detached_output(&self, set: &TrainingSet, t: usize) -> Result<Tensor> {
        let prev = t.saturating_sub(1);
        infer(&self.params, &self.cfg.net, &set.inputs.frames[prev], &set.inputs.frames[t], &set.bw(t))
    }

    /// One generator and one discriminator update on a random frame.
    pub fn train_step(&mut self, set: &TrainingSet) -> Result<LossReport> {
        let t = self.rng.random_range(0..set.len());
        let out_prev = if t > 0 { Some(self.detached_output(set, t - 1)?) } else { None };
        let cfg = &self.cfg;
        let mut tape = Tape::new();
        let g = self.params.bind(&mut tape, true);
        let d = self.disc.bind(&mut tape, false);
        let prev = tape.constant(set.inputs.frames[t.saturating_sub(1)].clone());
        let cur = tape.constant(set.inputs.frames[t].clone());
        let flow = tape.constant(set.bw(t));
        let s = dehaze_step(&mut tape, &g, &cfg.net, prev, cur, flow)?;
        let [k1, k2] = set.refs[t];
        let mfr = mfr_loss(
            &mut tape,
            &self.embedder,
            s.output,
            [&set.ref_features[k1], &set.ref_features[k2]],
            &cfg.loss,
        )?;
        let align = align_loss(&mut tape, s.aligned, s.current)?;
        let adv = generator_loss(&mut tape, &d, s.output)?;
        let cr = match out_prev {
            Some(op) => {
                let f = &set.flows[t - 1];
                let mask = occlusion_mask(&f.fw, &f.bw, cfg.loss.alpha1, cfg.loss.alpha2)?;
                let op = tape.constant(op);
                consistency_loss(&mut tape, s.output, op, &f.fw, &mask)?.loss
            }
            None => tape.constant(Tensor::scalar(0.0)),
        };
        let report = total_loss(
            LossParts {
                adv: tape.value(adv).item(),
                mfr: tape.value(mfr).item(),
                align: tape.value(align).item(),
                cr: tape.value(cr).item(),
            },
            &cfg.loss.weights,
        )?;
        let total = weighted_total(&mut tape, [adv, mfr, align, cr], &cfg.loss.weights)?;
        let grads = tape.backward(total)?;
        let grads = g.gradients(&grads, &self.params);
        let output = tape.value(s.output).clone();
        drop(tape);
        self.opt_g.step(&mut self.params, &grads).map_err(|_| Error::NonFiniteLoss("gradient"))?;

        let mut tape = Tape::new();
        let d = self.disc.bind(&mut tape, true);
        let out = tape.constant(output);
        let refs = [tape.constant(set.clear.frames[k1].clone()), tape.constant(set.clear.frames[k2].clone())];
        let dl = discriminator_loss(&mut tape, &d, out, &refs)?;
        if !tape.value(dl).is_finite() {
            return Err(Error::NonFiniteLoss("discriminator"));
        }
        let grads = tape.backward(dl)?;
        let grads = d.gradients(&grads, &self.disc);
        self.opt_d.step(&mut self.disc, &grads).map_err(|_| Error::NonFiniteLoss("gradient"))?;
        self.step += 1;
        Ok(report)
    }
}

/// Sequential two-frame inference; the first frame is paired with itself.
pub fn dehaze_sequence(params: &ParamStore, net: &NetConfig, inputs: &FrameSequence, flows: &[FlowPair]) -> Result<FrameSequence> {
    if !inputs.is_empty() && flows.len() + 1 != inputs.len() {
        return Err(Error::shape("dehaze", "flow pairs", inputs.len() - 1, flows.len()));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let cur = &inputs.frames[t];
        let (prev, bw) = match t {
            0 => (cur, zero_flow(cur)),
            _ => (&inputs.frames[t - 1], flows[t - 1].bw.clone()),
        };
        out.push(infer(params, net, prev, cur, &bw)?);
    }
    Ok(FrameSequence::new(out))
}
