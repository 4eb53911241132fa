//! Toy-scale experiments on the standard synthetic scene: the end-to-end
//! training run, the attention kernel sweep and the module ablation.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::Result;
use crate::flow::{FlowKind, FlowPair};
use crate::haze::FrameSequence;
use crate::metrics::psnr;
use crate::nrfm::{run_nrfm, NrfmConfig};

use super::dataset::{provide_flows, synth_pair, SynthConfig, SynthPair};
use super::run::predehazed;
use super::train::{dehaze_sequence, TrainConfig, Trainer, TrainingSet};

/// Pair index of the held-out scene within the synthesis config.
pub const HELDOUT_PAIR: usize = 1;
/// Window of the early loss baseline.
pub const EARLY_WINDOW: usize = 10;
/// Window of the late loss average.
pub const LATE_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub label: String,
    pub iterations: usize,
    /// Mean total loss over the first [`EARLY_WINDOW`] steps.
    pub early_loss: f64,
    /// Mean total loss over the [`LATE_WINDOW`] steps ending at step 50.
    pub loss_at_50: Option<f64>,
    /// Mean total loss over the last [`LATE_WINDOW`] steps.
    pub final_loss: f64,
    pub final_align: f64,
    /// Mean PSNR of the pre-dehazed held-out frames.
    pub baseline_psnr: f64,
    pub psnr: f64,
    pub seconds: f64,
}

impl RunScore {
    /// Fractional drop of the late average from the early one.
    pub fn loss_drop(&self) -> f64 {
        1.0 - self.final_loss / self.early_loss
    }

    pub fn psnr_gain(&self) -> f64 {
        self.psnr - self.baseline_psnr
    }
}

fn flows_for(kind: FlowKind, s: &SynthPair, inputs: &FrameSequence, cfg: &TrainConfig) -> Result<Vec<FlowPair>> {
    match kind {
        FlowKind::Truth => Ok(s.flows.clone()),
        _ => provide_flows(kind, inputs, None, None, &cfg.blockmatch),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains on pair 0 of `synth` with references found by matching and scores
/// the result on the held-out pair against its haze-free frames.
pub fn toy_run(label: &str, cfg: &TrainConfig, synth: &SynthConfig) -> Result<RunScore> {
    let start = Instant::now();
    let embedder = Embedder::default();
    let train = synth_pair(synth, 0)?;
    let table = run_nrfm(&train.pair.hazy, &train.pair.clear, &embedder, &NrfmConfig::default())?;
    let inputs = predehazed(&train.pair.hazy, &cfg.dcp)?;
    let flows = flows_for(cfg.flow, &train, &inputs, cfg)?;
    let set = TrainingSet::new(&train.pair.hazy, &train.pair.clear, &table, flows, &cfg.dcp, &embedder)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut totals = Vec::with_capacity(cfg.iterations);
    let mut aligns = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let r = trainer.train_step(&set)?;
        totals.push(r.total);
        aligns.push(r.align);
    }
    let held = synth_pair(synth, HELDOUT_PAIR)?;
    let held_inputs = predehazed(&held.pair.hazy, &cfg.dcp)?;
    let held_flows = flows_for(cfg.flow, &held, &held_inputs, cfg)?;
    let out = dehaze_sequence(&trainer.params, &cfg.net, &held_inputs, &held_flows)?;
    let score = |frames: &FrameSequence| -> Result<f64> {
        let v = frames.frames.iter().zip(&held.pair.gt.frames).map(|(a, b)| psnr(a, b)).collect::<Result<Vec<_>>>()?;
        Ok(mean(&v))
    };
    let n = totals.len();
    let late = n.saturating_sub(LATE_WINDOW);
    Ok(RunScore {
        label: label.to_string(),
        iterations: cfg.iterations,
        early_loss: mean(&totals[..n.min(EARLY_WINDOW)]),
        loss_at_50: (n >= LATE_WINDOW).then(|| mean(&totals[..LATE_WINDOW])),
        final_loss: mean(&totals[late..]),
        final_align: mean(&aligns[late..]),
        baseline_psnr: score(&held_inputs)?,
        psnr: score(&out)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One toy run per attention window size.
pub fn kernel_sweep(kernels: &[usize], cfg: &TrainConfig, synth: &SynthConfig) -> Result<Vec<RunScore>> {
    kernels
        .iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.net.kernel = k;
            toy_run(&format!("k={k}"), &c, synth)
        })
        .collect()
}

/// Plain warp and 1x1 fusion, then attention sampling, then attention fusion.
pub fn ablation(cfg: &TrainConfig, synth: &SynthConfig) -> Result<Vec<RunScore>> {
    [("basic", false, false), ("basic+FCAS", true, false), ("basic+FCAS+DCAF", true, true)]
        .into_iter()
        .map(|(label, fcas, dcaf)| {
            let mut c = cfg.clone();
            c.net.fcas = fcas;
            c.net.dcaf = dcaf;
            toy_run(label, &c, synth)
        })
        .collect()
}

/// Plain-text comparison table, one row per run.
pub fn format_table(scores: &[RunScore]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:>6} {:>10} {:>10} {:>7} {:>10} {:>9} {:>9} {:>8}",
        "run", "iters", "early", "final", "drop", "align", "psnr", "gain", "secs"
    );
    for r in scores {
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>10.4} {:>10.4} {:>6.1}% {:>10.5} {:>9.3} {:>+9.3} {:>8.1}",
            r.label,
            r.iterations,
            r.early_loss,
            r.final_loss,
            100.0 * r.loss_drop(),
            r.final_align,
            r.psnr,
            r.psnr_gain(),
            r.seconds
        );
    }
    s
}
