//! Training runs with logs and checkpoints, inference and evaluation over
//! frame directories.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::NetConfig;
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::flow::{BlockMatchParams, FlowKind};
use crate::haze::{predehaze_dcp, DcpParams, FrameSequence};
use crate::io::{load_sequence, save_sequence, FrameFormat, DEFAULT_PATTERN};
use crate::losses::LossReport;
use crate::metrics::{evaluate, EvalReport};
use crate::nrfm::{accuracy, MatchTable};
use crate::params::ParamStore;

use super::dataset::{provide_flows, Dataset};
use super::matching::{read_table, table_path};
use super::train::{dehaze_sequence, TrainConfig, Trainer, TrainingSet};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const MODEL_FILE: &str = "model.json";
pub const LOG_FILE: &str = "train.jsonl";

/// What inference needs besides the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub net: NetConfig,
    pub dcp: DcpParams,
    pub step: usize,
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Writes parameters and metadata into `dir`, replacing it only once the
/// new copy is complete.
pub fn save_checkpoint(dir: &Path, params: &ParamStore, meta: &ModelMeta) -> Result<()> {
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    params.save(&staging)?;
    let model = staging.join(MODEL_FILE);
    fs::write(&model, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&model, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, ModelMeta)> {
    let model = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&model).map_err(|e| Error::io(&model, e))?;
    let meta: ModelMeta = serde_json::from_str(&text)?;
    meta.net.validate()?;
    Ok((ParamStore::load(dir)?, meta))
}

/// Builds one training set per usable pair, using the tables in `matches`.
pub fn training_sets(ds: &Dataset, matches: &Path, cfg: &TrainConfig, embedder: &Embedder) -> Result<Vec<TrainingSet>> {
    let mut sets = Vec::new();
    for i in 0..ds.manifest.pairs.len() {
        let path = table_path(matches, i);
        if !path.exists() {
            log::warn!("pair {i} has no match table in {}, skipped", matches.display());
            continue;
        }
        let table = read_table(&path)?;
        let p = ds.load_pair(i)?;
        let inputs = predehazed(&p.hazy, &cfg.dcp)?;
        let flows = provide_flows(cfg.flow, &inputs, p.flow_dir.as_deref(), None, &cfg.blockmatch)?;
        sets.push(TrainingSet::new(&p.hazy, &p.clear, &table, flows, &cfg.dcp, embedder)?);
    }
    if sets.is_empty() {
        return Err(Error::invalid("train", "no pair has a match table"));
    }
    Ok(sets)
}

pub fn predehazed(hazy: &FrameSequence, dcp: &DcpParams) -> Result<FrameSequence> {
    Ok(FrameSequence::new(hazy.frames.iter().map(|f| predehaze_dcp(f, dcp)).collect::<Result<_>>()?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub last: Option<LossReport>,
}

/// Runs `trainer.cfg.iterations` steps cycling over `sets`, appending one
/// [`LogLine`] per step to `log` and checkpointing into `out/checkpoint`.
///
/// The initial parameters are checkpointed before the first step. A
/// non-finite loss aborts the run and leaves the last checkpoint in place.
pub fn run_training(trainer: &mut Trainer, sets: &[TrainingSet], out: &Path, log: &mut impl Write) -> Result<TrainSummary> {
    if sets.is_empty() {
        return Err(Error::invalid("train", "no training data"));
    }
    let ckpt = out.join(CHECKPOINT_DIR);
    let meta = |t: &Trainer| ModelMeta {
        net: t.cfg.net.clone(),
        dcp: t.cfg.dcp,
        step: t.step,
    };
    save_checkpoint(&ckpt, &trainer.params, &meta(trainer))?;
    let mut last = None;
    for _ in 0..trainer.cfg.iterations {
        let set = &sets[trainer.step % sets.len()];
        let report = trainer.train_step(set)?;
        let line = LogLine {
            step: trainer.step,
            report,
        };
        serde_json::to_writer(&mut *log, &line)?;
        log.write_all(b"\n").map_err(|e| Error::io(out, e))?;
        last = Some(report);
        let every = trainer.cfg.checkpoint_every;
        if (every > 0 && trainer.step % every == 0) || trainer.step == trainer.cfg.iterations {
            save_checkpoint(&ckpt, &trainer.params, &meta(trainer))?;
        }
    }
    Ok(TrainSummary { steps: trainer.step, last })
}

/// Loads the training log written by [`run_training`].
pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Where the frames to dehaze come from and how flows are provided.
#[derive(Clone, Debug)]
pub struct DehazeJob {
    pub hazy_dir: PathBuf,
    pub pattern: String,
    pub format: FrameFormat,
    pub flow: FlowKind,
    pub truth_flow_dir: Option<PathBuf>,
    pub flow_dir: Option<PathBuf>,
    pub blockmatch: BlockMatchParams,
}

impl DehazeJob {
    pub fn new(hazy_dir: PathBuf, format: FrameFormat, flow: FlowKind) -> Self {
        DehazeJob {
            hazy_dir,
            pattern: DEFAULT_PATTERN.to_string(),
            format,
            flow,
            truth_flow_dir: None,
            flow_dir: None,
            blockmatch: BlockMatchParams::default(),
        }
    }
}

/// Pre-dehazes and runs the network over a directory of hazy frames.
pub fn dehaze_frames(params: &ParamStore, meta: &ModelMeta, job: &DehazeJob) -> Result<FrameSequence> {
    let hazy = load_sequence(&job.hazy_dir, &job.pattern, job.format)?;
    let (h, w) = hazy
        .extent()
        .ok_or_else(|| Error::invalid("dehaze", format!("no frames in {}", job.hazy_dir.display())))?;
    let min = meta.net.min_extent();
    if h < min || w < min {
        return Err(Error::invalid(
            "dehaze",
            format!("frames are {h}x{w}; this checkpoint needs at least {min}x{min}"),
        ));
    }
    let inputs = predehazed(&hazy, &meta.dcp)?;
    let flows = provide_flows(job.flow, &inputs, job.truth_flow_dir.as_deref(), job.flow_dir.as_deref(), &job.blockmatch)?;
    dehaze_sequence(params, &meta.net, &inputs, &flows)
}

pub fn write_frames(dir: &Path, frames: &FrameSequence, format: FrameFormat) -> Result<()> {
    save_sequence(dir, frames, DEFAULT_PATTERN, format)
}

/// Scores `outputs` against `clear`, adding match accuracy when both tables
/// are given.
pub fn eval_frames(outputs: &FrameSequence, clear: &FrameSequence, tables: Option<(&MatchTable, &MatchTable)>) -> Result<EvalReport> {
    let mut report = evaluate(&outputs.frames, &clear.frames)?;
    if let Some((found, truth)) = tables {
        let acc = accuracy(found, truth)?;
        report.match_exact_rate = Some(acc.exact_rate);
        report.match_mean_abs_error = Some(acc.mean_abs_error);
    }
    Ok(report)
}
