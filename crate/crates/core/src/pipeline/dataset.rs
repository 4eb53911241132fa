//! Synthetic datasets on disk and the manifest that describes them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{blockmatch_flows, load_flows, save_flows, truth_flows, BlockMatchParams, FlowKind, FlowPair};
use crate::haze::{make_misaligned_pair, FrameSequence, MisalignedPair, MisalignmentSpec};
use crate::io::{load_sequence, save_sequence, FrameFormat, DEFAULT_PATTERN};
use crate::nrfm::MatchTable;
use crate::scene::{random_misalignment, MisalignmentConfig, RoadScene, RoadSceneConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scene: RoadSceneConfig,
    pub misalignment: MisalignmentConfig,
    /// Used instead of a random misalignment when present.
    pub spec: Option<MisalignmentSpec>,
    /// Number of pairs; pair `i` offsets both seeds by `i`.
    pub pairs: usize,
    pub format: FrameFormat,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scene: RoadSceneConfig {
                frames: 8,
                ..RoadSceneConfig::default()
            },
            misalignment: MisalignmentConfig::default(),
            spec: None,
            pairs: 1,
            format: FrameFormat::Png,
        }
    }
}

/// A synthesized pair together with its exact flows.
pub struct SynthPair {
    pub pair: MisalignedPair,
    pub spec: MisalignmentSpec,
    pub flows: Vec<FlowPair>,
}

/// Builds pair `index` of `cfg` in memory.
pub fn synth_pair(cfg: &SynthConfig, index: usize) -> Result<SynthPair> {
    let i = index as u64;
    let scene_cfg = RoadSceneConfig {
        seed: cfg.scene.seed.wrapping_add(i),
        ..cfg.scene.clone()
    };
    let scene = RoadScene::generate(&scene_cfg)?;
    let spec = match &cfg.spec {
        Some(s) => s.clone(),
        None => {
            let mis = MisalignmentConfig {
                seed: cfg.misalignment.seed.wrapping_add(i),
                ..cfg.misalignment.clone()
            };
            random_misalignment(&mis, scene_cfg.frames, scene_cfg.height, scene_cfg.width)?
        }
    };
    let pair = make_misaligned_pair(&scene.spec, &spec)?;
    let flows = truth_flows(&scene.view_offsets(&spec), scene_cfg.height, scene_cfg.width);
    Ok(SynthPair { pair, spec, flows })
}

/// One hazy/clear pair; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub hazy_dir: PathBuf,
    pub clear_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_file: Option<PathBuf>,
    /// Haze-free counterparts of the hazy frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pairs: Vec<PairEntry>,
    /// Frame file stem with a `{t}` or `{t:04}` placeholder.
    #[serde(default = "default_pattern")]
    pub pattern: String,
    #[serde(default)]
    pub format: FrameFormat,
}

fn default_pattern() -> String {
    DEFAULT_PATTERN.to_string()
}

/// A manifest plus the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

/// Frames and metadata of one pair, loaded from disk.
pub struct LoadedPair {
    pub hazy: FrameSequence,
    pub clear: FrameSequence,
    pub truth: Option<MatchTable>,
    pub gt: Option<FrameSequence>,
    pub flow_dir: Option<PathBuf>,
}

impl Dataset {
    /// Reads `path` (a manifest file or a directory holding one) and checks
    /// that every referenced path exists.
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let ds = Dataset { manifest, root };
        for p in &ds.manifest.pairs {
            let paths = [Some(&p.hazy_dir), Some(&p.clear_dir), p.truth_file.as_ref(), p.gt_dir.as_ref(), p.flow_dir.as_ref()];
            for rel in paths.into_iter().flatten() {
                let abs = ds.resolve(rel);
                if !abs.exists() {
                    return Err(Error::Format {
                        path: file.clone(),
                        msg: format!("referenced path {} does not exist", abs.display()),
                    });
                }
            }
        }
        Ok(ds)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_pair(&self, index: usize) -> Result<LoadedPair> {
        let p = self
            .manifest
            .pairs
            .get(index)
            .ok_or_else(|| Error::invalid("dataset", format!("no pair {index}")))?;
        let (pattern, format) = (&self.manifest.pattern, self.manifest.format);
        let seq = |rel: &Path| load_sequence(&self.resolve(rel), pattern, format);
        let truth = match &p.truth_file {
            Some(f) => {
                let path = self.resolve(f);
                let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
                Some(MatchTable::read_jsonl(std::io::BufReader::new(file))?)
            }
            None => None,
        };
        Ok(LoadedPair {
            hazy: seq(&p.hazy_dir)?,
            clear: seq(&p.clear_dir)?,
            truth,
            gt: p.gt_dir.as_deref().map(seq).transpose()?,
            flow_dir: p.flow_dir.as_ref().map(|d| self.resolve(d)),
        })
    }
}

/// Writes `cfg.pairs` pairs under `out` and returns the manifest.
///
/// Each pair directory holds `clear/`, `hazy/`, `gt/`, `flow/` and
/// `truth.jsonl`.
pub fn synthesize(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    if cfg.pairs == 0 {
        return Err(Error::invalid("synth", "pair count must be positive"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut pairs = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let s = synth_pair(cfg, i)?;
        let name = PathBuf::from(format!("pair_{i:03}"));
        let dir = out.join(&name);
        save_sequence(&dir.join("clear"), &s.pair.clear, DEFAULT_PATTERN, cfg.format)?;
        save_sequence(&dir.join("hazy"), &s.pair.hazy, DEFAULT_PATTERN, cfg.format)?;
        save_sequence(&dir.join("gt"), &s.pair.gt, DEFAULT_PATTERN, cfg.format)?;
        save_flows(&dir.join("flow"), &s.flows)?;
        let truth = dir.join("truth.jsonl");
        let mut buf = Vec::new();
        s.pair.truth.write_jsonl(&mut buf)?;
        fs::write(&truth, buf).map_err(|e| Error::io(&truth, e))?;
        let spec = dir.join("misalignment.json");
        fs::write(&spec, serde_json::to_string_pretty(&s.spec)?).map_err(|e| Error::io(&spec, e))?;
        pairs.push(PairEntry {
            hazy_dir: name.join("hazy"),
            clear_dir: name.join("clear"),
            truth_file: Some(name.join("truth.jsonl")),
            gt_dir: Some(name.join("gt")),
            flow_dir: Some(name.join("flow")),
        });
    }
    let manifest = DatasetManifest {
        pairs,
        pattern: DEFAULT_PATTERN.to_string(),
        format: cfg.format,
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Flow for every adjacent pair of `frames`.
///
/// `truth_dir` holds flows written at synthesis time; `file_dir` holds
/// user-supplied flows in the same layout.
pub fn provide_flows(
    kind: FlowKind,
    frames: &FrameSequence,
    truth_dir: Option<&Path>,
    file_dir: Option<&Path>,
    params: &BlockMatchParams,
) -> Result<Vec<FlowPair>> {
    let (h, w) = frames.extent().ok_or_else(|| Error::invalid("flow", "empty sequence"))?;
    let count = frames.len() - 1;
    match kind {
        FlowKind::Truth => {
            let dir = truth_dir.ok_or_else(|| Error::invalid("flow", "truth flow requested without synthesis metadata"))?;
            load_flows(dir, count, h, w)
        }
        FlowKind::File => {
            let dir = file_dir.ok_or_else(|| Error::invalid("flow", "file flow requested without a flow directory"))?;
            load_flows(dir, count, h, w)
        }
        FlowKind::Blockmatch => blockmatch_flows(frames, params),
    }
}
