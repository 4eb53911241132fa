//! Reference matching over every pair of a dataset.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::nrfm::{accuracy, run_nrfm, MatchRecord, MatchTable, NrfmConfig};

use super::dataset::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub nrfm: NrfmConfig,
    /// Replace every match with a uniformly random clear frame.
    pub unpaired: bool,
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            nrfm: NrfmConfig::default(),
            unpaired: false,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMatch {
    pub pair: usize,
    /// File name inside the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_abs_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub pairs: Vec<PairMatch>,
    /// Means over the pairs that have truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_abs_error: Option<f64>,
}

pub fn table_path(dir: &Path, pair: usize) -> PathBuf {
    dir.join(format!("pair_{pair:03}.jsonl"))
}

pub fn read_table(path: &Path) -> Result<MatchTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    MatchTable::read_jsonl(std::io::BufReader::new(file))
}

/// Random references, one per hazy frame.
pub fn unpaired_table(n: usize, m: usize, rng: &mut ChaCha8Rng) -> MatchTable {
    let records = (0..n)
        .map(|t| {
            let k = rng.random_range(0..m);
            MatchRecord {
                t,
                k,
                k2: (k + 1).min(m - 1),
                score: 0.0,
                win: [0, m - 1],
            }
        })
        .collect();
    MatchTable { records }
}

/// Matches every pair and writes one table per pair into `out`.
///
/// Pairs with more than `M + 2` hazy frames are skipped with the reason
/// recorded in the summary.
pub fn match_dataset(ds: &Dataset, cfg: &MatchConfig, out: &Path) -> Result<MatchSummary> {
    if ds.manifest.pairs.is_empty() {
        return Err(Error::invalid("match", "manifest lists no pairs"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let embedder = Embedder::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::with_capacity(ds.manifest.pairs.len());
    for i in 0..ds.manifest.pairs.len() {
        let p = ds.load_pair(i)?;
        let (n, m) = (p.hazy.len(), p.clear.len());
        if n == 0 || m == 0 || n > m + 2 {
            let reason = format!("{n} hazy and {m} clear frames violate 0 < N <= M + 2");
            log::warn!("pair {i} skipped: {reason}");
            pairs.push(PairMatch {
                pair: i,
                table: None,
                exact_rate: None,
                mean_abs_error: None,
                skipped: Some(reason),
            });
            continue;
        }
        let table = if cfg.unpaired {
            unpaired_table(n, m, &mut rng)
        } else {
            run_nrfm(&p.hazy, &p.clear, &embedder, &cfg.nrfm)?
        };
        let path = table_path(out, i);
        let mut buf = Vec::new();
        table.write_jsonl(&mut buf)?;
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        let acc = p.truth.as_ref().map(|t| accuracy(&table, t)).transpose()?;
        pairs.push(PairMatch {
            pair: i,
            table: path.file_name().map(PathBuf::from),
            exact_rate: acc.map(|a| a.exact_rate),
            mean_abs_error: acc.map(|a| a.mean_abs_error),
            skipped: None,
        });
    }
    let mean = |f: fn(&PairMatch) -> Option<f64>| {
        let v: Vec<f64> = pairs.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(MatchSummary {
        exact_rate: mean(|p| p.exact_rate),
        mean_abs_error: mean(|p| p.mean_abs_error),
        pairs,
    })
}
