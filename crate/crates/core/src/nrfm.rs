//! Sliding-window matching of hazy frames to clear reference frames.
//!
//! Frame `t` is compared only against clear frames inside a window whose
//! start advances by the most recent match step `s` and whose end lies `2s`
//! (at least `window_min - 1`) beyond the start.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::embed::{frame_distance, Embedder, FeaturePyramid, InputNorm};
use crate::error::{Error, Result};
use crate::haze::FrameSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NrfmConfig {
    pub window_min: usize,
    pub step_max: usize,
    /// Input transform of the embedder while matching.
    pub input: InputNorm,
}

impl Default for NrfmConfig {
    fn default() -> Self {
        NrfmConfig {
            window_min: 3,
            step_max: 8,
            input: InputNorm::Standardize,
        }
    }
}

/// Inclusive range of candidate clear indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn contains(&self, k: usize) -> bool {
        (self.start..=self.end).contains(&k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub t: usize,
    pub k: usize,
    pub k2: usize,
    pub score: f64,
    pub win: [usize; 2],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchTable {
    pub records: Vec<MatchRecord>,
}

impl MatchTable {
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("<match table>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| Error::io("<match table>", e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(MatchTable { records })
    }

    pub fn indices(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.k).collect()
    }
}

/// Agreement of a recovered table with the truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchAccuracy {
    pub exact_rate: f64,
    pub mean_abs_error: f64,
}

pub fn accuracy(found: &MatchTable, truth: &MatchTable) -> Result<MatchAccuracy> {
    if found.records.len() != truth.records.len() || found.records.is_empty() {
        return Err(Error::shape("accuracy", "records", truth.records.len(), found.records.len()));
    }
    let n = found.records.len() as f64;
    let (mut exact, mut err) = (0.0, 0.0);
    for (a, b) in found.records.iter().zip(&truth.records) {
        if a.k == b.k {
            exact += 1.0;
        }
        err += (a.k as f64 - b.k as f64).abs();
    }
    Ok(MatchAccuracy {
        exact_rate: exact / n,
        mean_abs_error: err / n,
    })
}

pub fn init_window(n: usize, m: usize, cfg: &NrfmConfig) -> Result<Window> {
    if n == 0 || m == 0 {
        return Err(Error::invalid("init_window", "sequences must be non-empty"));
    }
    if n > m + 2 {
        return Err(Error::invalid(
            "init_window",
            format!("{n} hazy frames exceed {m} clear frames + 2"),
        ));
    }
    let half = m.saturating_sub(n).div_ceil(2);
    Ok(Window {
        start: 0,
        end: half.max(cfg.window_min.saturating_sub(1)).min(m - 1),
    })
}

/// Window after a match step of `s` (already clamped to `[0, step_max]`).
pub fn advance_by(prev: Window, s: usize, m: usize, cfg: &NrfmConfig) -> Window {
    let start = (prev.start + s).min(m - 1);
    let end = (start + 2 * s).max(start + cfg.window_min.saturating_sub(1)).min(m - 1);
    Window { start, end }
}

pub fn advance_window(prev: Window, k_prev: usize, k_prev2: usize, m: usize, cfg: &NrfmConfig) -> Window {
    let s = k_prev.saturating_sub(k_prev2).min(cfg.step_max);
    advance_by(prev, s, m, cfg)
}

/// Argmin of the frame distance over the window, ties toward the smaller index.
pub fn match_frame(hazy: &FeaturePyramid, clear: &[FeaturePyramid], w: Window) -> Result<(usize, f64)> {
    if w.start > w.end || w.end >= clear.len() {
        return Err(Error::invalid(
            "match_frame",
            format!("window [{}, {}] is empty or outside {} clear frames", w.start, w.end, clear.len()),
        ));
    }
    let mut best = (w.start, f64::INFINITY);
    for (i, c) in clear.iter().enumerate().take(w.end + 1).skip(w.start) {
        let d = frame_distance(hazy, c)?;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

/// Matches every hazy frame from precomputed embeddings.
pub fn run_nrfm_embedded(hazy: &[FeaturePyramid], clear: &[FeaturePyramid], cfg: &NrfmConfig) -> Result<MatchTable> {
    let (n, m) = (hazy.len(), clear.len());
    let mut w = init_window(n, m, cfg)?;
    let mut records: Vec<MatchRecord> = Vec::with_capacity(n);
    for (t, h) in hazy.iter().enumerate() {
        if t == 1 {
            let k0 = records[0].k;
            let s = k0.saturating_sub(w.start).max(1).min(cfg.step_max);
            w = advance_by(w, s, m, cfg);
        } else if t > 1 {
            w = advance_window(w, records[t - 1].k, records[t - 2].k, m, cfg);
        }
        let (k, score) = match_frame(h, clear, w).map_err(|e| Error::AtFrame {
            t,
            source: Box::new(e),
        })?;
        records.push(MatchRecord {
            t,
            k,
            k2: (k + 1).min(m - 1),
            score,
            win: [w.start, w.end],
        });
    }
    Ok(MatchTable { records })
}

pub fn run_nrfm(hazy: &FrameSequence, clear: &FrameSequence, embedder: &Embedder, cfg: &NrfmConfig) -> Result<MatchTable> {
    init_window(hazy.len(), clear.len(), cfg)?;
    let embedder = embedder.clone().with_input(cfg.input);
    let he = embed_all(hazy, &embedder)?;
    let ce = embed_all(clear, &embedder)?;
    run_nrfm_embedded(&he, &ce, cfg)
}

pub fn embed_all(seq: &FrameSequence, embedder: &Embedder) -> Result<Vec<FeaturePyramid>> {
    seq.frames.iter().map(|f| embedder.embed(f)).collect()
}

/// Exhaustive per-frame argmin over all clear frames.
pub fn global_argmin(hazy: &[FeaturePyramid], clear: &[FeaturePyramid]) -> Result<Vec<usize>> {
    let all = Window {
        start: 0,
        end: clear.len() - 1,
    };
    hazy.iter().map(|h| match_frame(h, clear, all).map(|r| r.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_windows() {
        let cfg = NrfmConfig::default();
        assert_eq!(init_window(100, 128, &cfg).unwrap(), Window { start: 0, end: 14 });
        assert_eq!(init_window(40, 40, &cfg).unwrap(), Window { start: 0, end: 2 });
        assert!(init_window(43, 40, &cfg).is_err());
        assert_eq!(init_window(42, 40, &cfg).unwrap(), Window { start: 0, end: 2 });
    }

    #[test]
    fn advancing() {
        let cfg = NrfmConfig::default();
        let m = 50;
        let w = Window { start: 10, end: 12 };
        assert_eq!(advance_window(w, 6, 5, m, &cfg), Window { start: 11, end: 13 });
        assert_eq!(advance_window(w, 6, 6, m, &cfg), Window { start: 10, end: 12 });
        let edge = Window { start: m - 2, end: m - 1 };
        assert_eq!(advance_window(edge, 9, 4, m, &cfg), Window { start: m - 1, end: m - 1 });
        let far = advance_window(w, 40, 0, m, &cfg);
        assert_eq!(far.start, 18);
    }

    #[test]
    fn jsonl_round_trip() {
        let t = MatchTable {
            records: vec![MatchRecord {
                t: 0,
                k: 3,
                k2: 4,
                score: 0.25,
                win: [0, 5],
            }],
        };
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"t\":0,\"k\":3,\"k2\":4,\"score\":0.25,\"win\":[0,5]}\n"
        );
        assert_eq!(MatchTable::read_jsonl(&buf[..]).unwrap(), t);
    }
}
