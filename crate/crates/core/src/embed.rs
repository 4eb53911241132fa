//! Fixed feature pyramid used for frame matching and the reference loss.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::conv::conv2d;
use crate::ops::softmax::{cosine_distance, COSINE_EPS};
use crate::tensor::Tensor;

pub const LEVELS: usize = 5;
pub const DEFAULT_SEED: u64 = 0x4456_4431;
pub const DEFAULT_CHANNELS: [usize; LEVELS] = [16, 32, 32, 64, 64];
pub const MIN_EXTENT: usize = 32;
const SLOPE: f64 = 0.2;

/// Five feature maps, each half the extent (rounded up) of the previous.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

/// Transform applied to a frame before the first convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    /// Subtract 0.5.
    #[default]
    Center,
    /// Subtract the mean over all channels and divide by the deviation, which
    /// cancels a gray airlight over a region of constant depth.
    Standardize,
}

/// Five stride-2 3x3 convolutions with leaky ReLU, never trained.
#[derive(Clone, Debug)]
pub struct Embedder {
    weights: Vec<Tensor>,
    pub input: InputNorm,
}

impl Default for Embedder {
    fn default() -> Self {
        Self::seeded(DEFAULT_SEED)
    }
}

impl Embedder {
    /// Orthogonal random kernels drawn from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let weights = DEFAULT_CHANNELS
            .iter()
            .map(|&co| {
                let w = orthogonal(co, cin * 9, &mut rng);
                cin = co;
                Tensor::new(&[co, co_in(&w, co), 3, 3], w).expect("kernel shape")
            })
            .collect();
        Embedder { weights, input: InputNorm::Center }
    }

    /// Loads one `[C_out, C_in, 3, 3]` kernel file per stage.
    pub fn from_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        if paths.len() != LEVELS {
            return Err(Error::invalid("embedder", format!("expected {LEVELS} weight files, got {}", paths.len())));
        }
        let weights: Vec<Tensor> = paths.iter().map(Tensor::load).collect::<Result<_>>()?;
        let mut cin = 3;
        for (i, w) in weights.iter().enumerate() {
            match w.shape()[..] {
                [_, ci, 3, 3] if ci == cin => cin = w.shape()[0],
                _ => {
                    return Err(Error::shape(
                        "embedder",
                        format!("stage {i} weight"),
                        format!("[C_out, {cin}, 3, 3]"),
                        format!("{:?}", w.shape()),
                    ))
                }
            }
        }
        Ok(Embedder { weights, input: InputNorm::Center })
    }

    pub fn with_input(mut self, input: InputNorm) -> Self {
        self.input = input;
        self
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    fn check(frame: &Tensor) -> Result<()> {
        let (c, h, w) = frame.dims3("embed")?;
        if c != 3 {
            return Err(Error::shape("embed", "channels", 3, c));
        }
        if h < MIN_EXTENT || w < MIN_EXTENT {
            return Err(Error::invalid(
                "embed",
                format!("frame {h}x{w} is smaller than {MIN_EXTENT}x{MIN_EXTENT}"),
            ));
        }
        Ok(())
    }

    pub fn embed(&self, frame: &Tensor) -> Result<FeaturePyramid> {
        self.embed_with(frame, self.input)
    }

    /// Embeds with an explicit input transform, ignoring `self.input`.
    pub fn embed_with(&self, frame: &Tensor, input: InputNorm) -> Result<FeaturePyramid> {
        Self::check(frame)?;
        let mut x = match input {
            InputNorm::Center => frame.map(|v| v - 0.5),
            InputNorm::Standardize => standardize(frame),
        };
        let mut levels = Vec::with_capacity(LEVELS);
        for w in &self.weights {
            x = conv2d(&x, w, 2, 1)?.map(|v| if v > 0.0 { v } else { SLOPE * v });
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }

    /// Centered embedding recorded on a tape, so gradients reach `frame`.
    pub fn embed_var(&self, tape: &mut Tape, frame: Var) -> Result<Vec<Var>> {
        Self::check(tape.value(frame))?;
        let mut x = tape.add_scalar(frame, -0.5)?;
        let mut levels = Vec::with_capacity(LEVELS);
        for w in &self.weights {
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(x, wv, 2, 1)?;
            x = tape.leaky_relu(y, SLOPE)?;
            levels.push(x);
        }
        Ok(levels)
    }
}

/// Removes the mean over all channels and divides by the deviation.
fn standardize(frame: &Tensor) -> Tensor {
    let m = frame.mean();
    let s = (frame.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / frame.len() as f64).sqrt().max(1e-6);
    frame.map(|x| (x - m) / s)
}

fn co_in(w: &[f64], co: usize) -> usize {
    w.len() / co / 9
}

/// `rows x cols` matrix with orthonormal rows (or columns when `rows > cols`).
fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (a, b) = (rows.min(cols), rows.max(cols));
    let mut m: Vec<Vec<f64>> = (0..a)
        .map(|_| (0..b).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for i in 0..a {
        for j in 0..i {
            let d: f64 = m[i].iter().zip(&m[j]).map(|(x, y)| x * y).sum();
            let mj = m[j].clone();
            m[i].iter_mut().zip(&mj).for_each(|(x, y)| *x -= d * y);
        }
        let n = m[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        m[i].iter_mut().for_each(|x| *x /= n);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows <= cols { m[r][c] } else { m[c][r] };
        }
    }
    out
}

/// Spatial mean of every channel of a `[C, H, W]` map.
pub fn global_avg_pool(t: &Tensor) -> Vec<f64> {
    let plane = t.shape()[1] * t.shape()[2];
    t.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect()
}

/// Mean over levels of the cosine distance between pooled features.
pub fn frame_distance(a: &FeaturePyramid, b: &FeaturePyramid) -> Result<f64> {
    if a.levels.len() != b.levels.len() {
        return Err(Error::shape("frame_distance", "levels", a.levels.len(), b.levels.len()));
    }
    let mut total = 0.0;
    for (i, (x, y)) in a.levels.iter().zip(&b.levels).enumerate() {
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "frame_distance",
                format!("level {i}"),
                format!("{:?}", x.shape()),
                format!("{:?}", y.shape()),
            ));
        }
        total += cosine_distance(&global_avg_pool(x), &global_avg_pool(y), COSINE_EPS);
    }
    Ok(total / a.levels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seed: usize) -> Tensor {
        Tensor::from_fn(&[3, 40, 36], |i| ((i * 31 + seed * 7) % 97) as f64 / 97.0)
    }

    #[test]
    fn pyramid_geometry() {
        let p = Embedder::default().embed(&frame(0)).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|l| (l.shape()[1], l.shape()[2])).collect();
        assert_eq!(dims, vec![(20, 18), (10, 9), (5, 5), (3, 3), (2, 2)]);
        assert_eq!(p.levels[4].shape()[0], 64);
    }

    #[test]
    fn kernels_have_orthonormal_rows() {
        let e = Embedder::default();
        let w = &e.weights()[1];
        let k = w.shape()[1] * 9;
        let d = w.data();
        for i in 0..w.shape()[0] {
            for j in 0..w.shape()[0] {
                let dot: f64 = (0..k).map(|c| d[i * k + c] * d[j * k + c]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_frames_rejected_and_zero_frame_finite() {
        let e = Embedder::default();
        assert!(e.embed(&Tensor::zeros(&[3, 31, 64])).is_err());
        let p = e.embed(&Tensor::zeros(&[3, 32, 32])).unwrap();
        assert!(p.levels.iter().all(Tensor::is_finite));
    }

    #[test]
    fn distance_identities() {
        let e = Embedder::default();
        let a = e.embed(&frame(1)).unwrap();
        let b = e.embed(&frame(2)).unwrap();
        assert!(frame_distance(&a, &a).unwrap().abs() < 1e-15);
        let scaled = FeaturePyramid {
            levels: a.levels.iter().map(|l| l.map(|v| 2.0 * v)).collect(),
        };
        assert!(frame_distance(&a, &scaled).unwrap().abs() < 1e-12);
        let (ab, ba) = (frame_distance(&a, &b).unwrap(), frame_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-12 && (0.0..=2.0).contains(&ab));
    }

    #[test]
    fn taped_embedding_matches_plain() {
        let e = Embedder::default();
        let f = frame(3);
        let mut tape = Tape::new();
        let v = tape.leaf(f.clone());
        let levels = e.embed_var(&mut tape, v).unwrap();
        let plain = e.embed(&f).unwrap();
        for (l, p) in levels.iter().zip(&plain.levels) {
            assert_eq!(tape.value(*l), p);
        }
    }
}
