//! Atmospheric scattering, misaligned pair construction and dark-channel
//! pre-dehazing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nrfm::{MatchRecord, MatchTable};
use crate::tensor::Tensor;

/// An ordered list of `[3, H, W]` frames with values in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Tensor>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor>) -> Self {
        FrameSequence { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.frames[i]
    }

    /// `(H, W)` of the first frame.
    pub fn extent(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.shape()[1], f.shape()[2]))
    }
}

/// A canvas larger than the frames from which the clear frames were cut.
///
/// When present, jittered views are cut from it directly so shifted frames
/// show real scene content instead of replicated edges.
#[derive(Clone, Debug)]
pub struct Backdrop {
    pub rgb: Tensor,
    pub depth: Tensor,
    /// Top-left corner `(x, y)` of every clear frame on the canvas.
    pub origins: Vec<(usize, usize)>,
}

/// Clear frames plus what is needed to fog them.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub clear: FrameSequence,
    /// One `[H, W]` depth map per clear frame.
    pub depth: Vec<Tensor>,
    /// Scattering coefficient per unit depth.
    pub beta: f64,
    /// Airlight per channel.
    pub airlight: [f64; 3],
    pub backdrop: Option<Backdrop>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "scene";
        if self.clear.len() != self.depth.len() {
            return Err(Error::shape(OP, "depth map count", self.clear.len(), self.depth.len()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(OP, format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid(OP, format!("airlight must lie in [0, 1], got {:?}", self.airlight)));
        }
        if let Some(b) = &self.backdrop {
            if b.origins.len() != self.clear.len() {
                return Err(Error::shape(OP, "backdrop origins", self.clear.len(), b.origins.len()));
            }
            if b.depth.rank() != 2 || b.rgb.shape() != [3, b.depth.shape()[0], b.depth.shape()[1]] {
                return Err(Error::invalid(OP, "backdrop must be [3, H, W] color with [H, W] depth"));
            }
        }
        for (i, (f, d)) in self.clear.frames.iter().zip(&self.depth).enumerate() {
            let (c, h, w) = f.dims3(OP)?;
            if c != 3 {
                return Err(Error::shape(OP, format!("frame {i} channels"), 3, c));
            }
            if d.shape() != [h, w] {
                return Err(Error::shape(
                    OP,
                    format!("depth map {i}"),
                    format!("[{h}, {w}]"),
                    format!("{:?}", d.shape()),
                ));
            }
            if d.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid(OP, format!("depth map {i} has negative or non-finite values")));
            }
        }
        Ok(())
    }
}

/// An axis-aligned rectangle pasted into a hazy frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPatch {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub color: [f64; 3],
    pub depth: f64,
}

/// How a hazy sequence departs from its clear reference.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentSpec {
    /// True clear index for each hazy frame; non-decreasing.
    pub warp: Vec<usize>,
    /// Per hazy frame `(dx, dy)`: hazy pixel `p` shows clear pixel `p + (dx, dy)`.
    #[serde(default)]
    pub jitter: Vec<(i32, i32)>,
    #[serde(default)]
    pub objects: Vec<Option<ObjectPatch>>,
}

impl MisalignmentSpec {
    pub fn identity(n: usize) -> Self {
        MisalignmentSpec {
            warp: (0..n).collect(),
            ..Default::default()
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        const OP: &str = "misalignment";
        let n = self.warp.len();
        if n == 0 {
            return Err(Error::invalid(OP, "empty warp"));
        }
        if n > m + 2 {
            return Err(Error::invalid(OP, format!("{n} hazy frames exceed {m} clear frames + 2")));
        }
        if let Some(t) = self.warp.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::invalid(OP, format!("warp decreases at hazy frame {}", t + 1)));
        }
        if let Some(t) = self.warp.iter().position(|&k| k >= m) {
            return Err(Error::invalid(
                OP,
                format!("warp index {} at hazy frame {t} outside [0, {}]", self.warp[t], m - 1),
            ));
        }
        for (name, len) in [("jitter", self.jitter.len()), ("objects", self.objects.len())] {
            if len != 0 && len != n {
                return Err(Error::shape(OP, name, n, len));
            }
        }
        Ok(())
    }

    pub fn jitter_at(&self, t: usize) -> (i32, i32) {
        self.jitter.get(t).copied().unwrap_or((0, 0))
    }
}

/// `I = J t + A (1 - t)` with `t = exp(-beta d)`.
pub fn synthesize_haze(scene: &SceneSpec, frame_index: usize) -> Result<Tensor> {
    scene.validate()?;
    if frame_index >= scene.clear.len() {
        return Err(Error::invalid(
            "synthesize_haze",
            format!("frame {frame_index} out of range ({} frames)", scene.clear.len()),
        ));
    }
    Ok(fog(
        scene.clear.get(frame_index),
        &scene.depth[frame_index],
        scene.beta,
        scene.airlight,
    ))
}

fn fog(clear: &Tensor, depth: &Tensor, beta: f64, airlight: [f64; 3]) -> Tensor {
    let plane = depth.len();
    let d = depth.data();
    let mut out = clear.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let t = (-beta * d[i % plane]).exp();
        let a = airlight[i / plane];
        *v = (*v * t + a * (1.0 - t)).clamp(0.0, 1.0);
    }
    out
}

/// Integer translation with edge replication: `out(p) = src(p + (dx, dy))`.
pub fn translate(src: &Tensor, dx: i32, dy: i32) -> Tensor {
    let (h, w) = (src.shape()[src.rank() - 2], src.shape()[src.rank() - 1]);
    crop_clamped(src, dx as i64, dy as i64, h, w)
}

/// `h x w` window of a `[.., H, W]` tensor at `(x0, y0)`, edge-replicated
/// outside the source.
pub fn crop_clamped(src: &Tensor, x0: i64, y0: i64, h: usize, w: usize) -> Tensor {
    let r = src.rank();
    let (sh, sw) = (src.shape()[r - 2], src.shape()[r - 1]);
    let planes = src.len() / (sh * sw);
    let s = src.data();
    let mut out = vec![0.0; planes * h * w];
    for c in 0..planes {
        for y in 0..h {
            let sy = (y as i64 + y0).clamp(0, sh as i64 - 1) as usize;
            for x in 0..w {
                let sx = (x as i64 + x0).clamp(0, sw as i64 - 1) as usize;
                out[(c * h + y) * w + x] = s[(c * sh + sy) * sw + sx];
            }
        }
    }
    let mut shape = src.shape().to_vec();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::new(&shape, out).expect("crop shape")
}

fn paste(frame: &mut Tensor, depth: &mut Tensor, obj: &ObjectPatch) {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    for y in obj.y..(obj.y + obj.h).min(h) {
        for x in obj.x..(obj.x + obj.w).min(w) {
            let stripe = if ((x - obj.x) / 3 + (y - obj.y) / 3) % 2 == 0 { 1.0 } else { 0.6 };
            for c in 0..3 {
                frame.set3(c, y, x, obj.color[c] * stripe);
            }
            depth.data_mut()[y * w + x] = obj.depth;
        }
    }
}

/// Output of [`make_misaligned_pair`].
pub struct MisalignedPair {
    pub hazy: FrameSequence,
    pub clear: FrameSequence,
    /// Haze-free counterpart of every hazy frame (jitter and objects applied).
    pub gt: FrameSequence,
    pub truth: MatchTable,
}

/// Builds a hazy sequence whose frame `t` is the fogged, jittered and
/// object-perturbed clear frame `warp[t]`.
pub fn make_misaligned_pair(scene: &SceneSpec, mis: &MisalignmentSpec) -> Result<MisalignedPair> {
    scene.validate()?;
    let m = scene.clear.len();
    mis.validate(m)?;
    let mut hazy = Vec::with_capacity(mis.warp.len());
    let mut gt = Vec::with_capacity(mis.warp.len());
    let mut records = Vec::with_capacity(mis.warp.len());
    for (t, &k) in mis.warp.iter().enumerate() {
        let (dx, dy) = mis.jitter_at(t);
        let (mut frame, mut depth) = match &scene.backdrop {
            Some(b) => {
                let (h, w) = (scene.depth[k].shape()[0], scene.depth[k].shape()[1]);
                let (x0, y0) = (b.origins[k].0 as i64 + dx as i64, b.origins[k].1 as i64 + dy as i64);
                (crop_clamped(&b.rgb, x0, y0, h, w), crop_clamped(&b.depth, x0, y0, h, w))
            }
            None => (translate(scene.clear.get(k), dx, dy), translate(&scene.depth[k], dx, dy)),
        };
        if let Some(Some(obj)) = mis.objects.get(t) {
            paste(&mut frame, &mut depth, obj);
        }
        hazy.push(fog(&frame, &depth, scene.beta, scene.airlight));
        gt.push(frame);
        records.push(MatchRecord {
            t,
            k,
            k2: (k + 1).min(m - 1),
            score: 0.0,
            win: [k, k],
        });
    }
    Ok(MisalignedPair {
        hazy: FrameSequence::new(hazy),
        clear: scene.clear.clone(),
        gt: FrameSequence::new(gt),
        truth: MatchTable { records },
    })
}

/// Dark-channel-prior parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcpParams {
    pub omega: f64,
    pub patch: usize,
    pub t_floor: f64,
}

impl Default for DcpParams {
    fn default() -> Self {
        DcpParams {
            omega: 0.95,
            patch: 15,
            t_floor: 0.1,
        }
    }
}

/// Minimum over a `patch x patch` window centered at each pixel (edges clipped).
fn min_filter(plane: &[f64], h: usize, w: usize, patch: usize) -> Vec<f64> {
    let r = patch / 2;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = plane[y * w + a..=y * w + b].iter().cloned().fold(f64::INFINITY, f64::min);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (a, b) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (a..=b).map(|yy| rows[yy * w + x]).fold(f64::INFINITY, f64::min);
        }
    }
    out
}

/// Dark channel of a `[3, H, W]` image scaled per channel by `1 / scale`.
fn dark_channel(img: &Tensor, scale: [f64; 3], patch: usize) -> Vec<f64> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let n = h * w;
    let d = img.data();
    let mins: Vec<f64> = (0..n)
        .map(|p| (0..3).map(|c| d[c * n + p] / scale[c]).fold(f64::INFINITY, f64::min))
        .collect();
    min_filter(&mins, h, w, patch)
}

/// Airlight estimate: mean color of the brightest 0.1% dark-channel pixels.
pub fn estimate_airlight(hazy: &Tensor, patch: usize) -> [f64; 3] {
    let n = hazy.shape()[1] * hazy.shape()[2];
    let dark = dark_channel(hazy, [1.0; 3], patch);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dark[b].total_cmp(&dark[a]).then(a.cmp(&b)));
    let top = (n / 1000).max(1);
    let d = hazy.data();
    let mut a = [0.0; 3];
    for &p in &order[..top] {
        for c in 0..3 {
            a[c] += d[c * n + p] / top as f64;
        }
    }
    a
}

/// Classical dark-channel-prior dehazing of a `[3, H, W]` frame in `[0, 1]`.
pub fn predehaze_dcp(hazy: &Tensor, params: &DcpParams) -> Result<Tensor> {
    let (c, h, w) = hazy.dims3("predehaze_dcp")?;
    if c != 3 {
        return Err(Error::shape("predehaze_dcp", "channels", 3, c));
    }
    if params.patch == 0 || !(params.t_floor > 0.0) {
        return Err(Error::invalid("predehaze_dcp", "patch and t_floor must be positive"));
    }
    let a = estimate_airlight(hazy, params.patch).map(|v| v.max(1e-6));
    let dark = dark_channel(hazy, a, params.patch);
    let n = h * w;
    let mut out = hazy.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let t = (1.0 - params.omega * dark[i % n]).max(params.t_floor);
        let ac = a[i / n];
        *v = ((*v - ac) / t + ac).clamp(0.0, 1.0);
    }
    Ok(out)
}
