//! Procedural road scenes: a wide panorama seen through a panning camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze::{crop_clamped, Backdrop, FrameSequence, MisalignmentSpec, ObjectPatch, SceneSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadSceneConfig {
    pub height: usize,
    pub width: usize,
    /// Number of clear frames.
    pub frames: usize,
    /// Horizontal camera motion in pixels per clear frame.
    pub pan: usize,
    pub beta: f64,
    pub airlight: f64,
    pub seed: u64,
    pub kind: SceneKind,
}

/// Panorama content.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Sky, facades and a road shared by all views.
    #[default]
    Road,
    /// One textured segment per pan step, so every frame shows distinct content.
    Mosaic,
}

impl Default for RoadSceneConfig {
    fn default() -> Self {
        RoadSceneConfig {
            height: 64,
            width: 64,
            frames: 10,
            pan: 3,
            beta: 1.0,
            airlight: 0.85,
            seed: 7,
            kind: SceneKind::Road,
        }
    }
}

const NEAR: f64 = 0.1;
const FAR: f64 = 1.2;
const SKY: f64 = 1.5;

fn saturated(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c = [rng.random_range(0.05..0.35), rng.random_range(0.35..0.95), rng.random_range(0.6..1.0)];
    // random channel permutation
    for i in (1..3).rev() {
        let j = rng.random_range(0..=i);
        c.swap(i, j);
    }
    c
}

fn build_panorama(h: usize, w: usize, ground: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let n = h * w;
    let mut rgb = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let set = |rgb: &mut Vec<f64>, p: usize, c: [f64; 3]| {
        for k in 0..3 {
            rgb[k * n + p] = c[k].clamp(0.0, 1.0);
        }
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if y < ground {
                let s = y as f64 / ground as f64;
                set(&mut rgb, p, [0.2 + 0.3 * s, 0.4 + 0.25 * s, 0.85]);
                depth[p] = SKY;
            } else {
                let s = (y - ground) as f64 / (h - ground).max(1) as f64;
                let grain = 0.03 * (((x * 7 + y * 13) % 5) as f64 - 2.0) / 2.0;
                set(&mut rgb, p, [0.3 + grain, 0.3 + grain, 0.33 + grain]);
                depth[p] = FAR + (NEAR - FAR) * s;
            }
        }
    }
    // lane markings: dashed bright lines below the ground line
    let lanes = [ground + (h - ground) / 3, ground + 2 * (h - ground) / 3];
    for (li, &row) in lanes.iter().enumerate() {
        let phase = rng.random_range(0..12);
        for x in 0..w {
            if (x + phase + li * 5) % 12 < 7 {
                for y in row..(row + 1 + li).min(h) {
                    set(&mut rgb, y * w + x, [0.95, 0.93, 0.7]);
                }
            }
        }
    }
    // facades standing on the ground line, many reaching above the frame
    let mut x = 0;
    while x < w {
        let bw = rng.random_range(8..28);
        let top = rng.random_range(0..ground * 3 / 5);
        let color = saturated(rng);
        let lit = saturated(rng).map(|v| 0.5 + 0.5 * v);
        let (sx, sy) = (rng.random_range(3..6), rng.random_range(4..7));
        let d = rng.random_range(0.8 * FAR..FAR);
        for yy in top..ground {
            for xx in x..(x + bw).min(w) {
                let window = (xx - x) % sx == sx / 2 && (ground - yy) % sy < 2 && yy + 2 < ground;
                set(&mut rgb, yy * w + xx, if window { lit } else { color });
                depth[yy * w + xx] = d;
            }
        }
        x += bw + rng.random_range(0..5);
    }
    // parked objects on the road
    let count = w / 24 + 1;
    for _ in 0..count {
        let ow = rng.random_range(6..14);
        let oh = rng.random_range(4..9);
        let ox = rng.random_range(0..w.saturating_sub(ow).max(1));
        let oy = rng.random_range(ground + 2..h.saturating_sub(oh).max(ground + 3));
        let color = saturated(rng);
        let s = (oy + oh - ground) as f64 / (h - ground).max(1) as f64;
        let d = FAR + (NEAR - FAR) * s.min(1.0);
        for yy in oy..(oy + oh).min(h) {
            for xx in ox..(ox + ow).min(w) {
                set(&mut rgb, yy * w + xx, color);
                depth[yy * w + xx] = d;
            }
        }
    }
    (
        Tensor::new(&[3, h, w], rgb).expect("panorama"),
        Tensor::new(&[h, w], depth).expect("panorama"),
    )
}

/// One flat wall per segment at its own depth: a base color, a centered
/// disk of an accent color and two faint colored gratings.
fn build_mosaic(h: usize, w: usize, seg: usize, center: (usize, usize), rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    struct Look {
        base: [f64; 3],
        accent: [f64; 3],
        radius: f64,
        gratings: Vec<([f64; 3], f64, f64)>,
        depth: f64,
    }
    let n = h * w;
    let seg = seg.max(1);
    let lead = center.0 / seg + 1;
    let index = |x: usize| (x + lead * seg + seg / 2 - center.0) / seg;
    let looks: Vec<Look> = (0..=index(w - 1))
        .map(|_| Look {
            base: [0; 3].map(|_| rng.random_range(0.15..0.85)),
            accent: [0; 3].map(|_| rng.random_range(0.15..0.85)),
            radius: rng.random_range(0.15..0.3) * seg.min(h) as f64,
            gratings: (0..2)
                .map(|_| {
                    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    let period: f64 = rng.random_range(16.0..40.0);
                    (
                        [0; 3].map(|_| rng.random_range(-0.05..0.05)),
                        theta.cos() / period,
                        theta.sin() / period,
                    )
                })
                .collect(),
            depth: rng.random_range(0.3 * FAR..FAR),
        })
        .collect();
    let mut rgb = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let i = index(x);
            let look = &looks[i];
            let cx = (center.0 + seg * i) as f64 - (lead * seg) as f64;
            let (ex, ey) = (x as f64 - cx, y as f64 - center.1 as f64);
            let mut c = if ex.hypot(ey) < look.radius { look.accent } else { look.base };
            for (color, fx, fy) in &look.gratings {
                let v = (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64)).sin();
                for k in 0..3 {
                    c[k] += color[k] * v;
                }
            }
            let p = y * w + x;
            for k in 0..3 {
                rgb[k * n + p] = c[k].clamp(0.0, 1.0);
            }
            depth[p] = look.depth;
        }
    }
    (
        Tensor::new(&[3, h, w], rgb).expect("panorama"),
        Tensor::new(&[h, w], depth).expect("panorama"),
    )
}

/// A generated clear video and the camera offsets of its frames.
pub struct RoadScene {
    pub spec: SceneSpec,
    pub pan: usize,
}

/// Margin kept around the crops so jittered views stay inside the panorama.
pub const MARGIN: usize = 8;

impl RoadScene {
    pub fn generate(cfg: &RoadSceneConfig) -> Result<Self> {
        if cfg.height < 16 || cfg.width < 16 || cfg.frames == 0 {
            return Err(Error::invalid("road_scene", "frames must be at least 16x16 and the count positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let ph = cfg.height + 2 * MARGIN;
        let pw = cfg.width + cfg.pan * (cfg.frames - 1) + 2 * MARGIN;
        let ground = MARGIN + cfg.height * 3 / 5;
        let (rgb, depth_map) = match cfg.kind {
            SceneKind::Road => build_panorama(ph, pw, ground, &mut rng),
            SceneKind::Mosaic => build_mosaic(ph, pw, cfg.pan, (MARGIN + cfg.width / 2, MARGIN + cfg.height / 2), &mut rng),
        };
        let origins: Vec<(usize, usize)> = (0..cfg.frames).map(|i| (MARGIN + cfg.pan * i, MARGIN)).collect();
        let mut clear = Vec::with_capacity(cfg.frames);
        let mut depth = Vec::with_capacity(cfg.frames);
        for &(x0, y0) in &origins {
            clear.push(crop_clamped(&rgb, x0 as i64, y0 as i64, cfg.height, cfg.width));
            depth.push(crop_clamped(&depth_map, x0 as i64, y0 as i64, cfg.height, cfg.width));
        }
        Ok(RoadScene {
            spec: SceneSpec {
                clear: FrameSequence::new(clear),
                depth,
                beta: cfg.beta,
                airlight: [cfg.airlight; 3],
                backdrop: Some(Backdrop {
                    rgb,
                    depth: depth_map,
                    origins,
                }),
            },
            pan: cfg.pan,
        })
    }

    /// Camera position of each hazy frame in panorama pixels.
    pub fn view_offsets(&self, mis: &MisalignmentSpec) -> Vec<(f64, f64)> {
        mis.warp
            .iter()
            .enumerate()
            .map(|(t, &k)| {
                let (dx, dy) = mis.jitter_at(t);
                ((self.pan * k) as f64 + dx as f64, dy as f64)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MisalignmentConfig {
    pub hazy_frames: usize,
    /// Largest absolute jitter per axis in pixels.
    pub max_jitter: i32,
    /// Probability that a hazy frame carries a pasted object.
    pub object_prob: f64,
    /// Largest clear index the warp may start at.
    pub max_start: usize,
    pub seed: u64,
}

impl Default for MisalignmentConfig {
    fn default() -> Self {
        MisalignmentConfig {
            hazy_frames: 8,
            max_jitter: 2,
            object_prob: 0.0,
            max_start: 1,
            seed: 11,
        }
    }
}

/// Random monotone warp with increments in `{0, 1, 2}`, integer jitter and
/// optional pasted objects.
pub fn random_misalignment(cfg: &MisalignmentConfig, clear_frames: usize, h: usize, w: usize) -> Result<MisalignmentSpec> {
    let (n, m) = (cfg.hazy_frames, clear_frames);
    if n == 0 || m == 0 || n > m + 2 {
        return Err(Error::invalid(
            "misalignment",
            format!("need 0 < hazy frames <= clear frames + 2, got {n} and {m}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = rng.random_range(cfg.max_start.min(1)..=cfg.max_start.min(m - 1));
    let mut warp = vec![start];
    for t in 1..n {
        let u: f64 = rng.random();
        let mut inc = if u < 0.2 {
            0
        } else if u < 0.75 {
            1
        } else {
            2
        };
        if t == 1 && start == 0 {
            inc = inc.max(1);
        }
        let prev = warp[t - 1];
        warp.push((prev + inc).min(m - 1));
    }
    let jitter = (0..n)
        .map(|_| {
            (
                rng.random_range(-cfg.max_jitter..=cfg.max_jitter),
                rng.random_range(-cfg.max_jitter..=cfg.max_jitter),
            )
        })
        .collect();
    let objects = (0..n)
        .map(|_| {
            if rng.random::<f64>() < cfg.object_prob {
                let ow = rng.random_range(6..=(w / 4).max(6));
                let oh = rng.random_range(6..=(h / 4).max(6));
                Some(ObjectPatch {
                    x: rng.random_range(0..w - ow.min(w - 1)),
                    y: rng.random_range(h / 2..h - oh.min(h / 2)),
                    w: ow,
                    h: oh,
                    color: saturated(&mut rng),
                    depth: 0.8,
                })
            } else {
                None
            }
        })
        .collect();
    Ok(MisalignmentSpec { warp, jitter, objects })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consecutive_frames_are_pan_shifts() {
        let cfg = RoadSceneConfig::default();
        let s = RoadScene::generate(&cfg).unwrap();
        let (a, b) = (s.spec.clear.get(0), s.spec.clear.get(1));
        for y in 0..cfg.height {
            for x in 0..cfg.width - cfg.pan {
                assert_eq!(b.at3(1, y, x), a.at3(1, y, x + cfg.pan));
            }
        }
        s.spec.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = RoadSceneConfig::default();
        let a = RoadScene::generate(&cfg).unwrap();
        let b = RoadScene::generate(&cfg).unwrap();
        assert_eq!(a.spec.clear, b.spec.clear);
    }

    #[test]
    fn random_warp_is_monotone_and_in_range() {
        let cfg = MisalignmentConfig {
            hazy_frames: 40,
            max_jitter: 8,
            object_prob: 0.3,
            max_start: 4,
            seed: 3,
        };
        let mis = random_misalignment(&cfg, 44, 64, 64).unwrap();
        mis.validate(44).unwrap();
        assert!(mis.warp.windows(2).all(|w| w[1] - w[0] <= 2));
        assert!(mis.jitter.iter().all(|&(x, y)| x.abs() <= 8 && y.abs() <= 8));
    }
}
