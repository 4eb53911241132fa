//! Frame directories on disk, as 8-bit PNG or lossless tensor files.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze::FrameSequence;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameFormat {
    #[default]
    Png,
    /// `[3, H, W]` tensor files; exact at 64 bits.
    Dvdt,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::Png => "png",
            FrameFormat::Dvdt => "dvdt",
        }
    }
}

/// File stem of frame `t`: `frame_0000`, `frame_0001`, ...
pub const DEFAULT_PATTERN: &str = "frame_{t:04}";

/// Expands `{t:04}` (zero-padded) and `{t}` in `pattern`.
impl std::str::FromStr for FrameFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(FrameFormat::Png),
            "dvdt" => Ok(FrameFormat::Dvdt),
            _ => Err(Error::invalid("frames", format!("unknown frame format `{s}`"))),
        }
    }
}

pub fn frame_name(pattern: &str, t: usize) -> String {
    pattern.replace("{t:04}", &format!("{t:04}")).replace("{t}", &t.to_string())
}

pub fn frame_path(dir: &Path, pattern: &str, t: usize, format: FrameFormat) -> PathBuf {
    dir.join(format!("{}.{}", frame_name(pattern, t), format.extension()))
}

pub fn to_image(frame: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = frame.dims3("to_image")?;
    if c != 3 {
        return Err(Error::shape("to_image", "channels", 3, c));
    }
    let n = h * w;
    let d = frame.data();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([q(d[p]), q(d[n + p]), q(d[2 * n + p])])
    }))
}

pub fn from_image(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / n, i % n);
        img.get_pixel((p % w) as u32, (p / w) as u32)[c] as f64 / 255.0
    })
}

pub fn save_frame(path: &Path, frame: &Tensor, format: FrameFormat) -> Result<()> {
    match format {
        FrameFormat::Png => to_image(frame)?.save(path).map_err(Error::from),
        FrameFormat::Dvdt => frame.save(path),
    }
}

pub fn load_frame(path: &Path, format: FrameFormat) -> Result<Tensor> {
    let t = match format {
        FrameFormat::Png => from_image(&image::open(path)?.to_rgb8()),
        FrameFormat::Dvdt => Tensor::load(path)?,
    };
    match t.shape() {
        [3, _, _] => Ok(t),
        s => Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("frame shape {s:?}, expected [3, H, W]"),
        }),
    }
}

pub fn save_sequence(dir: &Path, seq: &FrameSequence, pattern: &str, format: FrameFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in seq.frames.iter().enumerate() {
        save_frame(&frame_path(dir, pattern, t, format), f, format)?;
    }
    Ok(())
}

/// Reads frames 0, 1, ... named by `pattern` until the first gap.
pub fn load_sequence(dir: &Path, pattern: &str, format: FrameFormat) -> Result<FrameSequence> {
    if !pattern.contains("{t") {
        return Err(Error::invalid("frames", format!("pattern `{pattern}` has no frame index placeholder")));
    }
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let mut frames = Vec::new();
    loop {
        let p = frame_path(dir, pattern, frames.len(), format);
        if !p.exists() {
            break;
        }
        let f = load_frame(&p, format)?;
        if let Some(first) = frames.first() {
            let first: &Tensor = first;
            if first.shape() != f.shape() {
                return Err(Error::Format {
                    path: p,
                    msg: format!("frame shape {:?} differs from {:?}", f.shape(), first.shape()),
                });
            }
        }
        frames.push(f);
    }
    Ok(FrameSequence::new(frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let f = Tensor::from_fn(&[3, 5, 7], |i| (i % 9) as f64 / 8.0);
        let seq = FrameSequence::new(vec![f.clone(), f.clone()]);
        save_sequence(dir.path(), &seq, DEFAULT_PATTERN, FrameFormat::Png).unwrap();
        let back = load_sequence(dir.path(), DEFAULT_PATTERN, FrameFormat::Png).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back.frames[0].zip_map(&f, |a, b| (a - b).abs()).max_abs() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn dvdt_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let f = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.37).sin().abs());
        let seq = FrameSequence::new(vec![f]);
        save_sequence(dir.path(), &seq, DEFAULT_PATTERN, FrameFormat::Dvdt).unwrap();
        assert_eq!(load_sequence(dir.path(), DEFAULT_PATTERN, FrameFormat::Dvdt).unwrap(), seq);
    }

    #[test]
    fn pattern_expansion() {
        assert_eq!(frame_name("img{t}", 12), "img12");
        assert_eq!(frame_name(DEFAULT_PATTERN, 7), "frame_0007");
        assert!(load_sequence(Path::new("."), "still", FrameFormat::Png).is_err());
    }
}
