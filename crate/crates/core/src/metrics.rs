//! Full-reference image quality: PSNR and SSIM on `[0, 1]` frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported for identical frames and as an upper bound otherwise.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = a.dims3(op)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(op, "frames", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(dims)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", "frames", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check("psnr", a, b)?;
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over valid positions only.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5),
/// shrunk to the frame for frames smaller than the window.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (c, h, w) = check("ssim", a, b)?;
    let size = SSIM_WINDOW.min(h).min(w);
    let size = if size % 2 == 0 { size - 1 } else { size };
    let g = gaussian(size);
    let n = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.data()[ch * n..(ch + 1) * n];
        let y = &b.data()[ch * n..(ch + 1) * n];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, ho, wo) = filter_valid(x, h, w, &g);
        let (my, _, _) = filter_valid(y, h, w, &g);
        let (sxx, _, _) = filter_valid(&xx, h, w, &g);
        let (syy, _, _) = filter_valid(&yy, h, w, &g);
        let (sxy, _, _) = filter_valid(&xy, h, w, &g);
        let mut s = 0.0;
        for i in 0..ho * wo {
            let (vx, vy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i]);
            let cov = sxy[i] - mx[i] * my[i];
            s += ((2.0 * mx[i] * my[i] + C1) * (2.0 * cov + C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2));
        }
        total += s / (ho * wo) as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub match_exact_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub match_mean_abs_error: Option<f64>,
}

/// Scores `outputs[i]` against `clear[i]`.
pub fn evaluate(outputs: &[Tensor], clear: &[Tensor]) -> Result<EvalReport> {
    if outputs.len() != clear.len() {
        return Err(Error::shape("eval", "frame count", clear.len(), outputs.len()));
    }
    if outputs.is_empty() {
        return Err(Error::invalid("eval", "no frames to evaluate"));
    }
    let frames = outputs
        .iter()
        .zip(clear)
        .map(|(o, c)| Ok(FrameScore { psnr: psnr(o, c)?, ssim: ssim(o, c)? }))
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len() as f64;
    Ok(EvalReport {
        mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        frames,
        match_exact_rate: None,
        match_mean_abs_error: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_frames_cap() {
        let a = Tensor::from_fn(&[3, 16, 16], |i| (i % 13) as f64 / 13.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mse_of_a_hundredth_is_twenty_db() {
        let a = Tensor::full(&[3, 8, 8], 0.5);
        let b = Tensor::full(&[3, 8, 8], 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn count_mismatch_rejected() {
        let a = Tensor::zeros(&[3, 4, 4]);
        assert!(evaluate(&[a.clone()], &[a.clone(), a]).is_err());
    }
}
