//! Bilinear sampling at continuous pixel coordinates.
//!
//! Coordinates are `[2, H', W']` with channel 0 the column (x) and channel 1
//! the row (y); integer values land exactly on pixel centers.

use super::{taps, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(input: &Tensor, coords: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, w) = input.dims3("bilinear_sample")?;
    let (two, ho, wo) = coords.dims3("bilinear_sample")?;
    if two != 2 {
        return Err(Error::shape("bilinear_sample", "coordinate channels", 2, two));
    }
    if !coords.is_finite() {
        return Err(Error::invalid("bilinear_sample", "coordinates contain non-finite values"));
    }
    Ok((c, h, w, ho, wo))
}

pub fn bilinear_sample(input: &Tensor, coords: &Tensor, pad: Padding) -> Result<Tensor> {
    let (c, h, w, ho, wo) = check(input, coords)?;
    let (x, co) = (input.data(), coords.data());
    let n = ho * wo;
    let mut out = vec![0.0; c * n];
    for p in 0..n {
        let t = taps(co[p], co[n + p], h, w, pad);
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            out[ch * n + p] = t.w[0] * plane[t.idx[0]]
                + t.w[1] * plane[t.idx[1]]
                + t.w[2] * plane[t.idx[2]]
                + t.w[3] * plane[t.idx[3]];
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// Returns `(d input, d coords)`.
pub fn bilinear_sample_backward(
    input: &Tensor,
    coords: &Tensor,
    pad: Padding,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w, ho, wo) = check(input, coords)?;
    let (x, co, g) = (input.data(), coords.data(), grad.data());
    let n = ho * wo;
    let mut gx = vec![0.0; x.len()];
    let mut gc = vec![0.0; co.len()];
    for p in 0..n {
        let t = taps(co[p], co[n + p], h, w, pad);
        let (mut sx, mut sy) = (0.0, 0.0);
        for ch in 0..c {
            let go = g[ch * n + p];
            let base = ch * h * w;
            for j in 0..4 {
                let v = x[base + t.idx[j]];
                gx[base + t.idx[j]] += t.w[j] * go;
                sx += t.dx[j] * v * go;
                sy += t.dy[j] * v * go;
            }
        }
        gc[p] = sx;
        gc[n + p] = sy;
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(coords.shape(), gc)?,
    ))
}

/// Identity sampling grid `[2, H, W]` plus an optional displacement field.
pub fn grid_plus(h: usize, w: usize, flow: Option<&Tensor>) -> Tensor {
    let n = h * w;
    let mut d = vec![0.0; 2 * n];
    for y in 0..h {
        for x in 0..w {
            d[y * w + x] = x as f64;
            d[n + y * w + x] = y as f64;
        }
    }
    if let Some(f) = flow {
        for (a, b) in d.iter_mut().zip(f.data()) {
            *a += b;
        }
    }
    Tensor::new(&[2, h, w], d).expect("grid shape")
}

/// Coordinates that resample an `h x w` grid to `ho x wo` with pixel-center alignment.
pub fn resize_grid(h: usize, w: usize, ho: usize, wo: usize) -> Tensor {
    let (sy, sx) = (h as f64 / ho as f64, w as f64 / wo as f64);
    let n = ho * wo;
    let mut d = vec![0.0; 2 * n];
    for y in 0..ho {
        for x in 0..wo {
            d[y * wo + x] = (x as f64 + 0.5) * sx - 0.5;
            d[n + y * wo + x] = (y as f64 + 0.5) * sy - 0.5;
        }
    }
    Tensor::new(&[2, ho, wo], d).expect("grid shape")
}

/// Bilinear resize of a `[C, H, W]` tensor.
pub fn resize(input: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    let (_, h, w) = input.dims3("resize")?;
    bilinear_sample(input, &resize_grid(h, w, ho, wo), Padding::Border)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_coords_reproduce_grid_bit_exactly() {
        let x = Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.37).sin());
        let y = bilinear_sample(&x, &grid_plus(5, 4, None), Padding::Border).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn cell_center_is_mean_of_corners() {
        let x = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let c = Tensor::new(&[2, 1, 1], vec![0.5, 0.5]).unwrap();
        let y = bilinear_sample(&x, &c, Padding::Border).unwrap();
        assert_eq!(y.data(), &[1.5]);
    }

    #[test]
    fn far_outside_clamps_to_corner() {
        let x = Tensor::new(&[1, 2, 2], vec![0.7, 1.0, 2.0, 3.0]).unwrap();
        let c = Tensor::new(&[2, 1, 1], vec![-5.0, -5.0]).unwrap();
        let y = bilinear_sample(&x, &c, Padding::Border).unwrap();
        assert_eq!(y.data(), &[0.7]);
    }

    #[test]
    fn non_finite_coords_rejected() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let c = Tensor::new(&[2, 1, 1], vec![f64::NAN, 0.0]).unwrap();
        assert!(bilinear_sample(&x, &c, Padding::Border).is_err());
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let x = Tensor::full(&[2, 4, 4], 0.3);
        let y = resize(&x, 16, 16).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }
}
