//! Pure tensor kernels: forward evaluation and vector-Jacobian products.
//!
//! Each kernel is a plain function of its inputs. The [`crate::autodiff`]
//! tape records one node per kernel call and invokes the matching
//! `*_backward` function during the reverse sweep.

pub mod attention;
pub mod contextual;
pub mod conv;
pub mod deform;
pub mod pool;
pub mod sample;
pub mod softmax;

use serde::{Deserialize, Serialize};

/// How bilinear sampling treats coordinates outside the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Clamp the coordinate to the grid, replicating edge values.
    #[default]
    Border,
    /// Mirror the coordinate about the outermost pixel centers.
    Reflection,
    /// Treat out-of-range neighbors as zero.
    Zeros,
}

/// The four bilinear neighbors of a continuous coordinate.
///
/// `idx` indexes a `H * W` plane. `dx`/`dy` are the derivatives of the
/// weights with respect to the unclamped input coordinate.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub dx: [f64; 4],
    pub dy: [f64; 4],
}

struct Axis {
    i0: usize,
    i1: usize,
    valid0: bool,
    valid1: bool,
    frac: f64,
    deriv: f64,
}

fn axis(v: f64, n: usize, pad: Padding) -> Axis {
    let last = (n - 1) as f64;
    let clamp = |c: f64, deriv: f64| {
        let c = c.clamp(0.0, last);
        let i0 = (c.floor() as usize).min(n - 1);
        Axis {
            i0,
            i1: (i0 + 1).min(n - 1),
            valid0: true,
            valid1: true,
            frac: c - i0 as f64,
            deriv,
        }
    };
    match pad {
        Padding::Border => {
            let deriv = if (0.0..=last).contains(&v) { 1.0 } else { 0.0 };
            clamp(v, deriv)
        }
        Padding::Reflection => {
            if n == 1 {
                return clamp(0.0, 0.0);
            }
            let period = 2.0 * last;
            let m = v.rem_euclid(period);
            if m <= last {
                clamp(m, 1.0)
            } else {
                clamp(period - m, -1.0)
            }
        }
        Padding::Zeros => {
            let f = v.floor();
            let i0 = f as i64;
            let valid0 = i0 >= 0 && i0 < n as i64;
            let valid1 = i0 + 1 >= 0 && i0 + 1 < n as i64;
            Axis {
                i0: if valid0 { i0 as usize } else { 0 },
                i1: if valid1 { (i0 + 1) as usize } else { 0 },
                valid0,
                valid1,
                frac: v - f,
                deriv: 1.0,
            }
        }
    }
}

pub(crate) fn taps(x: f64, y: f64, h: usize, w: usize, pad: Padding) -> Taps {
    let ax = axis(x, w, pad);
    let ay = axis(y, h, pad);
    let (fx, fy) = (ax.frac, ay.frac);
    let mut t = Taps {
        idx: [
            ay.i0 * w + ax.i0,
            ay.i0 * w + ax.i1,
            ay.i1 * w + ax.i0,
            ay.i1 * w + ax.i1,
        ],
        w: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        dx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
        dy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
    };
    for j in 0..4 {
        t.dx[j] *= ax.deriv;
        t.dy[j] *= ay.deriv;
    }
    let valid = [
        ax.valid0 && ay.valid0,
        ax.valid1 && ay.valid0,
        ax.valid0 && ay.valid1,
        ax.valid1 && ay.valid1,
    ];
    for j in 0..4 {
        if !valid[j] {
            t.idx[j] = 0;
            t.w[j] = 0.0;
            t.dx[j] = 0.0;
            t.dy[j] = 0.0;
        }
    }
    t
}

/// `[C, H, W]` to `[H*W, C]` (pixel-major) for contiguous per-pixel vectors.
pub(crate) fn to_pixel_major(data: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &data[ch * hw..(ch + 1) * hw];
        for (p, &v) in plane.iter().enumerate() {
            out[p * c + ch] = v;
        }
    }
    out
}

pub(crate) fn to_channel_major(data: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = data[p * c + ch];
        }
    }
    out
}

/// `c += a * b` for row-major `a: [m, k]`, `b: [k, n]`, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reached with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_coordinates_hit_one_neighbor() {
        let t = taps(2.0, 1.0, 4, 5, Padding::Border);
        assert_eq!(t.idx[0], 7);
        assert_eq!(t.w, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn border_clamps_and_kills_derivative() {
        let t = taps(-5.0, -5.0, 4, 4, Padding::Border);
        assert_eq!(t.idx[0], 0);
        assert_eq!(t.w[0], 1.0);
        assert!(t.dx.iter().chain(&t.dy).all(|&d| d == 0.0));
    }

    #[test]
    fn reflection_mirrors_about_edges() {
        let t = taps(-1.0, 0.0, 1, 4, Padding::Reflection);
        assert_eq!(t.idx[0], 1);
        let t = taps(4.0, 0.0, 1, 4, Padding::Reflection);
        assert_eq!(t.idx[0], 2);
    }

    #[test]
    fn zeros_padding_drops_outside_taps() {
        let t = taps(-0.5, 0.0, 2, 2, Padding::Zeros);
        assert_eq!(t.w[0], 0.0);
        assert!((t.w[1] - 0.5).abs() < 1e-15);
    }
}
