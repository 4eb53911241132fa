//! Softmax along an axis and eps-floored cosine similarity.

use super::{dot, norm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

fn split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            "softmax",
            format!("axis {axis} out of range for rank {}", shape.len()),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split(input.shape(), axis)?;
    let x = input.data();
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let m = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                s += e;
            }
            for j in 0..n {
                y[at(j)] /= s;
            }
        }
    }
    Tensor::new(input.shape(), y)
}

/// Vector-Jacobian product given the softmax *output*.
pub fn softmax_backward(output: &Tensor, axis: usize, grad: &Tensor) -> Result<Tensor> {
    let (outer, n, inner) = split(output.shape(), axis)?;
    let (y, g) = (output.data(), grad.data());
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let s: f64 = (0..n).map(|j| y[at(j)] * g[at(j)]).sum();
            for j in 0..n {
                gx[at(j)] = y[at(j)] * (g[at(j)] - s);
            }
        }
    }
    Tensor::new(output.shape(), gx)
}

/// Cosine similarity with both norms floored at `eps`; result clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let na = norm(a).max(eps);
    let nb = norm(b).max(eps);
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine distance `1 - similarity`, in [0, 2].
pub fn cosine_distance(a: &[f64], b: &[f64], eps: f64) -> f64 {
    1.0 - cosine_similarity(a, b, eps)
}

/// Gradient of cosine similarity with respect to `a`.
///
/// A floored norm is treated as a constant denominator.
pub fn cosine_grad_wrt(a: &[f64], b: &[f64], eps: f64, out: &mut [f64], scale: f64) {
    let ra = norm(a);
    let na = ra.max(eps);
    let nb = norm(b).max(eps);
    let inv = 1.0 / (na * nb);
    let cos = dot(a, b) * inv;
    let radial = if ra > eps { cos / (na * na) } else { 0.0 };
    for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (bi * inv - radial * ai);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let y = softmax(&Tensor::full(&[4], 2.0), 0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn closed_form_two_logits() {
        let y = softmax(&Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap(), 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance_and_inner_axis() {
        let x = Tensor::from_fn(&[3, 4, 2], |i| (i as f64).cos() * 5.0);
        let shifted = x.map(|v| v + 1234.5);
        let (a, b) = (softmax(&x, 1).unwrap(), softmax(&shifted, 1).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        for o in 0..3 {
            for i in 0..2 {
                let s: f64 = (0..4).map(|j| a.data()[(o * 4 + j) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_cases() {
        let a = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&a, &a, COSINE_EPS) - 1.0).abs() < 1e-15);
        assert!(cosine_distance(&a, &a, COSINE_EPS).abs() < 1e-15);
        let b2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert!((cosine_similarity(&a, &b2, COSINE_EPS) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0], COSINE_EPS), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 3.0], COSINE_EPS), 1.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0], COSINE_EPS), 0.0);
    }
}
