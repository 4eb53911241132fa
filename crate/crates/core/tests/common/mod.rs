#![allow(dead_code)]

use dvd_core::align::{encode, gpcas_pyramid, init_params, NetConfig};
use dvd_core::flow::constant_flow;
use dvd_core::params::{Adam, AdamConfig};
use dvd_core::autodiff::Tape;
use dvd_core::haze::crop_clamped;
use dvd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth random texture: a sum of a few random plane waves per channel.
pub fn texture(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..6 * c)
        .map(|_| {
            (
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.15),
            )
        })
        .collect();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        0.5 + waves[ch * 6..ch * 6 + 6]
            .iter()
            .map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin())
            .sum::<f64>()
    })
}

/// `(prev, cur)` cut from one canvas so that `cur(p) = prev(p + (dx, dy))`.
pub fn translated_pair(canvas: &Tensor, h: usize, w: usize, dx: i64, dy: i64) -> (Tensor, Tensor) {
    let pad = 16;
    let cur = crop_clamped(canvas, pad, pad, h, w);
    let prev = crop_clamped(canvas, pad - dx, pad - dy, h, w);
    (prev, cur)
}

/// Encoder pyramids of both frames under freshly initialized parameters.
pub fn pyramids(cfg: &NetConfig, prev: &Tensor, cur: &Tensor) -> (Vec<Tensor>, Vec<Tensor>) {
    let params = init_params(cfg).unwrap();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let p = tape.constant(prev.clone());
    let c = tape.constant(cur.clone());
    let fp = encode(&mut tape, &b, p, cfg.levels).unwrap();
    let fc = encode(&mut tape, &b, c, cfg.levels).unwrap();
    let get = |v: Vec<_>| v.into_iter().map(|x| tape.value(x).clone()).collect();
    (get(fp), get(fc))
}

/// Mean absolute difference over the interior, `margin` pixels from every edge.
pub fn interior_l1(a: &Tensor, b: &Tensor, margin: usize) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut s = 0.0;
    let mut n = 0;
    for ch in 0..c {
        for y in margin..h - margin {
            for x in margin..w - margin {
                s += (a.at3(ch, y, x) - b.at3(ch, y, x)).abs();
                n += 1;
            }
        }
    }
    s / n as f64
}

/// Uniform noise blurred by a `(2r+1)^2` box, rescaled to `[0, 1]`.
pub fn noise_texture(c: usize, h: usize, w: usize, r: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Tensor::from_fn(&[c, h, w], |_| rng.random::<f64>());
    let ri = r as i64;
    let mut out = Tensor::from_fn(&[c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        let (x, y) = ((p % w) as i64, (p / w) as i64);
        let mut s = 0.0;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let (xx, yy) = ((x + dx).clamp(0, w as i64 - 1), (y + dy).clamp(0, h as i64 - 1));
                s += raw.at3(ch, yy as usize, xx as usize);
            }
        }
        s / ((2 * r + 1) * (2 * r + 1)) as f64
    });
    let (lo, hi) = out.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    out.data_mut().iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    out
}

/// Trains only the alignment parameters on one translated pair with no flow
/// hint and returns the interior discrepancy before and after.
pub fn train_alignment(levels: usize, dx: i64, steps: usize, canvas: &Tensor) -> (f64, f64) {
    let cfg = NetConfig {
        levels,
        kernel: 3,
        dim: 8,
        channels: [8, 8, 8],
        ..NetConfig::default()
    };
    let (prev, cur) = translated_pair(canvas, 32, 32, dx, 0);
    let (fp, fc) = pyramids(&cfg, &prev, &cur);
    let mut params = init_params(&cfg).unwrap();
    let mut adam = Adam::new(AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    });
    let margin = 8;
    let pre = interior_l1(&fp[0], &fc[0], margin);
    let mut post = pre;
    for _ in 0..=steps {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, true);
        let q: Vec<_> = fc.iter().map(|t| tape.constant(t.clone())).collect();
        let s: Vec<_> = fp.iter().map(|t| tape.constant(t.clone())).collect();
        let f = tape.constant(constant_flow(32, 32, 0.0, 0.0));
        let out = gpcas_pyramid(&mut tape, &b, &cfg, &q, &s, f).unwrap();
        post = interior_l1(tape.value(out.aligned), &fc[0], margin);
        let loss = tape.mean_abs_diff(out.aligned, q[0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut g = b.gradients(&grads, &params);
        g.retain(|k, _| k.starts_with("gpcas.") && k != "gpcas.deform.w");
        adam.step(&mut params, &g).unwrap();
    }
    (pre, post)
}
