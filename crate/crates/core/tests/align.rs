mod common;

use common::{interior_l1, noise_texture, pyramids, texture, train_alignment, translated_pair};
use dvd_core::align::{dehaze_step, fcas::Projections, flow_guided_attention, gpcas_pyramid, infer, init_params, NetConfig};
use dvd_core::autodiff::Tape;
use dvd_core::flow::constant_flow;
use dvd_core::ops::attention::{WindowAttention, WindowShape};
use dvd_core::ops::conv::conv2d;
use dvd_core::ops::deform::{center_identity, DeformConv};
use dvd_core::ops::Padding;
use dvd_core::Tensor;

/// Aligned finest features and the current ones for an untrained network.
fn untrained_alignment(cfg: &NetConfig, prev: &Tensor, cur: &Tensor, flow: &Tensor) -> (Tensor, Tensor) {
    let (fp, fc) = pyramids(cfg, prev, cur);
    let params = init_params(cfg).unwrap();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let q: Vec<_> = fc.iter().map(|t| tape.constant(t.clone())).collect();
    let s: Vec<_> = fp.iter().map(|t| tape.constant(t.clone())).collect();
    let f = tape.constant(flow.clone());
    let out = gpcas_pyramid(&mut tape, &b, cfg, &q, &s, f).unwrap();
    (tape.value(out.aligned).clone(), fc[0].clone())
}

#[test]
fn untrained_network_returns_current_frame() {
    let cfg = NetConfig::default();
    let canvas = texture(3, 80, 80, 1);
    let (prev, cur) = translated_pair(&canvas, 32, 32, 2, 1);
    let params = init_params(&cfg).unwrap();
    let out = infer(&params, &cfg, &prev, &cur, &constant_flow(32, 32, 2.0, 1.0)).unwrap();
    assert_eq!(out, cur.map(|v| v.clamp(0.0, 1.0)));
}

#[test]
fn exact_flow_aligns_translated_features() {
    let cfg = NetConfig::default();
    let canvas = texture(3, 96, 96, 2);
    for (dx, dy) in [(3, 0), (-5, 2), (6, -6)] {
        let (prev, cur) = translated_pair(&canvas, 48, 48, dx, dy);
        let flow = constant_flow(48, 48, dx as f64, dy as f64);
        let (aligned, current) = untrained_alignment(&cfg, &prev, &cur, &flow);
        let (fp, _) = pyramids(&cfg, &prev, &cur);
        let before = interior_l1(&current, &fp[0], 8);
        let after = interior_l1(&current, &aligned, 8);
        assert!(after <= 0.1 * before, "({dx}, {dy}): {after} vs {before}");
    }
}

#[test]
fn single_tap_zero_flow_returns_projected_values() {
    let f_cur = texture(6, 12, 12, 3);
    let f_src = texture(6, 12, 12, 4);
    let wv = texture(4, 6, 1, 9).reshape(&[4, 6, 1, 1]).unwrap();
    let mut tape = Tape::new();
    let proj = Projections {
        wq: tape.constant(texture(4, 6, 1, 7).reshape(&[4, 6, 1, 1]).unwrap()),
        wk: tape.constant(texture(4, 6, 1, 8).reshape(&[4, 6, 1, 1]).unwrap()),
        wv: tape.constant(wv.clone()),
    };
    let q = tape.constant(f_cur);
    let s = tape.constant(f_src.clone());
    let flow = tape.constant(Tensor::zeros(&[2, 12, 12]));
    let op = WindowAttention::new(1, WindowShape::Square, 4, Padding::Border).unwrap();
    let a = flow_guided_attention(&mut tape, q, s, flow, &proj, &op, 1).unwrap();
    assert_eq!(tape.value(a.output), &conv2d(&f_src, &wv, 1, 0).unwrap());
    assert!(a.weights.data().iter().all(|&w| w == 1.0));
}

#[test]
fn identity_deformation_is_a_copy() {
    let x = texture(5, 10, 9, 6);
    let op = DeformConv::new(3, Padding::Border).unwrap();
    let out = op
        .forward(&x, &Tensor::zeros(&[18, 10, 9]), &Tensor::zeros(&[2, 10, 9]), &center_identity(5, 3))
        .unwrap();
    assert_eq!(out, x);
}

#[test]
fn step_outputs_stay_in_range() {
    let cfg = NetConfig::default();
    let mut params = init_params(&cfg).unwrap();
    params.get_mut("dec.1.b").unwrap().data_mut().copy_from_slice(&[5.0, -5.0, 0.0]);
    let canvas = texture(3, 80, 80, 7);
    let (prev, cur) = translated_pair(&canvas, 16, 16, 1, 0);
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let (p, c) = (tape.constant(prev), tape.constant(cur));
    let f = tape.constant(constant_flow(16, 16, 1.0, 0.0));
    let out = dehaze_step(&mut tape, &b, &cfg, p, c, f).unwrap();
    let o = tape.value(out.output);
    assert!(o.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(out.fcas_weights.len(), 3);
    assert!(out.dcaf_weights.is_some());
}

#[test]
fn pyramid_recovers_larger_motion_than_one_level() {
    for canvas in [texture(3, 80, 80, 5), noise_texture(3, 80, 80, 1, 5)] {
        let (pre, one) = train_alignment(1, 8, 600, &canvas);
        let (_, three) = train_alignment(3, 8, 600, &canvas);
        assert!(three < one && one < pre, "{pre} {one} {three}");
    }
}
