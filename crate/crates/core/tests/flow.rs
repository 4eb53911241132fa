mod common;

use common::noise_texture;
use dvd_core::flow::{blockmatch, blockmatch_flows, constant_flow, endpoint_error, load_flows, save_flows, BlockMatchParams};
use dvd_core::haze::{translate, DcpParams};
use dvd_core::pipeline::dataset::{synth_pair, SynthConfig};
use dvd_core::pipeline::run::predehazed;
use dvd_core::scene::MisalignmentConfig;

#[test]
fn static_scene_has_zero_flow() {
    let f = noise_texture(3, 40, 40, 1, 1);
    let flow = blockmatch(&f, &f, &BlockMatchParams::default()).unwrap();
    assert!(flow.data().iter().all(|&v| v == 0.0));
}

#[test]
fn integer_translation_is_exact_on_interior_blocks() {
    let from = noise_texture(3, 48, 48, 1, 2);
    let to = translate(&from, -3, 0);
    let p = BlockMatchParams {
        smooth: 0,
        ..BlockMatchParams::default()
    };
    let flow = blockmatch(&from, &to, &p).unwrap();
    for y in 8..40 {
        for x in 8..40 {
            assert_eq!((flow.at3(0, y, x), flow.at3(1, y, x)), (3.0, 0.0), "at ({x}, {y})");
        }
    }
}

#[test]
fn blockmatch_tracks_synthetic_camera_motion() {
    let mut errors = Vec::new();
    for seed in 0..6 {
        let cfg = SynthConfig {
            misalignment: MisalignmentConfig {
                seed: 20 + seed,
                ..Default::default()
            },
            ..SynthConfig::default()
        };
        let s = synth_pair(&cfg, 0).unwrap();
        let inputs = predehazed(&s.pair.hazy, &DcpParams::default()).unwrap();
        let est = blockmatch_flows(&inputs, &BlockMatchParams::default()).unwrap();
        for (e, t) in est.iter().zip(&s.flows) {
            errors.push(endpoint_error(&e.fw, &t.fw).unwrap());
            errors.push(endpoint_error(&e.bw, &t.bw).unwrap());
        }
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    assert!(mean < 1.5, "mean endpoint error {mean}");
}

#[test]
fn flow_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let flows = vec![dvd_core::flow::FlowPair {
        fw: constant_flow(6, 7, -1.5, 2.0),
        bw: constant_flow(6, 7, 1.5, -2.0),
    }];
    save_flows(dir.path(), &flows).unwrap();
    assert_eq!(load_flows(dir.path(), 1, 6, 7).unwrap(), flows);
    assert!(load_flows(dir.path(), 1, 7, 7).is_err());
    assert!(load_flows(dir.path(), 2, 6, 7).is_err());
}
