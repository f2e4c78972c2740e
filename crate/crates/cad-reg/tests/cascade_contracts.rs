//! Cascade and loss contracts that hold before any training.

use cad_nn::{seeded_rng, Arr, Graph, ParamStore};
use cad_reg::{
    pixel_tap, registration_loss, CascadeRegistrar, Homography, HomographyRegressor, LevelConfig,
    LevelScale, PyramidLevel, RegressorConfig,
};
use ndarray::IxDyn;
use rand::Rng as _;

fn rand_arr(rng: &mut cad_nn::Rng, shape: &[usize]) -> Arr {
    let n: usize = shape.iter().product();
    Arr::from_shape_vec(
        IxDyn(shape),
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn untrained_regressor_emits_identity_exactly() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(1);
    let cfg = LevelConfig {
        input_scale: LevelScale::Quarter,
        channel_width: 8,
        num_encoder_blocks: 2,
        use_avg_pool: true,
    };
    let reg = HomographyRegressor::new(&mut store, &mut rng, "reg", 3, &cfg, 2);
    let mut g = Graph::eval(&store);
    let a = g.constant(rand_arr(&mut rng, &[2, 3, 16, 16]));
    let b = g.constant(rand_arr(&mut rng, &[2, 3, 16, 16]));
    let h = reg.forward(&mut g, a, b).unwrap();
    let v = g.value(h);
    for ni in 0..2 {
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert_eq!(v[[ni, r, c]], expect);
            }
        }
    }
}

#[test]
fn regressor_rejects_mismatched_shapes() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(2);
    let cfg = RegressorConfig::toy();
    let reg = HomographyRegressor::new(&mut store, &mut rng, "reg", 3, &cfg.levels[0], 2);
    let mut g = Graph::eval(&store);
    let a = g.constant(rand_arr(&mut rng, &[1, 3, 16, 16]));
    let b = g.constant(rand_arr(&mut rng, &[1, 3, 8, 8]));
    assert!(reg.forward(&mut g, a, b).is_err());
}

#[test]
fn config_validation_rules() {
    let mut cfg = RegressorConfig::default();
    assert!(cfg.validate().is_ok());
    cfg.levels[2].channel_width = 1; // decreasing width
    assert!(cfg.validate().is_err());
    let mut cfg = RegressorConfig::default();
    cfg.levels.pop();
    assert!(cfg.validate().is_err());
}

#[test]
fn untrained_cascade_composes_to_identity_and_w2_equals_z2() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(3);
    let cascade =
        CascadeRegistrar::new(&mut store, &mut rng, "reg", 3, 4, RegressorConfig::toy()).unwrap();
    let mut g = Graph::eval(&store);
    let x1 = g.constant(rand_arr(&mut rng, &[2, 3, 32, 32]));
    let x2 = g.constant(rand_arr(&mut rng, &[2, 3, 32, 32]));
    let z1 = g.constant(rand_arr(&mut rng, &[2, 4, 16, 16]));
    let z2v = rand_arr(&mut rng, &[2, 4, 16, 16]);
    let z2 = g.constant(z2v.clone());
    let out = cascade.register(&mut g, x1, x2, z2, z1).unwrap();
    for h in out.h_full.iter().chain(&out.h_quarter).chain(&out.h_half) {
        assert_eq!(*h, Homography::identity());
    }
    assert_eq!(g.value(out.w2), &z2v);
    assert_eq!(g.shape(out.w2), &[2, 4, 16, 16]);
    assert!(out.w2_mask.iter().all(|&m| m == 1.0));
    assert_eq!(out.pyramid.len(), 3);
}

#[test]
fn cascade_rejects_inconsistent_feature_dims() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(4);
    let cascade =
        CascadeRegistrar::new(&mut store, &mut rng, "reg", 3, 4, RegressorConfig::toy()).unwrap();
    let mut g = Graph::eval(&store);
    let x1 = g.constant(rand_arr(&mut rng, &[1, 3, 32, 32]));
    let x2 = g.constant(rand_arr(&mut rng, &[1, 3, 32, 32]));
    let z1 = g.constant(rand_arr(&mut rng, &[1, 4, 8, 8])); // wrong: not H/2
    let z2 = g.constant(rand_arr(&mut rng, &[1, 4, 8, 8]));
    assert!(cascade.register(&mut g, x1, x2, z2, z1).is_err());
}

#[test]
fn registration_loss_hand_cases() {
    let store = ParamStore::new();
    let mut g = Graph::train(&store);
    // perfectly aligned pyramids -> 0
    let mk = |g: &mut Graph, v: f64, shape: &[usize]| g.constant(Arr::from_elem(IxDyn(shape), v));
    let full_mask = Arr::ones(IxDyn(&[1, 1, 2, 2]));
    let aligned: Vec<PyramidLevel> = (0..3)
        .map(|_| PyramidLevel {
            reference: mk(&mut g, 0.7, &[1, 1, 2, 2]),
            warped: mk(&mut g, 0.7, &[1, 1, 2, 2]),
            mask: full_mask.clone(),
        })
        .collect();
    let l = registration_loss(&mut g, &aligned, (0.5, 0.3, 0.2)).unwrap();
    assert_eq!(g.scalar(l), 0.0);

    // alpha = (1,0,0) equals the full-resolution MSE alone
    let offsets = [0.1, 0.5, 0.9];
    let pyr: Vec<PyramidLevel> = offsets
        .iter()
        .map(|&d| PyramidLevel {
            reference: mk(&mut g, 0.5, &[1, 1, 2, 2]),
            warped: mk(&mut g, 0.5 + d, &[1, 1, 2, 2]),
            mask: full_mask.clone(),
        })
        .collect();
    let l =
        registration_loss(&mut g, &pyr, (1.0, 0.0, 0.0)).unwrap();
    assert!((g.scalar(l) - 0.1 * 0.1).abs() < 1e-12);

    // hand-built 2x2 offsets: alpha-weighted sum of squared constants
    let l = registration_loss(&mut g, &pyr, (0.5, 0.3, 0.2)).unwrap();
    let expect = 0.5 * 0.01 + 0.3 * 0.25 + 0.2 * 0.81;
    assert!((g.scalar(l) - expect).abs() < 1e-12);
}

#[test]
fn out_of_bounds_fill_does_not_change_masked_loss() {
    // warp with a translation, then corrupt the invalid region of the
    // warped tensor; the masked loss must not move
    let store = ParamStore::new();
    let mut rng = seeded_rng(5);
    let img = rand_arr(&mut rng, &[1, 1, 8, 8]);
    let h = Homography::translation(3.0, 0.0);

    let loss_with_fill = |fill: f64| -> f64 {
        let mut g = Graph::train(&store);
        let x = g.constant(img.clone());
        let (warped, mask) = cad_reg::warp_const(&mut g, x, &h, (8, 8)).unwrap();
        // overwrite out-of-bounds pixels with the fill constant
        let mut wv = g.value(warped).clone();
        for y in 0..8 {
            for xx in 0..8 {
                if mask[[0, 0, y, xx]] == 0.0 {
                    wv[[0, 0, y, xx]] = fill;
                }
            }
        }
        let warped_filled = g.constant(wv);
        let reference = g.constant(img.clone());
        let pyr = vec![
            PyramidLevel {
                reference,
                warped: warped_filled,
                mask: mask.clone(),
            },
            PyramidLevel {
                reference,
                warped: warped_filled,
                mask,
            },
            {
                let z = g.constant(Arr::zeros(IxDyn(&[1, 1, 2, 2])));
                PyramidLevel {
                    reference: z,
                    warped: z,
                    mask: Arr::ones(IxDyn(&[1, 1, 2, 2])),
                }
            },
        ];
        let l = registration_loss(&mut g, &pyr, (0.6, 0.3, 0.1)).unwrap();
        g.scalar(l)
    };
    let a = loss_with_fill(0.0);
    let b = loss_with_fill(123.0);
    let c = loss_with_fill(-55.5);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn pixel_tap_tiles_channels_at_half_resolution() {
    let store = ParamStore::new();
    let mut g = Graph::eval(&store);
    let mut rng = seeded_rng(6);
    let x = g.constant(rand_arr(&mut rng, &[2, 3, 16, 16]));
    let tap = pixel_tap(&mut g, x, 8);
    assert_eq!(g.shape(tap), &[2, 8, 8, 8]);
    let v = g.value(tap);
    // channel i equals channel i mod 3
    for ni in 0..2 {
        for ci in 0..8 {
            for y in 0..8 {
                for xx in 0..8 {
                    assert_eq!(v[[ni, ci, y, xx]], v[[ni, ci % 3, y, xx]]);
                }
            }
        }
    }
}

#[test]
fn cascade_complexity_is_reported() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(7);
    let cascade = CascadeRegistrar::new(
        &mut store,
        &mut rng,
        "reg",
        3,
        32,
        RegressorConfig::default(),
    )
    .unwrap();
    let cost = cascade.complexity((512, 512));
    assert!(cost.params > 10_000);
    assert!(cost.flops > 1_000_000);
}
