//! Warp and homography-algebra oracles.

use cad_nn::gradcheck::{central_diff, max_rel_err};
use cad_nn::{seeded_rng, Arr, Graph, ParamStore};
use cad_reg::{warp_array, warp_const, warp_node, Homography};
use ndarray::IxDyn;
use rand::Rng as _;

fn smooth_image(c: usize, h: usize, w: usize) -> Arr {
    let mut out = Arr::zeros(IxDyn(&[c, h, w]));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let fx = x as f64 / w as f64;
                let fy = y as f64 / h as f64;
                out[[ci, y, x]] = 0.5
                    + 0.3 * (2.0 * std::f64::consts::PI * fx).sin()
                        * (2.0 * std::f64::consts::PI * fy).cos()
                    + 0.05 * ci as f64;
            }
        }
    }
    out
}

#[test]
fn identity_warp_is_exact() {
    let x = smooth_image(2, 9, 7);
    let (out, mask) = warp_array(&x, &Homography::identity(), (9, 7)).unwrap();
    assert_eq!(out, x);
    assert!(mask.iter().all(|&m| m == 1.0));
}

#[test]
fn integer_translation_is_exact_on_valid_region() {
    let x = smooth_image(1, 8, 8);
    let h = Homography::translation(2.0, 0.0);
    let (out, mask) = warp_array(&x, &h, (8, 8)).unwrap();
    for y in 0..8 {
        for xx in 0..8usize {
            if xx >= 2 {
                assert_eq!(out[[0, y, xx]], x[[0, y, xx - 2]]);
                assert_eq!(mask[[0, y, xx]], 1.0);
            } else {
                assert_eq!(out[[0, y, xx]], 0.0);
                assert_eq!(mask[[0, y, xx]], 0.0);
            }
        }
    }
}

#[test]
fn quarter_turn_moves_one_hot_exactly() {
    // 90-degree rotation about the center of a 5x5 grid:
    // (x,y) -> (4 - y, x)
    let mut x = Arr::zeros(IxDyn(&[1, 5, 5]));
    x[[0, 2, 1]] = 1.0; // (x=1, y=2)
    let h = Homography([[0.0, -1.0, 4.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
    let (out, _) = warp_array(&x, &h, (5, 5)).unwrap();
    // forward image of (1,2) is (2,1)
    for y in 0..5 {
        for xx in 0..5 {
            let expect = if (xx, y) == (2, 1) { 1.0 } else { 0.0 };
            assert_eq!(out[[0, y, xx]], expect, "at ({xx},{y})");
        }
    }
}

#[test]
fn singular_homography_is_refused() {
    let x = smooth_image(1, 4, 4);
    let h = Homography([[0.0; 3], [0.0; 3], [0.0, 0.0, 1.0]]);
    assert!(warp_array(&x, &h, (4, 4)).is_err());
}

#[test]
fn compose_matches_sequential_warps_on_points() {
    let a = Homography([[1.02, 0.03, 1.5], [-0.02, 0.98, -0.7], [1e-4, -5e-5, 1.0]]);
    let b = Homography([[0.99, -0.01, -0.8], [0.02, 1.01, 0.4], [-2e-4, 1e-4, 1.0]]);
    let ab = a.compose(&b).unwrap();
    for &(x, y) in &[(0.0, 0.0), (15.0, 0.0), (0.0, 15.0), (15.0, 15.0)] {
        let (bx, by) = b.apply(x, y);
        let (sx, sy) = a.apply(bx, by);
        let (cx, cy) = ab.apply(x, y);
        assert!((sx - cx).abs() <= 1e-6 && (sy - cy).abs() <= 1e-6);
    }
    // and on sampled images
    let img = smooth_image(1, 16, 16);
    let (once, _) = warp_array(&img, &ab, (16, 16)).unwrap();
    let (step1, _) = warp_array(&img, &b, (16, 16)).unwrap();
    let (step2, m2) = warp_array(&step1, &a, (16, 16)).unwrap();
    // interior pixels where the intermediate warp stayed in bounds
    let mut checked = 0;
    for y in 3..13 {
        for x in 3..13 {
            if m2[[0, y, x]] == 1.0 {
                assert!((once[[0, y, x]] - step2[[0, y, x]]).abs() <= 2e-2);
                checked += 1;
            }
        }
    }
    assert!(checked > 50);
}

#[test]
fn compose_identity_and_inverse() {
    let h = Homography([[1.1, 0.1, 3.0], [-0.2, 0.9, -1.0], [1e-4, -2e-4, 1.0]]);
    assert_eq!(h.compose(&Homography::identity()).unwrap(), h.normalized().unwrap());
    let prod = h.compose(&h.inverse().unwrap()).unwrap();
    for r in 0..3 {
        for c in 0..3 {
            let expect = if r == c { 1.0 } else { 0.0 };
            assert!((prod.0[r][c] - expect).abs() <= 1e-10);
        }
    }
}

/// dst(x') = bilinear(src, x'/2): the resize consistent with rescale(H, 2).
fn resize2(x: &Arr) -> Arr {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Arr::zeros(IxDyn(&[c, 2 * h, 2 * w]));
    for ci in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[[ci, y, xx]] = cad_nn::sample::sample_bilinear_pixel(
                    x,
                    ci,
                    xx as f64 / 2.0,
                    y as f64 / 2.0,
                );
            }
        }
    }
    out
}

#[test]
fn rescale_matches_resampling_oracle() {
    let src = smooth_image(1, 32, 32);
    let h = Homography([[1.01, 0.02, 0.8], [-0.015, 0.99, -0.5], [2e-5, -1e-5, 1.0]]);
    let h2 = h.rescale(2.0).unwrap();
    // route 1: resize then warp at the fine grid
    let fine = resize2(&src);
    let (route1, m1) = warp_array(&fine, &h2, (64, 64)).unwrap();
    // route 2: warp at the coarse grid then resize
    let (coarse_warp, _) = warp_array(&src, &h, (32, 32)).unwrap();
    let route2 = resize2(&coarse_warp);
    let mut worst = 0.0f64;
    for y in 6..58 {
        for x in 6..58 {
            if m1[[0, y, x]] == 1.0 {
                worst = worst.max((route1[[0, y, x]] - route2[[0, y, x]]).abs());
            }
        }
    }
    assert!(worst <= 1e-2, "max abs diff {worst}");
}

#[test]
fn warp_gradient_wrt_homography_matches_finite_differences() {
    // smooth 8x8 input, loss on the interior so the mask stays constant
    let img = smooth_image(1, 8, 8);
    let target = smooth_image(1, 8, 8).mapv(|v| v * 0.9);
    let h0 = Arr::from_shape_vec(
        IxDyn(&[1, 3, 3]),
        vec![1.02, 0.015, 0.31, -0.01, 0.985, 0.23, 1e-3, -8e-4, 1.0],
    )
    .unwrap();
    let store = ParamStore::new();
    let loss = |hmat: &Arr| -> (f64, Option<Arr>) {
        let mut g = Graph::train(&store);
        let x = g.constant(
            img.clone()
                .into_shape_with_order(IxDyn(&[1, 1, 8, 8]))
                .unwrap(),
        );
        let t = g.constant(
            target
                .clone()
                .into_shape_with_order(IxDyn(&[1, 1, 8, 8]))
                .unwrap(),
        );
        let h = g.constant(hmat.clone());
        let (warped, _) = warp_node(&mut g, x, h, (8, 8)).unwrap();
        let wc = g.narrow(warped, 2, 2, 4);
        let wc = g.narrow(wc, 3, 2, 4);
        let tc = g.narrow(t, 2, 2, 4);
        let tc = g.narrow(tc, 3, 2, 4);
        let d = g.sub(wc, tc);
        let sq = g.square(d);
        let l = g.mean_all(sq);
        let grads = g.backward(l);
        (g.scalar(l), grads.get(h).cloned())
    };
    let (_, analytic) = loss(&h0);
    let numeric = central_diff(|hm| loss(hm).0, &h0, 1e-6);
    let err = max_rel_err(&analytic.unwrap(), &numeric, 1e-6);
    assert!(err <= 1e-4, "rel err {err:.3e}");
}

#[test]
fn graph_warp_agrees_with_plain_warp() {
    let mut rng = seeded_rng(3);
    let n = 1 * 2 * 10 * 11;
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let x = Arr::from_shape_vec(IxDyn(&[2, 10, 11]), data).unwrap();
    let h = Homography([[1.05, -0.02, 1.2], [0.03, 0.97, -0.4], [3e-4, 1e-4, 1.0]]);
    let (plain, plain_mask) = warp_array(&x, &h, (10, 11)).unwrap();
    let store = ParamStore::new();
    let mut g = Graph::eval(&store);
    let xb = g.constant(x.into_shape_with_order(IxDyn(&[1, 2, 10, 11])).unwrap());
    let (node, mask) = warp_const(&mut g, xb, &h, (10, 11)).unwrap();
    let got = g.value(node);
    for ci in 0..2 {
        for y in 0..10 {
            for xx in 0..11 {
                assert!((got[[0, ci, y, xx]] - plain[[ci, y, xx]]).abs() <= 1e-12);
            }
        }
    }
    for y in 0..10 {
        for xx in 0..11 {
            assert_eq!(mask[[0, 0, y, xx]], plain_mask[[0, y, xx]]);
        }
    }
}
