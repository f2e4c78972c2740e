//! Differentiable projective warping.

use cad_nn::sample::valid_mask_from_grid_px;
use cad_nn::{Arr, Graph, NodeId};
use ndarray::IxDyn;

use crate::homography::{Homography, MIN_DET};
use crate::{RegError, Result};

/// Warp with a constant homography. `h` is the forward map from the input
/// frame to the output frame; sampling runs through its inverse, computed
/// analytically so integer transforms stay exact. Returns the warped tensor
/// and an (N,1,A',B') validity mask.
pub fn warp_const(
    g: &mut Graph,
    x: NodeId,
    h: &Homography,
    out_dims: (usize, usize),
) -> Result<(NodeId, Arr)> {
    let shape = g.shape(x).to_vec();
    assert_eq!(shape.len(), 4, "warp expects (N,C,A,B)");
    let (n, in_h, in_w) = (shape[0], shape[2], shape[3]);
    let hinv = h.inverse()?;
    let mats = g.mat3_const(hinv.0, n);
    let grid = g.homography_grid_px(mats, out_dims.0, out_dims.1);
    let mask = valid_mask_from_grid_px(g.value(grid), in_h, in_w);
    let out = g.grid_sample_px(x, grid);
    Ok((out, mask))
}

/// Warp with an in-graph homography node (N,3,3) of forward maps, keeping
/// the whole path differentiable with respect to the homography entries.
pub fn warp_node(
    g: &mut Graph,
    x: NodeId,
    h: NodeId,
    out_dims: (usize, usize),
) -> Result<(NodeId, Arr)> {
    let shape = g.shape(x).to_vec();
    assert_eq!(shape.len(), 4, "warp expects (N,C,A,B)");
    let (in_h, in_w) = (shape[2], shape[3]);
    let hs = g.shape(h).to_vec();
    assert_eq!(&hs[1..], &[3, 3], "homography node must be (N,3,3)");
    assert_eq!(hs[0], shape[0], "batch mismatch between tensor and maps");
    // refuse near-singular maps before inverting
    for ni in 0..hs[0] {
        let v = g.value(h);
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = v[[ni, r, c]];
            }
        }
        let det = cad_nn::sample::det3(&m);
        if det.abs() < MIN_DET {
            return Err(RegError::SingularHomography(format!(
                "batch element {ni} has determinant {det}"
            )));
        }
    }
    let hinv = g.mat3_inv(h);
    let grid = g.homography_grid_px(hinv, out_dims.0, out_dims.1);
    let mask = valid_mask_from_grid_px(g.value(grid), in_h, in_w);
    let out = g.grid_sample_px(x, grid);
    Ok((out, mask))
}

/// In-graph equivalent of [`Homography::rescale`]: S * H * S^-1.
pub fn rescale_node(g: &mut Graph, h: NodeId, s: f64) -> NodeId {
    let n = g.shape(h)[0];
    let sm = g.mat3_const([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]], n);
    let sinv = g.mat3_const(
        [[1.0 / s, 0.0, 0.0], [0.0, 1.0 / s, 0.0], [0.0, 0.0, 1.0]],
        n,
    );
    let t = g.mat3_mul(sm, h);
    g.mat3_mul(t, sinv)
}

/// Plain (non-graph) warp of a single (C,A,B) array. Same math as
/// [`warp_const`]; used by the data generator and oracle tests.
pub fn warp_array(x: &Arr, h: &Homography, out_dims: (usize, usize)) -> Result<(Arr, Arr)> {
    assert_eq!(x.ndim(), 3, "warp_array expects (C,A,B)");
    let (c, in_h, in_w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hinv = h.inverse()?;
    let (ho, wo) = out_dims;
    let mut out = Arr::zeros(IxDyn(&[c, ho, wo]));
    let mut mask = Arr::zeros(IxDyn(&[1, ho, wo]));
    for oy in 0..ho {
        for ox in 0..wo {
            let (px, py) = hinv.apply(ox as f64, oy as f64);
            if px >= 0.0 && px <= in_w as f64 - 1.0 && py >= 0.0 && py <= in_h as f64 - 1.0 {
                mask[[0, oy, ox]] = 1.0;
            }
            for ci in 0..c {
                out[[ci, oy, ox]] = cad_nn::sample::sample_bilinear_pixel(x, ci, px, py);
            }
        }
    }
    Ok((out, mask))
}

/// Masked mean-squared error: only positions where `mask` is 1 contribute.
/// `mask` is (N,1,A,B) and broadcasts over channels.
pub fn masked_mse(g: &mut Graph, a: NodeId, b: NodeId, mask: &Arr) -> NodeId {
    let c = g.shape(a)[1];
    let count = mask.sum() * c as f64;
    let m = g.constant(mask.clone());
    let d = g.sub(a, b);
    let sq = g.square(d);
    let masked = g.mul(sq, m);
    let total = g.sum_all(masked);
    g.scale(total, 1.0 / count.max(1.0))
}
