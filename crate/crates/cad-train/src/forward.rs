//! Differentiable per-stage forward passes and their eval-mode mirrors.

use cad_cd::cd_loss;
use cad_codec::RasterImage;
use cad_nn::{Arr, Graph, NodeId, Rng};
use cad_reg::{pixel_tap, registration_loss, rescale_node, warp_node, Homography};
use ndarray::IxDyn;

use crate::bundle::ModelBundle;
use crate::{Result, TrainError};

/// Stack (C,H,W) arrays into a (B,C,H,W) batch.
pub fn batch_arrays(items: &[&Arr]) -> Arr {
    assert!(!items.is_empty());
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut out = Arr::zeros(IxDyn(&shape));
    for (i, item) in items.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(*item);
    }
    out
}

pub fn batch_masks(items: &[&Arr]) -> Arr {
    // (H,W) ground-truth masks -> (B,1,H,W)
    let b = items.len();
    let (h, w) = (items[0].shape()[0], items[0].shape()[1]);
    let mut out = Arr::zeros(IxDyn(&[b, 1, h, w]));
    for (i, m) in items.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out[[i, 0, y, x]] = m[[y, x]];
            }
        }
    }
    out
}

pub struct CompressionStep {
    pub loss: NodeId,
    pub mse: f64,
    pub bpp: f64,
}

/// Rate-distortion training step: lambda * bpp + mse over the batch.
pub fn compression_step(
    bundle: &ModelBundle,
    g: &mut Graph,
    x: Arr,
    lambda: f64,
    noise_rng: &mut Rng,
) -> Result<CompressionStep> {
    let codec = bundle
        .codec
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("stage needs a codec".into()))?;
    let pixels: f64 = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f64;
    let xi = g.constant(x);
    let fwd = codec.train_forward(g, xi, noise_rng);
    let d = g.sub(fwd.recon, xi);
    let sq = g.square(d);
    let mse = g.mean_all(sq);
    let bpp = g.scale(fwd.bits, 1.0 / pixels);
    let rate_term = g.scale(bpp, lambda);
    let loss = g.add(rate_term, mse);
    Ok(CompressionStep {
        loss,
        mse: g.scalar(mse),
        bpp: g.scalar(bpp),
    })
}

pub struct RegistrationStep {
    pub loss: NodeId,
    pub h_full: Vec<Homography>,
}

/// Solo registration step on self-pairs in pixel space: the feature stream
/// is the weightless pixel tap so weights transfer to the codec-fed modes.
pub fn registration_step(
    bundle: &ModelBundle,
    g: &mut Graph,
    reference: Arr,
    moving: Arr,
    alphas: (f64, f64, f64),
) -> Result<RegistrationStep> {
    let reg = bundle
        .reg
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("stage needs the registrar".into()))?;
    let f = bundle.sys.codec.tap_channels;
    let x1 = g.constant(reference);
    let x2 = g.constant(moving);
    let z1 = pixel_tap(g, x1, f);
    let z2 = pixel_tap(g, x2, f);
    let out = reg
        .register(g, x1, x2, z2, z1)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let loss = registration_loss(g, &out.pyramid, alphas)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    Ok(RegistrationStep {
        loss,
        h_full: out.h_full,
    })
}

pub struct CdStep {
    pub loss: NodeId,
    pub prob: NodeId,
}

/// Aligned-pair detection step in pixel space (stem attached).
pub fn cd_step(bundle: &ModelBundle, g: &mut Graph, x1: Arr, x2: Arr, gt: Arr) -> Result<CdStep> {
    let cd = bundle
        .cd
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("stage needs the detector".into()))?;
    let a = g.constant(x1);
    let b = g.constant(x2);
    let t = g.constant(gt);
    let prob = cd
        .forward(g, a, b)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let loss = cd_loss(g, prob, t).map_err(|e| TrainError::Forward(e.to_string()))?;
    Ok(CdStep { loss, prob })
}

pub struct JointStep {
    pub loss: NodeId,
    pub l_cd: f64,
    pub l_reg: f64,
    pub bpp: f64,
    pub h_full: Vec<Homography>,
    pub prob: NodeId,
}

/// Joint registration + detection in pixel space (no compression): the
/// cascade aligns the distorted second image, the warped pixels feed the
/// stem-equipped detector, losses mix via alpha.
pub fn joint_step(
    bundle: &ModelBundle,
    g: &mut Graph,
    x1: Arr,
    x2d: Arr,
    gt: Arr,
    alpha: f64,
    reg_alphas: (f64, f64, f64),
) -> Result<JointStep> {
    let reg = bundle
        .reg
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("stage needs the registrar".into()))?;
    let cd = bundle
        .cd
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("stage needs the detector".into()))?;
    let f = bundle.sys.codec.tap_channels;
    let dims = (x1.shape()[2], x1.shape()[3]);
    let x1n = g.constant(x1);
    let x2n = g.constant(x2d);
    let gtn = g.constant(gt);
    let z1 = pixel_tap(g, x1n, f);
    let z2 = pixel_tap(g, x2n, f);
    let out = reg
        .register(g, x1n, x2n, z2, z1)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let l_reg = registration_loss(g, &out.pyramid, reg_alphas)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let h_full_node = rescale_node(g, out.h_feat_node, 2.0);
    let (x2_warped, _mask) = warp_node(g, x2n, h_full_node, dims)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let prob = cd
        .forward(g, x1n, x2_warped)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let l_cd = cd_loss(g, prob, gtn).map_err(|e| TrainError::Forward(e.to_string()))?;
    let cd_term = g.scale(l_cd, alpha);
    let reg_term = g.scale(l_reg, 1.0 - alpha);
    let loss = g.add(cd_term, reg_term);
    Ok(JointStep {
        loss,
        l_cd: g.scalar(l_cd),
        l_reg: g.scalar(l_reg),
        bpp: 0.0,
        h_full: out.h_full,
        prob,
    })
}

/// Full rate-penalized pass: both images through the codec (noise path),
/// cascade on reconstructions + taps, detection on (z1, w2).
#[allow(clippy::too_many_arguments)]
pub fn end_to_end_step(
    bundle: &ModelBundle,
    g: &mut Graph,
    x1: Arr,
    x2d: Arr,
    gt: Arr,
    alpha: f64,
    lambda: f64,
    reg_alphas: (f64, f64, f64),
    noise_rng: &mut Rng,
) -> Result<JointStep> {
    let codec = bundle
        .codec
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("stage needs a codec".into()))?;
    let reg = bundle
        .reg
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("stage needs the registrar".into()))?;
    let cd = bundle
        .cd
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("stage needs the detector".into()))?;
    let pixels: f64 = (x1.shape()[0] * x1.shape()[2] * x1.shape()[3]) as f64;
    let x1n = g.constant(x1);
    let x2n = g.constant(x2d);
    let gtn = g.constant(gt);
    let f1 = codec.train_forward(g, x1n, noise_rng);
    let f2 = codec.train_forward(g, x2n, noise_rng);
    let out = reg
        .register(g, f1.recon, f2.recon, f2.tap, f1.tap)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let l_reg = registration_loss(g, &out.pyramid, reg_alphas)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let prob = cd
        .forward(g, f1.tap, out.w2)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let l_cd = cd_loss(g, prob, gtn).map_err(|e| TrainError::Forward(e.to_string()))?;
    let bits = g.add(f1.bits, f2.bits);
    let bpp = g.scale(bits, 1.0 / (2.0 * pixels));
    let cd_term = g.scale(l_cd, alpha);
    let reg_term = g.scale(l_reg, 1.0 - alpha);
    let rate_term = g.scale(bpp, lambda);
    let partial = g.add(cd_term, reg_term);
    let loss = g.add(partial, rate_term);
    Ok(JointStep {
        loss,
        l_cd: g.scalar(l_cd),
        l_reg: g.scalar(l_reg),
        bpp: g.scalar(bpp),
        h_full: out.h_full,
        prob,
    })
}

/// Eval-mode end-to-end inference over one pair of plain images, mirroring
/// the deployed path: rounded latents, reconstruction + tap, cascade,
/// detection in feature space. Returns the probability map in the t1
/// frame, the composed homography and the estimated bits per pixel.
pub struct EvalOutcome {
    pub prob: Arr, // (H,W)
    pub h_full: Homography,
    pub bpp: f64,
}

pub fn eval_end_to_end(
    bundle: &ModelBundle,
    x1: &RasterImage,
    x2d: &RasterImage,
) -> Result<EvalOutcome> {
    let codec = bundle
        .codec
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("eval needs a codec".into()))?;
    let reg = bundle
        .reg
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("eval needs the registrar".into()))?;
    let cd = bundle
        .cd
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("eval needs the detector".into()))?;
    let store = &bundle.store;
    let mut rng = cad_nn::seeded_rng(0);
    let mut total_bits = 0.0;
    let mut recons = Vec::new();
    let mut taps = Vec::new();
    for img in [x1, x2d] {
        let lat = codec
            .encode(store, img)
            .map_err(|e| TrainError::Forward(e.to_string()))?;
        let q = codec.quantize(&lat, cad_codec::QuantizeMode::Eval, &mut rng);
        total_bits += codec
            .estimate_rate(store, &q)
            .map_err(|e| TrainError::Forward(e.to_string()))?;
        let (recon, tap) = codec
            .decode(store, &q, &img.tile_id, img.timestamp)
            .map_err(|e| TrainError::Forward(e.to_string()))?;
        recons.push(recon.data);
        taps.push(tap.data);
    }
    let pixels = (x1.height() * x1.width()) as f64;
    let bpp = total_bits / (2.0 * pixels);

    let mut g = Graph::eval(store);
    let b1 = g.constant(batch_arrays(&[&recons[0]]));
    let b2 = g.constant(batch_arrays(&[&recons[1]]));
    let t1 = g.constant(batch_arrays(&[&taps[0]]));
    let t2 = g.constant(batch_arrays(&[&taps[1]]));
    let out = reg
        .register(&mut g, b1, b2, t2, t1)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let prob = cd
        .forward(&mut g, t1, out.w2)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let v = g.value(prob);
    let (h, w) = (v.shape()[2], v.shape()[3]);
    Ok(EvalOutcome {
        prob: v.clone().into_shape_with_order(IxDyn(&[h, w])).unwrap(),
        h_full: out.h_full[0],
        bpp,
    })
}

/// Eval-mode joint (no compression) inference in pixel space.
pub fn eval_joint(
    bundle: &ModelBundle,
    x1: &RasterImage,
    x2d: &RasterImage,
) -> Result<EvalOutcome> {
    let reg = bundle
        .reg
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("eval needs the registrar".into()))?;
    let cd = bundle
        .cd
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("eval needs the detector".into()))?;
    let f = bundle.sys.codec.tap_channels;
    let dims = (x1.height(), x1.width());
    let mut g = Graph::eval(&bundle.store);
    let a = g.constant(batch_arrays(&[&x1.data]));
    let b = g.constant(batch_arrays(&[&x2d.data]));
    let z1 = pixel_tap(&mut g, a, f);
    let z2 = pixel_tap(&mut g, b, f);
    let out = reg
        .register(&mut g, a, b, z2, z1)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let h_full_node = rescale_node(&mut g, out.h_feat_node, 2.0);
    let (warped, _) = warp_node(&mut g, b, h_full_node, dims)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let prob = cd
        .forward(&mut g, a, warped)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let v = g.value(prob);
    let (h, w) = (v.shape()[2], v.shape()[3]);
    Ok(EvalOutcome {
        prob: v.clone().into_shape_with_order(IxDyn(&[h, w])).unwrap(),
        h_full: out.h_full[0],
        bpp: 0.0,
    })
}
