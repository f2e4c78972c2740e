//! Coarse-to-fine registration: three regressors at 1/4, 1/2 and full
//! resolution refine a composed homography that finally warps the feature
//! stream of the second acquisition onto the grid of the first.

use cad_nn::complexity::Cost;
use cad_nn::{Arr, Graph, NodeId, ParamStore, Rng};

use crate::homography::Homography;
use crate::regressor::{HomographyRegressor, RegressorConfig};
use crate::warp::{masked_mse, rescale_node, warp_node};
use crate::{RegError, Result};

pub struct CascadeRegistrar {
    pub cfg: RegressorConfig,
    pub levels: Vec<HomographyRegressor>,
    pub image_channels: usize,
    pub feature_channels: usize,
}

/// One scale of the multiscale alignment loss.
pub struct PyramidLevel {
    pub reference: NodeId,
    pub warped: NodeId,
    pub mask: Arr,
}

pub struct CascadeOutput {
    /// Composed full-resolution (pixel-frame) homography per batch element.
    pub h_full: Vec<Homography>,
    pub h_quarter: Vec<Homography>,
    pub h_half: Vec<Homography>,
    /// Composed map on the feature grid, still differentiable.
    pub h_feat_node: NodeId,
    /// Feature stream of t2 warped onto the grid of t1.
    pub w2: NodeId,
    pub w2_mask: Arr,
    /// Full / half / quarter alignment terms for the multiscale loss.
    pub pyramid: Vec<PyramidLevel>,
}

impl CascadeRegistrar {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        image_channels: usize,
        feature_channels: usize,
        cfg: RegressorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let levels = vec![
            HomographyRegressor::new(
                store,
                rng,
                &format!("{prefix}.level0"),
                image_channels,
                &cfg.levels[0],
                2,
            ),
            HomographyRegressor::new(
                store,
                rng,
                &format!("{prefix}.level1"),
                feature_channels,
                &cfg.levels[1],
                2,
            ),
            // the full-resolution level keeps more spatial detail before
            // the global pooling: it carries the sub-pixel correction
            HomographyRegressor::new(
                store,
                rng,
                &format!("{prefix}.level2"),
                feature_channels,
                &cfg.levels[2],
                1,
            ),
        ];
        Ok(CascadeRegistrar {
            cfg,
            levels,
            image_channels,
            feature_channels,
        })
    }

    /// Run the full cascade.
    ///
    /// `x1`/`x2`: reconstructed images (N,C,H,W); `z2`/`z1`: feature maps
    /// (N,F,H/2,W/2). Level 1 sees the images downsampled x4; levels 2 and
    /// 3 see the (progressively warped) feature stream against `z1`.
    pub fn register(
        &self,
        g: &mut Graph,
        x1: NodeId,
        x2: NodeId,
        z2: NodeId,
        z1: NodeId,
    ) -> Result<CascadeOutput> {
        let xs = g.shape(x1).to_vec();
        if g.shape(x2) != xs.as_slice() {
            return Err(RegError::ShapeMismatch(
                "reconstructed image pair shapes differ".into(),
            ));
        }
        let zs = g.shape(z1).to_vec();
        if g.shape(z2) != zs.as_slice() {
            return Err(RegError::ShapeMismatch("feature pair shapes differ".into()));
        }
        let (n, h, w) = (xs[0], xs[2], xs[3]);
        let (fh, fw) = (zs[2], zs[3]);
        if fh * 2 != h || fw * 2 != w {
            return Err(RegError::ShapeMismatch(format!(
                "feature maps must live at half the image resolution: image {h}x{w}, features {fh}x{fw}"
            )));
        }

        // level 1: quarter-resolution images
        let a_q = g.avg_pool2d(x1, 4, 4);
        let b_q = g.avg_pool2d(x2, 4, 4);
        let h_q = self.levels[0].forward(g, a_q, b_q)?; // quarter-grid frame
        let c1_feat = rescale_node(g, h_q, 2.0); // onto the feature grid

        // level 2: warped features, downsampled x2
        let (w_a, _) = warp_node(g, z2, c1_feat, (fh, fw))?;
        let wa_ds = g.avg_pool2d(w_a, 2, 2);
        let r_ds = g.avg_pool2d(z1, 2, 2);
        let h_h = self.levels[1].forward(g, r_ds, wa_ds)?; // quarter-grid frame
        let h_h_feat = rescale_node(g, h_h, 2.0);
        let c2_feat = g.mat3_mul(h_h_feat, c1_feat);

        // level 3: full feature resolution
        let (w_b, _) = warp_node(g, z2, c2_feat, (fh, fw))?;
        let h_f = self.levels[2].forward(g, z1, w_b)?; // feature-grid frame
        let c3_feat = g.mat3_mul(h_f, c2_feat);

        // export: composed map and the final warped feature stream
        let (w2, w2_mask) = warp_node(g, z2, c3_feat, (fh, fw))?;

        // multiscale pixel-space pyramid for the alignment loss
        let (wq, mq) = warp_node(g, b_q, h_q, (h / 4, w / 4))?;
        let x1_h = g.avg_pool2d(x1, 2, 2);
        let x2_h = g.avg_pool2d(x2, 2, 2);
        let (wh, mh) = warp_node(g, x2_h, c2_feat, (h / 2, w / 2))?;
        let c3_full = rescale_node(g, c3_feat, 2.0);
        let (wf, mf) = warp_node(g, x2, c3_full, (h, w))?;
        let pyramid = vec![
            PyramidLevel {
                reference: x1,
                warped: wf,
                mask: mf,
            },
            PyramidLevel {
                reference: x1_h,
                warped: wh,
                mask: mh,
            },
            PyramidLevel {
                reference: a_q,
                warped: wq,
                mask: mq,
            },
        ];

        let extract = |g: &Graph, node: NodeId, scale: f64| -> Result<Vec<Homography>> {
            let v = g.value(node);
            (0..n)
                .map(|ni| {
                    let mut m = [[0.0; 3]; 3];
                    for r in 0..3 {
                        for c in 0..3 {
                            m[r][c] = v[[ni, r, c]];
                        }
                    }
                    Homography(m).rescale(scale)?.normalized()
                })
                .collect()
        };
        let h_full = extract(g, c3_feat, 2.0)?;
        let h_quarter = extract(g, h_q, 4.0)?;
        let h_half = extract(g, c2_feat, 2.0)?;

        Ok(CascadeOutput {
            h_full,
            h_quarter,
            h_half,
            h_feat_node: c3_feat,
            w2,
            w2_mask,
            pyramid,
        })
    }

    pub fn complexity(&self, image_dims: (usize, usize)) -> Cost {
        let (h, w) = image_dims;
        let mut total = Cost::default();
        total += self.levels[0].complexity(h / 4, w / 4);
        total += self.levels[1].complexity(h / 4, w / 4);
        total += self.levels[2].complexity(h / 2, w / 2);
        total
    }
}

/// Multiscale alignment objective over matched reference / warped pairs.
/// `alphas` weight (full, half, quarter); the MSE at each scale averages
/// over valid pixels only.
pub fn registration_loss(
    g: &mut Graph,
    pyramid: &[PyramidLevel],
    alphas: (f64, f64, f64),
) -> Result<NodeId> {
    if pyramid.len() != 3 {
        return Err(RegError::ShapeMismatch(format!(
            "expected 3 pyramid levels, got {}",
            pyramid.len()
        )));
    }
    let weights = [alphas.0, alphas.1, alphas.2];
    assert!(weights.iter().all(|a| *a >= 0.0), "alphas must be >= 0");
    let mut total: Option<NodeId> = None;
    for (level, &alpha) in pyramid.iter().zip(&weights) {
        if g.shape(level.reference) != g.shape(level.warped) {
            return Err(RegError::ShapeMismatch(
                "pyramid level shapes differ".into(),
            ));
        }
        let mse = masked_mse(g, level.reference, level.warped, &level.mask);
        let term = g.scale(mse, alpha);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Weightless feature stream used when no codec is in the loop: the image
/// is average-downsampled to half resolution and its channels tiled up to
/// `f_channels`, so the cascade keeps one input width across modes.
pub fn pixel_tap(g: &mut Graph, x: NodeId, f_channels: usize) -> NodeId {
    let pooled = g.avg_pool2d(x, 2, 2);
    let c = g.shape(pooled)[1];
    let reps = f_channels.div_ceil(c);
    let parts: Vec<NodeId> = (0..reps).map(|_| pooled).collect();
    let tiled = g.concat(1, &parts);
    g.narrow(tiled, 1, 0, f_channels)
}
