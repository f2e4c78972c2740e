//! Random projective distortions with ground truth.

use cad_nn::Arr;
use cad_reg::{warp_array, Homography};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::{DataError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistortionSpec {
    /// Translation bound as a fraction of width/height.
    pub max_translation_frac: f64,
    pub max_rotation_deg: f64,
    /// Anisotropic scale bound: axes scale within [1-d, 1+d].
    pub max_scale_delta: f64,
    pub max_shear_deg: f64,
    /// Perspective coefficient bound per pixel.
    pub max_perspective: f64,
    pub seed: u64,
}

impl Default for DistortionSpec {
    fn default() -> Self {
        DistortionSpec {
            max_translation_frac: 0.10,
            max_rotation_deg: 10.0,
            max_scale_delta: 0.10,
            max_shear_deg: 5.0,
            max_perspective: 5e-4,
            seed: 0,
        }
    }
}

impl DistortionSpec {
    pub fn none() -> Self {
        DistortionSpec {
            max_translation_frac: 0.0,
            max_rotation_deg: 0.0,
            max_scale_delta: 0.0,
            max_shear_deg: 0.0,
            max_perspective: 0.0,
            seed: 0,
        }
    }

    /// Milder severities used by the desk-scale training presets.
    pub fn toy() -> Self {
        DistortionSpec {
            max_translation_frac: 0.06,
            max_rotation_deg: 5.0,
            max_scale_delta: 0.05,
            max_shear_deg: 2.0,
            max_perspective: 2e-4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.max_translation_frac,
            self.max_rotation_deg,
            self.max_scale_delta,
            self.max_shear_deg,
            self.max_perspective,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DataError::InvalidSpec(
                "distortion bounds must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Conservative analytic bound on how far any image corner can move
    /// under a transform sampled within these bounds.
    pub fn corner_displacement_bound(&self, dims: (usize, usize)) -> f64 {
        let (h, w) = (dims.0 as f64, dims.1 as f64);
        let r = (((w - 1.0) / 2.0).powi(2) + ((h - 1.0) / 2.0).powi(2)).sqrt();
        let theta = self.max_rotation_deg.to_radians();
        let shear = self.max_shear_deg.to_radians();
        let affine =
            (1.0 + 2.0 * (theta / 2.0).sin()) * (1.0 + self.max_scale_delta) * (1.0 + shear.tan())
                - 1.0;
        let q = (1.0 + affine) * r;
        let d = self.max_perspective * std::f64::consts::SQRT_2 * q;
        assert!(d < 1.0, "perspective bound too large for this image size");
        let persp = q * d / (1.0 - d);
        let t = ((self.max_translation_frac * w).powi(2)
            + (self.max_translation_frac * h).powi(2))
        .sqrt();
        r * affine + persp + t
    }
}

/// Sample an invertible transform within the spec bounds, composed about
/// the image center: translation o perspective o shear o scale o rotation.
pub fn sample_transform(
    spec: &DistortionSpec,
    rng: &mut cad_nn::Rng,
    dims: (usize, usize),
) -> Result<Homography> {
    spec.validate()?;
    let (h, w) = (dims.0 as f64, dims.1 as f64);
    let cx = (w - 1.0) / 2.0;
    let cy = (h - 1.0) / 2.0;
    let sym = |rng: &mut cad_nn::Rng, b: f64| {
        if b == 0.0 {
            0.0
        } else {
            rng.random_range(-b..=b)
        }
    };
    for _attempt in 0..16 {
        let theta = sym(rng, spec.max_rotation_deg).to_radians();
        let sx = 1.0 + sym(rng, spec.max_scale_delta);
        let sy = 1.0 + sym(rng, spec.max_scale_delta);
        let shear = sym(rng, spec.max_shear_deg).to_radians().tan();
        let px = sym(rng, spec.max_perspective);
        let py = sym(rng, spec.max_perspective);
        let tx = sym(rng, spec.max_translation_frac * w);
        let ty = sym(rng, spec.max_translation_frac * h);

        let rot = Homography([
            [theta.cos(), -theta.sin(), 0.0],
            [theta.sin(), theta.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ]);
        let scale = Homography([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]]);
        let sh = Homography([[1.0, shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let persp = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]]);
        let center = Homography::translation(cx, cy);
        let uncenter = Homography::translation(-cx, -cy);
        let outer = Homography::translation(tx, ty);

        let core = persp
            .compose(&sh)
            .and_then(|m| m.compose(&scale))
            .and_then(|m| m.compose(&rot));
        let full = core
            .and_then(|m| center.compose(&m))
            .and_then(|m| m.compose(&uncenter))
            .and_then(|m| outer.compose(&m));
        match full {
            Ok(hm) if hm.det().abs() >= 1e-6 => return Ok(hm),
            _ => continue,
        }
    }
    Err(DataError::InvalidSpec(
        "could not sample an invertible transform in 16 attempts".into(),
    ))
}

/// Warp an image by the ground-truth map; zero fill outside, validity mask
/// returned alongside.
pub fn apply_distortion(image: &Arr, h: &Homography) -> Result<(Arr, Arr)> {
    let dims = (image.shape()[1], image.shape()[2]);
    let (out, mask) = warp_array(image, h, dims)?;
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cad_nn::seeded_rng;

    #[test]
    fn zero_bounds_give_identity() {
        let spec = DistortionSpec::none();
        let mut rng = seeded_rng(1);
        let h = sample_transform(&spec, &mut rng, (64, 64)).unwrap();
        assert_eq!(h, Homography::identity());
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = DistortionSpec::default();
        let mut a = seeded_rng(7);
        let mut b = seeded_rng(7);
        let ha = sample_transform(&spec, &mut a, (64, 64)).unwrap();
        let hb = sample_transform(&spec, &mut b, (64, 64)).unwrap();
        assert_eq!(ha, hb);
    }

    #[test]
    fn corner_displacements_stay_within_bound() {
        let spec = DistortionSpec::default();
        let dims = (64usize, 64usize);
        let bound = spec.corner_displacement_bound(dims);
        let mut rng = seeded_rng(3);
        let corners = [(0.0, 0.0), (63.0, 0.0), (0.0, 63.0), (63.0, 63.0)];
        for _ in 0..10_000 {
            let h = sample_transform(&spec, &mut rng, dims).unwrap();
            for &(x, y) in &corners {
                let (mx, my) = h.apply(x, y);
                let d = ((mx - x).powi(2) + (my - y).powi(2)).sqrt();
                assert!(d <= bound, "displacement {d} exceeds bound {bound}");
            }
        }
    }

    #[test]
    fn apply_then_inverse_recovers_valid_region() {
        let mut rng = seeded_rng(4);
        let spec = DistortionSpec::default();
        let mut img = Arr::zeros(ndarray::IxDyn(&[1, 64, 64]));
        for y in 0..64 {
            for x in 0..64 {
                img[[0, y, x]] = 0.5
                    + 0.4 * ((x as f64 / 17.0).sin() * (y as f64 / 13.0).cos());
            }
        }
        let h = sample_transform(&spec, &mut rng, (64, 64)).unwrap();
        let (distorted, _m1) = apply_distortion(&img, &h).unwrap();
        let hinv = h.inverse().unwrap();
        let (restored, m2) = apply_distortion(&distorted, &hinv).unwrap();
        // doubly-valid region: came back in bounds both ways
        let mut checked = 0;
        for y in 4..60 {
            for x in 4..60 {
                if m2[[0, y, x]] == 1.0 {
                    let (fx, fy) = h.apply(x as f64, y as f64);
                    if fx >= 1.0 && fx <= 62.0 && fy >= 1.0 && fy <= 62.0 {
                        assert!(
                            (restored[[0, y, x]] - img[[0, y, x]]).abs() <= 2e-2,
                            "at ({x},{y})"
                        );
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn mask_fraction_shrinks_as_translation_grows() {
        let img = Arr::ones(ndarray::IxDyn(&[1, 64, 64]));
        let mut fractions = Vec::new();
        for frac in [0.0, 0.1, 0.25] {
            let spec = DistortionSpec {
                max_translation_frac: frac,
                max_rotation_deg: 0.0,
                max_scale_delta: 0.0,
                max_shear_deg: 0.0,
                max_perspective: 0.0,
                seed: 0,
            };
            let mut total = 0.0;
            let mut rng = seeded_rng(9);
            for _ in 0..64 {
                let h = sample_transform(&spec, &mut rng, (64, 64)).unwrap();
                let (_, mask) = apply_distortion(&img, &h).unwrap();
                total += mask.mean().unwrap();
            }
            fractions.push(total / 64.0);
        }
        assert!(fractions[0] > fractions[1]);
        assert!(fractions[1] > fractions[2]);
    }
}
