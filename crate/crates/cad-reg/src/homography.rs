//! 3x3 projective transforms over pixel coordinates.
//!
//! A homography here is always a forward map: it sends coordinates of the
//! image being warped to coordinates of the target frame. Warping samples
//! through the inverse, so `warp(t, H)` places the content of `t` where `H`
//! says it belongs.

use cad_nn::sample::{det3, invert3, matmul3};

use crate::{RegError, Result};

pub const MIN_DET: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn identity() -> Self {
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    /// Row-major flat form, h22 last.
    pub fn from_flat(v: &[f64; 9]) -> Self {
        Homography([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_flat(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    /// Scale so the bottom-right entry is exactly 1.
    pub fn normalized(&self) -> Result<Self> {
        let h22 = self.0[2][2];
        if h22.abs() < 1e-12 {
            return Err(RegError::SingularHomography(
                "bottom-right entry is zero".into(),
            ));
        }
        let mut out = self.0;
        for row in &mut out {
            for v in row.iter_mut() {
                *v /= h22;
            }
        }
        Ok(Homography(out))
    }

    pub fn det(&self) -> f64 {
        det3(&self.0)
    }

    pub fn inverse(&self) -> Result<Self> {
        if self.det().abs() < MIN_DET {
            return Err(RegError::SingularHomography(format!(
                "determinant {} below {MIN_DET}",
                self.det()
            )));
        }
        let inv = invert3(&self.0).ok_or_else(|| {
            RegError::SingularHomography("matrix is numerically singular".into())
        })?;
        Homography(inv).normalized()
    }

    /// compose(outer, inner): apply `inner` first, then `outer`.
    /// warp(t, compose(a, b)) == warp(warp(t, b), a).
    pub fn compose(&self, inner: &Homography) -> Result<Homography> {
        let prod = Homography(matmul3(&self.0, &inner.0));
        if prod.det().abs() < MIN_DET {
            return Err(RegError::SingularHomography(
                "composition is singular".into(),
            ));
        }
        prod.normalized()
    }

    /// Transfer to a grid whose pixel coordinates are scaled by `s`:
    /// S * H * S^-1 with S = diag(s, s, 1).
    pub fn rescale(&self, s: f64) -> Result<Homography> {
        assert!(s > 0.0, "rescale factor must be positive");
        let m = &self.0;
        let out = [
            [m[0][0], m[0][1], m[0][2] * s],
            [m[1][0], m[1][1], m[1][2] * s],
            [m[2][0] / s, m[2][1] / s, m[2][2]],
        ];
        Homography(out).normalized()
    }

    /// Project a pixel coordinate through the map.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let d = m[2][0] * x + m[2][1] * y + m[2][2];
        (
            (m[0][0] * x + m[0][1] * y + m[0][2]) / d,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / d,
        )
    }

    /// Mean Euclidean transfer error over the four image corners.
    pub fn corner_error(&self, other: &Homography, dims: (usize, usize)) -> f64 {
        let (h, w) = dims;
        let corners = [
            (0.0, 0.0),
            (w as f64 - 1.0, 0.0),
            (0.0, h as f64 - 1.0),
            (w as f64 - 1.0, h as f64 - 1.0),
        ];
        corners
            .iter()
            .map(|&(x, y)| {
                let a = self.apply(x, y);
                let b = other.apply(x, y);
                ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
            })
            .sum::<f64>()
            / 4.0
    }

    /// Checkpoint/debug representation: 9 little-endian f64, row-major.
    pub fn to_le_bytes(&self) -> [u8; 72] {
        let mut out = [0u8; 72];
        for (i, v) in self.to_flat().iter().enumerate() {
            out[8 * i..8 * i + 8].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8; 72]) -> Self {
        let mut flat = [0.0f64; 9];
        for (i, v) in flat.iter_mut().enumerate() {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[8 * i..8 * i + 8]);
            *v = f64::from_le_bytes(b);
        }
        Homography::from_flat(&flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_translation_algebra() {
        let id = Homography::identity();
        let t1 = Homography::translation(1.0, 0.0);
        let t2 = Homography::translation(2.0, 0.0);
        assert_eq!(t1.compose(&id).unwrap(), t1);
        let t3 = t1.compose(&t2).unwrap();
        assert_eq!(t3, Homography::translation(3.0, 0.0));
    }

    #[test]
    fn inverse_composes_to_identity() {
        let h = Homography([[1.1, 0.1, 3.0], [-0.2, 0.9, -1.0], [1e-4, -2e-4, 1.0]]);
        let hinv = h.inverse().unwrap();
        let prod = h.compose(&hinv).unwrap();
        let id = Homography::identity();
        for r in 0..3 {
            for c in 0..3 {
                assert!((prod.0[r][c] - id.0[r][c]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn rescale_conjugates_translations() {
        let t = Homography::translation(3.0, -2.0);
        let s = t.rescale(2.0).unwrap();
        assert_eq!(s, Homography::translation(6.0, -4.0));
        let id = Homography::identity();
        assert_eq!(id.rescale(7.5).unwrap(), id);
    }

    #[test]
    fn byte_roundtrip() {
        let h = Homography([[1.1, 0.1, 3.0], [-0.2, 0.9, -1.0], [1e-4, -2e-4, 1.0]]);
        assert_eq!(Homography::from_le_bytes(&h.to_le_bytes()), h);
    }
}
