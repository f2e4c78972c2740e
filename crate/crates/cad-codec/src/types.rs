//! Domain tensors moved between the pipeline stages.

use cad_nn::Arr;
use ndarray::IxDyn;

use crate::{CodecError, Result};

/// A single acquisition: (C,H,W) values normalized to [0,1].
#[derive(Clone, Debug)]
pub struct RasterImage {
    pub data: Arr,
    /// Maximum value of the source integer representation (255 for 8-bit).
    pub max_value: f64,
    pub tile_id: String,
    pub timestamp: i64,
}

impl RasterImage {
    pub fn new(data: Arr, tile_id: impl Into<String>, timestamp: i64) -> Self {
        RasterImage {
            data,
            max_value: 255.0,
            tile_id: tile_id.into(),
            timestamp,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.ndim() != 3 {
            return Err(CodecError::DimensionMismatch(format!(
                "expected (C,H,W), got {:?}",
                self.data.shape()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(CodecError::DimensionMismatch(
                "image values must be finite and within [0,1]".into(),
            ));
        }
        Ok(())
    }

    /// Reflect-pad height/width up to multiples of `m`. Returns the padded
    /// image together with the original dims so decode can crop back.
    pub fn pad_to_multiple(&self, m: usize) -> Result<(RasterImage, (usize, usize))> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let ph = h.div_ceil(m) * m;
        let pw = w.div_ceil(m) * m;
        if ph == h && pw == w {
            return Ok((self.clone(), (h, w)));
        }
        if ph - h >= h || pw - w >= w {
            return Err(CodecError::DimensionMismatch(format!(
                "image {h}x{w} too small to reflect-pad to multiples of {m}"
            )));
        }
        let mut out = Arr::zeros(IxDyn(&[c, ph, pw]));
        for ci in 0..c {
            for y in 0..ph {
                let sy = reflect_index(y, h);
                for x in 0..pw {
                    let sx = reflect_index(x, w);
                    out[[ci, y, x]] = self.data[[ci, sy, sx]];
                }
            }
        }
        Ok((
            RasterImage {
                data: out,
                max_value: self.max_value,
                tile_id: self.tile_id.clone(),
                timestamp: self.timestamp,
            },
            (h, w),
        ))
    }

    pub fn crop(&self, h: usize, w: usize) -> RasterImage {
        let data = self
            .data
            .slice(ndarray::s![.., 0..h, 0..w])
            .to_owned()
            .into_dyn();
        RasterImage {
            data,
            max_value: self.max_value,
            tile_id: self.tile_id.clone(),
            timestamp: self.timestamp,
        }
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        // mirror without repeating the border sample
        n - 2 - (i - n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizeMode {
    Train,
    Eval,
}

/// Main + hyper latent produced by the analysis transforms.
#[derive(Clone, Debug)]
pub struct LatentPair {
    pub y: Arr, // (M, H/16, W/16)
    pub z: Arr, // (N, H/64, W/64)
    pub quantized: bool,
}

impl LatentPair {
    pub fn assert_integer(&self) -> Result<()> {
        if !self.quantized {
            return Err(CodecError::DimensionMismatch(
                "latent pair is not quantized".into(),
            ));
        }
        for v in self.y.iter().chain(self.z.iter()) {
            if !v.is_finite() || v.fract() != 0.0 {
                return Err(CodecError::SymbolOutOfRange(format!(
                    "non-integer value {v} in quantized latent"
                )));
            }
        }
        Ok(())
    }
}

/// Decoder activations exported at half resolution for registration and
/// change detection.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Arr, // (F, H/2, W/2)
    pub source_tile: String,
    pub source_time: i64,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Entropy-coded representation of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub version: u8,
    pub model_id: u16,
    pub lambda_index: u8,
    pub orig_h: u16,
    pub orig_w: u16,
    pub padded_h: u16,
    pub padded_w: u16,
    pub z_payload: Vec<u8>,
    pub y_payload: Vec<u8>,
}

impl Bitstream {
    pub fn total_bytes(&self) -> usize {
        crate::bitstream::HEADER_LEN + self.z_payload.len() + self.y_payload.len()
    }

    pub fn total_bits(&self) -> u64 {
        8 * self.total_bytes() as u64
    }

    /// Bits per pixel over the original image dims, header included.
    pub fn bpp(&self) -> f64 {
        self.total_bits() as f64 / (self.orig_h as f64 * self.orig_w as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_padding_records_and_restores_dims() {
        let mut data = Arr::zeros(IxDyn(&[1, 70, 50]));
        for y in 0..70 {
            for x in 0..50 {
                data[[0, y, x]] = (y * 50 + x) as f64 / 3500.0;
            }
        }
        let img = RasterImage::new(data, "t", 0);
        let (padded, (h, w)) = img.pad_to_multiple(64).unwrap();
        assert_eq!((h, w), (70, 50));
        assert_eq!(padded.height(), 128);
        assert_eq!(padded.width(), 64);
        // interior untouched
        assert_eq!(padded.data[[0, 69, 49]], img.data[[0, 69, 49]]);
        // reflection does not repeat the border row
        assert_eq!(padded.data[[0, 70, 0]], img.data[[0, 68, 0]]);
        let cropped = padded.crop(h, w);
        assert_eq!(cropped.data, img.data);
    }

    #[test]
    fn too_small_images_refuse_padding() {
        let img = RasterImage::new(Arr::zeros(IxDyn(&[1, 20, 20])), "t", 0);
        assert!(img.pad_to_multiple(64).is_err());
    }
}
