//! Toy change-detection dataset: shape scenes rendered at two times with a
//! pixel-exact change mask and a ground-truth distortion on the second
//! acquisition.

use std::fs;
use std::path::Path;

use cad_codec::RasterImage;
use cad_nn::Arr;
use cad_reg::Homography;
use ndarray::IxDyn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::distort::{apply_distortion, sample_transform, DistortionSpec};
use crate::{DataError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub num_pairs: usize,
    /// Square image side; keep it a multiple of 64 so the codec needs no
    /// padding at desk scale.
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fraction of objects that change between the two times.
    pub change_rate: f64,
    /// Objects are placed at least this fraction of the side away from the
    /// borders so distortions rarely push changes out of frame.
    pub margin_frac: f64,
    /// When set, every change is an appearance at t2 (used to train the
    /// order-sensitive baseline on a directional task).
    pub additions_only: bool,
    pub seed: u64,
    pub distortion: DistortionSpec,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            num_pairs: 32,
            image_size: 64,
            min_objects: 3,
            max_objects: 6,
            change_rate: 0.5,
            margin_frac: 0.15,
            additions_only: false,
            seed: 0,
            distortion: DistortionSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Rect { cx, cy, hw, hh } => (x - cx).abs() <= *hw && (y - cy).abs() <= *hh,
            Shape::Disc { cx, cy, r } => {
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Presence {
    Both,
    OnlyT1,
    OnlyT2,
}

/// One sample: clean pair, default distorted second image, exact change
/// mask in the t1 frame, and the ground-truth map that produced `x2`.
#[derive(Clone, Debug)]
pub struct ToyPair {
    pub x1: RasterImage,
    pub x2_clean: RasterImage,
    pub x2: RasterImage,
    /// (H, W) in {0,1}, t1 frame.
    pub change: Arr,
    pub h_gt: Homography,
    pub valid_mask: Arr,
    pub seed: u64,
}

impl ToyPair {
    /// Resample a distortion for this pair from an evaluation seed.
    pub fn distort_with(
        &self,
        spec: &DistortionSpec,
        run_seed: u64,
    ) -> Result<(RasterImage, Homography, Arr)> {
        let mut rng = cad_nn::seeded_rng(splitmix64(run_seed ^ self.seed));
        let dims = (self.x2_clean.height(), self.x2_clean.width());
        let h = sample_transform(spec, &mut rng, dims)?;
        let (data, mask) = apply_distortion(&self.x2_clean.data, &h)?;
        let img = RasterImage {
            data: quantize_u8(&data),
            max_value: 255.0,
            tile_id: self.x2_clean.tile_id.clone(),
            timestamp: self.x2_clean.timestamp,
        };
        Ok((img, h, mask))
    }
}

pub struct ToyDataset {
    pub spec: ToyDatasetSpec,
    pub pairs: Vec<ToyPair>,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn quantize_u8(a: &Arr) -> Arr {
    a.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn render_background(rng: &mut cad_nn::Rng, size: usize) -> Arr {
    // multi-octave plaid texture: registration needs photometric signal
    // across the whole frame, not just at the objects
    let mut bg = Arr::zeros(IxDyn(&[3, size, size]));
    let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.28..0.38)).collect();
    let octaves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|o| {
            let freq = 1.5 * (1 << o) as f64;
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = 0.10 / (1.0 + o as f64 * 0.7);
            (freq, angle, phase, amp)
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let mut t = 0.0;
            for &(freq, angle, phase, amp) in &octaves {
                let u = angle.cos() * x as f64 + angle.sin() * y as f64;
                let v = -angle.sin() * x as f64 + angle.cos() * y as f64;
                t += amp
                    * (std::f64::consts::TAU * freq * u / size as f64 + phase).sin()
                    * (std::f64::consts::TAU * freq * 0.7 * v / size as f64).cos();
            }
            for c in 0..3 {
                bg[[c, y, x]] = (base[c] + t).clamp(0.05, 0.55);
            }
        }
    }
    bg
}

fn sample_shape(rng: &mut cad_nn::Rng, size: usize, margin: f64) -> Shape {
    let s = size as f64;
    let lo = margin * s;
    let hi = (1.0 - margin) * s;
    let cx = rng.random_range(lo..hi);
    let cy = rng.random_range(lo..hi);
    let ext = rng.random_range(0.04 * s..0.10 * s);
    if rng.random_range(0.0..1.0) < 0.5 {
        let aspect = rng.random_range(0.6..1.6);
        Shape::Rect {
            cx,
            cy,
            hw: ext,
            hh: ext * aspect,
        }
    } else {
        Shape::Disc { cx, cy, r: ext }
    }
}

fn render_scene(bg: &Arr, objects: &[(Shape, [f64; 3])]) -> Arr {
    let mut img = bg.clone();
    let (h, w) = (bg.shape()[1], bg.shape()[2]);
    for (shape, color) in objects {
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x as f64, y as f64) {
                    for c in 0..3 {
                        img[[c, y, x]] = color[c];
                    }
                }
            }
        }
    }
    img
}

/// Render only the first-time scene of a virtual pair; used to stream
/// unlimited alignment-training data from the same distribution.
pub fn render_reference(spec: &ToyDatasetSpec, index: usize) -> Result<RasterImage> {
    let pair_seed = splitmix64(spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9));
    let mut rng = cad_nn::seeded_rng(pair_seed);
    let size = spec.image_size;
    let bg = render_background(&mut rng, size);
    let n_objects = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut objects = Vec::new();
    for _ in 0..n_objects {
        let shape = sample_shape(&mut rng, size, spec.margin_frac);
        let color = [
            rng.random_range(0.6..0.95),
            rng.random_range(0.6..0.95),
            rng.random_range(0.6..0.95),
        ];
        objects.push((shape, color));
    }
    let img = quantize_u8(&render_scene(&bg, &objects));
    Ok(RasterImage::new(img, format!("stream-{index}"), 1_000))
}

/// Render one pair from its seed.
fn generate_pair(spec: &ToyDatasetSpec, index: usize) -> Result<ToyPair> {
    let pair_seed = splitmix64(spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9));
    let mut rng = cad_nn::seeded_rng(pair_seed);
    let size = spec.image_size;
    let bg = render_background(&mut rng, size);
    let n_objects = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut objects = Vec::new();
    for _ in 0..n_objects {
        let shape = sample_shape(&mut rng, size, spec.margin_frac);
        let color = [
            rng.random_range(0.6..0.95),
            rng.random_range(0.6..0.95),
            rng.random_range(0.6..0.95),
        ];
        let changed = rng.random_range(0.0..1.0) < spec.change_rate;
        let presence = if !changed {
            Presence::Both
        } else if spec.additions_only || rng.random_range(0.0..1.0) < 0.5 {
            Presence::OnlyT2
        } else {
            Presence::OnlyT1
        };
        objects.push((shape, color, presence));
    }
    let t1_objs: Vec<(Shape, [f64; 3])> = objects
        .iter()
        .filter(|(_, _, p)| *p != Presence::OnlyT2)
        .map(|(s, c, _)| (*s, *c))
        .collect();
    let t2_objs: Vec<(Shape, [f64; 3])> = objects
        .iter()
        .filter(|(_, _, p)| *p != Presence::OnlyT1)
        .map(|(s, c, _)| (*s, *c))
        .collect();
    let x1 = quantize_u8(&render_scene(&bg, &t1_objs));
    let x2_clean = quantize_u8(&render_scene(&bg, &t2_objs));

    // pixel-exact change mask from the quantized renders
    let mut change = Arr::zeros(IxDyn(&[size, size]));
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                if x1[[c, y, x]] != x2_clean[[c, y, x]] {
                    change[[y, x]] = 1.0;
                    break;
                }
            }
        }
    }

    let h_gt = sample_transform(&spec.distortion, &mut rng, (size, size))?;
    let (x2_data, valid_mask) = apply_distortion(&x2_clean, &h_gt)?;
    let tile = format!("toy-{index:04}");
    Ok(ToyPair {
        x1: RasterImage::new(x1, tile.clone(), 1_000),
        x2_clean: RasterImage::new(x2_clean, tile.clone(), 2_000),
        x2: RasterImage::new(quantize_u8(&x2_data), tile, 2_000),
        change,
        h_gt,
        valid_mask,
        seed: pair_seed,
    })
}

impl ToyDataset {
    pub fn generate(spec: &ToyDatasetSpec) -> Result<ToyDataset> {
        if spec.image_size == 0 || spec.num_pairs == 0 {
            return Err(DataError::InvalidSpec("empty dataset spec".into()));
        }
        if spec.min_objects > spec.max_objects {
            return Err(DataError::InvalidSpec(
                "min_objects must be <= max_objects".into(),
            ));
        }
        let pairs = (0..spec.num_pairs)
            .map(|i| generate_pair(spec, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyDataset {
            spec: spec.clone(),
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Store as a directory of PNG pairs plus a JSON manifest carrying the
    /// ground-truth homographies (9 f64, row-major) and seeds.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, pair) in self.pairs.iter().enumerate() {
            let stem = format!("pair_{i:04}");
            write_png_rgb(&dir.join(format!("{stem}_x1.png")), &pair.x1.data)?;
            write_png_rgb(&dir.join(format!("{stem}_x2.png")), &pair.x2.data)?;
            write_png_rgb(
                &dir.join(format!("{stem}_x2_clean.png")),
                &pair.x2_clean.data,
            )?;
            write_png_gray(&dir.join(format!("{stem}_change.png")), &pair.change)?;
            entries.push(serde_json::json!({
                "stem": stem,
                "seed": pair.seed,
                "h_gt": pair.h_gt.to_flat().to_vec(),
            }));
        }
        let manifest = serde_json::json!({
            "format": "cad-toy-dataset/1",
            "spec": self.spec,
            "pairs": entries,
        });
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ToyDataset> {
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest["format"] != "cad-toy-dataset/1" {
            return Err(DataError::Format("unknown manifest format".into()));
        }
        let spec: ToyDatasetSpec = serde_json::from_value(manifest["spec"].clone())?;
        let entries = manifest["pairs"]
            .as_array()
            .ok_or_else(|| DataError::Format("manifest pairs missing".into()))?;
        let mut pairs = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            let stem = e["stem"]
                .as_str()
                .ok_or_else(|| DataError::Format("pair stem missing".into()))?;
            let seed = e["seed"]
                .as_u64()
                .ok_or_else(|| DataError::Format("pair seed missing".into()))?;
            let flat: Vec<f64> = serde_json::from_value(e["h_gt"].clone())?;
            if flat.len() != 9 {
                return Err(DataError::Format("h_gt must have 9 entries".into()));
            }
            let mut arr9 = [0.0; 9];
            arr9.copy_from_slice(&flat);
            let x1 = read_png_rgb(&dir.join(format!("{stem}_x1.png")))?;
            let x2 = read_png_rgb(&dir.join(format!("{stem}_x2.png")))?;
            let x2_clean = read_png_rgb(&dir.join(format!("{stem}_x2_clean.png")))?;
            let change = read_png_gray(&dir.join(format!("{stem}_change.png")))?;
            let h_gt = Homography::from_flat(&arr9);
            let (_, valid_mask) = apply_distortion(&x2_clean, &h_gt)
                .map_err(|e| DataError::Format(format!("stored h_gt unusable: {e}")))?;
            let tile = format!("toy-{i:04}");
            pairs.push(ToyPair {
                x1: RasterImage::new(x1, tile.clone(), 1_000),
                x2_clean: RasterImage::new(x2_clean, tile.clone(), 2_000),
                x2: RasterImage::new(x2, tile, 2_000),
                change,
                h_gt,
                valid_mask,
                seed,
            });
        }
        Ok(ToyDataset { spec, pairs })
    }

    /// Deterministic index split: train / val / test.
    pub fn split(&self, train: usize, val: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let n = self.pairs.len();
        let train_idx: Vec<usize> = (0..train.min(n)).collect();
        let val_idx: Vec<usize> = (train.min(n)..(train + val).min(n)).collect();
        let test_idx: Vec<usize> = ((train + val).min(n)..n).collect();
        (train_idx, val_idx, test_idx)
    }
}

fn write_png_rgb(path: &Path, data: &Arr) -> Result<()> {
    let (h, w) = (data.shape()[1], data.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (data[[0, y, x]] * 255.0).round() as u8,
                (data[[1, y, x]] * 255.0).round() as u8,
                (data[[2, y, x]] * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)
        .map_err(|e| DataError::Format(format!("png write failed: {e}")))
}

fn read_png_rgb(path: &Path) -> Result<Arr> {
    let img = image::open(path)
        .map_err(|e| DataError::Format(format!("png read failed: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Arr::zeros(IxDyn(&[3, h, w]));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

fn write_png_gray(path: &Path, data: &Arr) -> Result<()> {
    let (h, w) = (data.shape()[0], data.shape()[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if data[[y, x]] >= 0.5 { 255u8 } else { 0u8 };
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)
        .map_err(|e| DataError::Format(format!("png write failed: {e}")))
}

fn read_png_gray(path: &Path) -> Result<Arr> {
    let img = image::open(path)
        .map_err(|e| DataError::Format(format!("png read failed: {e}")))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Arr::zeros(IxDyn(&[h, w]));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = if img.get_pixel(x as u32, y as u32)[0] >= 128 {
                1.0
            } else {
                0.0
            };
        }
    }
    Ok(out)
}
