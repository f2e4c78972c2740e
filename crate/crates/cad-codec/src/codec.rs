//! The codec facade: spec-level operations over the hyperprior network,
//! the entropy models and the range coder.

use cad_nn::{Arr, Graph, NodeId, ParamStore, Rng};
use ndarray::{Dimension, IxDyn};
use rand::Rng as _;

use crate::bitstream;
use crate::entropy::{
    gaussian_bits, gaussian_bits_node, logistic_bits, logistic_bits_node, scale_bin_index,
    FrozenTables, SymbolTable,
};
use crate::net::{HyperpriorNet, Y_FACTOR, Z_FACTOR};
use crate::rangecoder::{RangeDecoder, RangeEncoder};
use crate::types::{Bitstream, FeatureMap, LatentPair, QuantizeMode, RasterImage};
use crate::{CodecError, Result};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CodecConfig {
    pub channels: usize,
    pub width: usize,
    pub main_channels: usize,
    pub hyper_channels: usize,
    pub tap_channels: usize,
    /// Rate weight this model was / will be trained for.
    pub lambda: f64,
    pub lambda_index: u8,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            channels: 3,
            width: 128,
            main_channels: 150,
            hyper_channels: 225,
            tap_channels: 32,
            lambda: 0.05,
            lambda_index: 0,
        }
    }
}

impl CodecConfig {
    /// Desk-scale configuration used by the toy presets and most tests.
    pub fn toy(lambda: f64, lambda_index: u8) -> Self {
        CodecConfig {
            channels: 3,
            width: 24,
            main_channels: 24,
            hyper_channels: 24,
            tap_channels: 12,
            lambda,
            lambda_index,
        }
    }
}

/// Everything the training stages need from one differentiable pass.
pub struct TrainForward {
    pub recon: NodeId,
    pub tap: NodeId,
    /// Total bits for the whole batch (scalar node).
    pub bits: NodeId,
    pub y_noisy: NodeId,
    pub z_noisy: NodeId,
}

pub struct Codec {
    pub cfg: CodecConfig,
    pub net: HyperpriorNet,
}

impl Codec {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, cfg: CodecConfig) -> Self {
        let net = HyperpriorNet::new(
            store,
            rng,
            prefix,
            cfg.channels,
            cfg.width,
            cfg.main_channels,
            cfg.hyper_channels,
            cfg.tap_channels,
        );
        Codec { cfg, net }
    }

    fn check_dims(&self, img: &RasterImage) -> Result<()> {
        img.validate()?;
        if img.channels() != self.cfg.channels {
            return Err(CodecError::DimensionMismatch(format!(
                "expected {} channels, got {}",
                self.cfg.channels,
                img.channels()
            )));
        }
        if img.height() % Z_FACTOR != 0 || img.width() % Z_FACTOR != 0 {
            return Err(CodecError::DimensionMismatch(format!(
                "H and W must be multiples of {Z_FACTOR}, got {}x{}; apply pad_to_multiple first",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    /// Analysis + hyper-analysis: image -> continuous (y, z).
    pub fn encode(&self, store: &ParamStore, img: &RasterImage) -> Result<LatentPair> {
        self.check_dims(img)?;
        let mut g = Graph::eval(store);
        let batched = img
            .data
            .clone()
            .into_shape_with_order(IxDyn(&[
                1,
                img.channels(),
                img.height(),
                img.width(),
            ]))
            .unwrap();
        let x = g.constant(batched);
        let y = self.net.analysis(&mut g, x);
        let z = self.net.hyper_analysis(&mut g, y);
        let strip = |a: &Arr| {
            let s = a.shape().to_vec();
            a.clone()
                .into_shape_with_order(IxDyn(&s[1..]))
                .unwrap()
        };
        Ok(LatentPair {
            y: strip(g.value(y)),
            z: strip(g.value(z)),
            quantized: false,
        })
    }

    /// Round in eval mode (ties away from zero); add U(-1/2,1/2) noise in
    /// train mode as the differentiable quantization proxy.
    pub fn quantize(&self, latent: &LatentPair, mode: QuantizeMode, rng: &mut Rng) -> LatentPair {
        match mode {
            QuantizeMode::Eval => LatentPair {
                y: latent.y.mapv(f64::round),
                z: latent.z.mapv(f64::round),
                quantized: true,
            },
            QuantizeMode::Train => {
                let mut noisy = |a: &Arr| a.mapv(|v| v + rng.random_range(-0.5..0.5));
                LatentPair {
                    y: noisy(&latent.y),
                    z: noisy(&latent.z),
                    quantized: false,
                }
            }
        }
    }

    /// Model rate of a (quantized or noise-perturbed) latent pair, in bits.
    /// Gaussian scales come from the hyper decoder on the given z.
    pub fn estimate_rate(&self, store: &ParamStore, latent: &LatentPair) -> Result<f64> {
        if store.id_of(&format!("{}.entropy.z_loc", self.prefix_of(store)?)).is_none() {
            return Err(CodecError::ModelNotInitialized(
                "entropy parameters missing from store".into(),
            ));
        }
        let mut g = Graph::eval(store);
        let z_b = self.batched(&latent.z);
        let zi = g.constant(z_b);
        let sigma = self.net.hyper_synthesis(&mut g, zi);
        let sigma_v = g.value(sigma).clone();
        let sigma_flat = sigma_v
            .into_shape_with_order(IxDyn(&latent.y.shape().to_vec()))
            .map_err(|_| {
                CodecError::DimensionMismatch("hyper-decoded scales do not match y".into())
            })?;
        let (loc, scale) = self.net.z_prior_values(store);
        let y_bits = gaussian_bits(&latent.y, &sigma_flat);
        let z_bits = logistic_bits(&latent.z, &loc, &scale);
        Ok(y_bits + z_bits)
    }

    fn prefix_of(&self, store: &ParamStore) -> Result<String> {
        let name = store.name(self.net.z_loc).to_string();
        Ok(name
            .strip_suffix(".entropy.z_loc")
            .unwrap_or(&name)
            .to_string())
    }

    fn batched(&self, a: &Arr) -> Arr {
        let mut s = vec![1usize];
        s.extend_from_slice(a.shape());
        a.clone().into_shape_with_order(IxDyn(&s)).unwrap()
    }

    /// Synthesis: quantized (or noisy) latent -> reconstruction + tap.
    pub fn decode(
        &self,
        store: &ParamStore,
        latent: &LatentPair,
        tile_id: &str,
        timestamp: i64,
    ) -> Result<(RasterImage, FeatureMap)> {
        let mut g = Graph::eval(store);
        let yi = g.constant(self.batched(&latent.y));
        let (recon, tap) = self.net.synthesis(&mut g, yi);
        let strip = |a: &Arr| {
            let s = a.shape().to_vec();
            a.clone().into_shape_with_order(IxDyn(&s[1..])).unwrap()
        };
        let img = RasterImage {
            data: strip(g.value(recon)),
            max_value: 255.0,
            tile_id: tile_id.to_string(),
            timestamp,
        };
        let fmap = FeatureMap {
            data: strip(g.value(tap)),
            source_tile: tile_id.to_string(),
            source_time: timestamp,
        };
        Ok((img, fmap))
    }

    /// Identity of the loaded weights, folded to 16 bits for the header.
    pub fn model_id(&self, store: &ParamStore) -> u16 {
        let mut h = crc32fast::Hasher::new();
        for (_, p) in store.iter() {
            if !p.name.contains(".entropy.") && !is_codec_param(&p.name) {
                continue;
            }
            h.update(p.name.as_bytes());
            for v in p.value.iter() {
                h.update(&v.to_le_bytes());
            }
        }
        let crc = h.finalize();
        ((crc >> 16) ^ (crc & 0xffff)) as u16
    }

    /// Quantize the learned entropy models into coder tables.
    pub fn freeze_entropy(&self, store: &ParamStore) -> FrozenTables {
        let (loc, scale) = self.net.z_prior_values(store);
        FrozenTables::build(self.model_id(store), self.cfg.lambda_index, &loc, &scale)
    }

    /// Entropy-code an integer latent pair into a bitstream.
    pub fn entropy_encode(
        &self,
        store: &ParamStore,
        tables: &FrozenTables,
        latent: &LatentPair,
        orig_dims: (usize, usize),
        padded_dims: (usize, usize),
    ) -> Result<Bitstream> {
        latent.assert_integer()?;
        if tables.model_id != self.model_id(store) {
            return Err(CodecError::ModelNotInitialized(
                "frozen tables do not match the loaded weights; re-freeze".into(),
            ));
        }
        let zs = latent.z.shape().to_vec();
        // z: per-channel tables
        let z_payload = code_tensor(&latent.z, |idx| &tables.z_tables[idx[0]])?;
        // y: per-element scale bins from the hyper decoder on quantized z
        let mut g = Graph::eval(store);
        let zi = g.constant(self.batched(&latent.z));
        let sigma = self.net.hyper_synthesis(&mut g, zi);
        let sigma = g
            .value(sigma)
            .clone()
            .into_shape_with_order(IxDyn(&latent.y.shape().to_vec()))
            .unwrap();
        let y_payload = code_tensor(&latent.y, |idx| {
            let s = sigma[idx];
            &tables.y_tables[scale_bin_index(&tables.scale_table, s)]
        })?;
        let _ = zs;
        Ok(Bitstream {
            version: bitstream::VERSION,
            model_id: tables.model_id,
            lambda_index: tables.lambda_index,
            orig_h: orig_dims.0 as u16,
            orig_w: orig_dims.1 as u16,
            padded_h: padded_dims.0 as u16,
            padded_w: padded_dims.1 as u16,
            z_payload,
            y_payload,
        })
    }

    /// Bit-exact inverse of [`Self::entropy_encode`].
    pub fn entropy_decode(
        &self,
        store: &ParamStore,
        tables: &FrozenTables,
        bs: &Bitstream,
    ) -> Result<LatentPair> {
        let loaded = self.model_id(store);
        if bs.model_id != loaded {
            return Err(CodecError::ModelMismatch {
                stored: bs.model_id,
                loaded,
            });
        }
        if tables.model_id != loaded {
            return Err(CodecError::ModelNotInitialized(
                "frozen tables do not match the loaded weights; re-freeze".into(),
            ));
        }
        let (ph, pw) = (bs.padded_h as usize, bs.padded_w as usize);
        let z_shape = [
            self.cfg.hyper_channels,
            ph / Z_FACTOR,
            pw / Z_FACTOR,
        ];
        let z = decode_tensor(&bs.z_payload, &z_shape, |idx| &tables.z_tables[idx[0]])?;
        let mut g = Graph::eval(store);
        let zi = g.constant(self.batched(&z));
        let sigma = self.net.hyper_synthesis(&mut g, zi);
        let y_shape = [self.cfg.main_channels, ph / Y_FACTOR, pw / Y_FACTOR];
        let sigma = g
            .value(sigma)
            .clone()
            .into_shape_with_order(IxDyn(&y_shape))
            .unwrap();
        let y = decode_tensor(&bs.y_payload, &y_shape, |idx| {
            let s = sigma[idx];
            &tables.y_tables[scale_bin_index(&tables.scale_table, s)]
        })?;
        Ok(LatentPair {
            y,
            z,
            quantized: true,
        })
    }

    /// Differentiable training pass: noise-quantized latents, rate in bits
    /// for the whole batch, reconstruction and tap.
    pub fn train_forward(&self, g: &mut Graph, x: NodeId, rng: &mut Rng) -> TrainForward {
        let y = self.net.analysis(g, x);
        let z = self.net.hyper_analysis(g, y);
        let y_noisy = add_uniform_noise(g, y, rng);
        let z_noisy = add_uniform_noise(g, z, rng);
        let sigma = self.net.hyper_synthesis(g, z_noisy);
        let y_bits = gaussian_bits_node(g, y_noisy, sigma);
        let (loc, scale) = self.net.z_prior(g);
        let z_bits = logistic_bits_node(g, z_noisy, loc, scale);
        let bits = g.add(y_bits, z_bits);
        let (recon, tap) = self.net.synthesis(g, y_noisy);
        TrainForward {
            recon,
            tap,
            bits,
            y_noisy,
            z_noisy,
        }
    }

    /// Deterministic eval-path pass used inside eval graphs (rounded
    /// latents, no rate node).
    pub fn eval_forward(&self, g: &mut Graph, x: NodeId) -> (NodeId, NodeId) {
        let y = self.net.analysis(g, x);
        let y_rounded = g.value(y).mapv(f64::round);
        let yq = g.constant(y_rounded);
        self.net.synthesis(g, yq)
    }
}

fn is_codec_param(name: &str) -> bool {
    for part in [".enc.", ".dec.", ".henc.", ".hdec."] {
        if name.contains(part) {
            return true;
        }
    }
    false
}

fn add_uniform_noise(g: &mut Graph, x: NodeId, rng: &mut Rng) -> NodeId {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let noise = Arr::from_shape_vec(
        IxDyn(&shape),
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
    )
    .unwrap();
    let nid = g.constant(noise);
    g.add(x, nid)
}

/// Payload layout per tensor: escape count (u32 LE), escaped raw values
/// (i32 LE, in coding order), then the range-coded symbol stream.
fn code_tensor<'t>(
    tensor: &Arr,
    table_for: impl Fn(&[usize]) -> &'t SymbolTable,
) -> Result<Vec<u8>> {
    let mut escapes: Vec<i32> = Vec::new();
    let mut enc = RangeEncoder::new();
    for (idx, &v) in tensor.indexed_iter() {
        if !v.is_finite() || v.abs() > i32::MAX as f64 {
            return Err(CodecError::SymbolOutOfRange(format!(
                "latent value {v} cannot be coded"
            )));
        }
        let table = table_for(idx.slice());
        match table.symbol_of(v) {
            Some(s) => enc.encode(table.cum[s], table.cum[s + 1] - table.cum[s]),
            None => {
                let e = table.escape_index();
                enc.encode(table.cum[e], table.cum[e + 1] - table.cum[e]);
                escapes.push(v as i32);
            }
        }
    }
    let coded = enc.finish();
    let mut out = Vec::with_capacity(4 + escapes.len() * 4 + coded.len());
    out.extend_from_slice(&(escapes.len() as u32).to_le_bytes());
    for e in &escapes {
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.extend_from_slice(&coded);
    Ok(out)
}

fn decode_tensor<'t>(
    payload: &[u8],
    shape: &[usize],
    table_for: impl Fn(&[usize]) -> &'t SymbolTable,
) -> Result<Arr> {
    if payload.len() < 4 {
        return Err(CodecError::CorruptStream("tensor payload truncated".into()));
    }
    let n_esc = u32::from_le_bytes([payload[0], payload[1], payload[2], payload[3]]) as usize;
    let esc_end = 4 + 4 * n_esc;
    if payload.len() < esc_end {
        return Err(CodecError::CorruptStream("escape section truncated".into()));
    }
    let escapes: Vec<i32> = (0..n_esc)
        .map(|i| {
            let o = 4 + 4 * i;
            i32::from_le_bytes([payload[o], payload[o + 1], payload[o + 2], payload[o + 3]])
        })
        .collect();
    let mut esc_iter = escapes.into_iter();
    let mut dec = RangeDecoder::new(&payload[esc_end..]);
    let mut out = Arr::zeros(IxDyn(shape));
    for (idx, slot) in out.indexed_iter_mut() {
        let table = table_for(idx.slice());
        let off = dec.peek_cum();
        let sym = table.lookup(off);
        dec.apply(table.cum[sym], table.cum[sym + 1] - table.cum[sym]);
        if sym == table.escape_index() {
            let v = esc_iter.next().ok_or_else(|| {
                CodecError::CorruptStream("escape list shorter than escape symbols".into())
            })?;
            *slot = v as f64;
        } else {
            *slot = table.value_of(sym) as f64;
        }
        if dec.overran() {
            return Err(CodecError::CorruptStream(
                "range stream exhausted before all symbols decoded".into(),
            ));
        }
    }
    Ok(out)
}

/// Rate-distortion objective: lambda * R + D.
pub fn compression_loss(rate_bpp: f64, mse: f64, lambda: f64) -> f64 {
    assert!(rate_bpp.is_finite() && rate_bpp >= 0.0);
    assert!(mse.is_finite() && mse >= 0.0);
    assert!(lambda >= 0.0);
    lambda * rate_bpp + mse
}
