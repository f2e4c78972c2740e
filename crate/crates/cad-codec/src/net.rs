//! Scale-hyperprior network: analysis/synthesis transforms plus the hyper
//! pair that predicts per-element Gaussian scales for the main latent.

use cad_nn::complexity::Cost;
use cad_nn::layers::{Conv2d, ConvTranspose2d};
use cad_nn::{Arr, Graph, NodeId, ParamId, ParamStore, Rng};
use ndarray::IxDyn;

use crate::entropy::SCALE_FLOOR;

/// Total spatial downsampling of the main latent.
pub const Y_FACTOR: usize = 16;
/// Total spatial downsampling of the hyper latent.
pub const Z_FACTOR: usize = 64;

pub struct HyperpriorNet {
    pub enc: Vec<Conv2d>,
    pub dec: Vec<ConvTranspose2d>,
    pub henc: Vec<Conv2d>,
    pub hdec_up: Vec<ConvTranspose2d>,
    pub hdec_out: Conv2d,
    pub z_loc: ParamId,
    pub z_scale_raw: ParamId,
    pub channels: usize,
    pub width: usize,
    pub main_channels: usize,
    pub hyper_channels: usize,
    pub tap_channels: usize,
}

impl HyperpriorNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        channels: usize,
        width: usize,
        main_channels: usize,
        hyper_channels: usize,
        tap_channels: usize,
    ) -> Self {
        let p = |s: &str| format!("{prefix}.{s}");
        let enc = vec![
            Conv2d::new(store, rng, &p("enc.0"), channels, width, 5, 2, 2, 1),
            Conv2d::new(store, rng, &p("enc.1"), width, width, 5, 2, 2, 1),
            Conv2d::new(store, rng, &p("enc.2"), width, width, 5, 2, 2, 1),
            Conv2d::new(store, rng, &p("enc.3"), width, main_channels, 5, 2, 2, 1),
        ];
        let dec = vec![
            ConvTranspose2d::new(store, rng, &p("dec.0"), main_channels, width, 5, 2, 2, 1),
            ConvTranspose2d::new(store, rng, &p("dec.1"), width, width, 5, 2, 2, 1),
            ConvTranspose2d::new(store, rng, &p("dec.2"), width, tap_channels, 5, 2, 2, 1),
            ConvTranspose2d::new(store, rng, &p("dec.3"), tap_channels, channels, 5, 2, 2, 1),
        ];
        // start reconstructions mid-range so the output clamp passes gradients
        if let Some(b) = dec[3].bias {
            store.set_value(b, Arr::from_elem(IxDyn(&[channels]), 0.5));
        }
        let henc = vec![
            Conv2d::new(store, rng, &p("henc.0"), main_channels, width, 3, 1, 1, 1),
            Conv2d::new(store, rng, &p("henc.1"), width, width, 5, 2, 2, 1),
            Conv2d::new(store, rng, &p("henc.2"), width, hyper_channels, 5, 2, 2, 1),
        ];
        let hdec_up = vec![
            ConvTranspose2d::new(store, rng, &p("hdec.0"), hyper_channels, width, 5, 2, 2, 1),
            ConvTranspose2d::new(store, rng, &p("hdec.1"), width, width, 5, 2, 2, 1),
        ];
        let hdec_out = Conv2d::new(store, rng, &p("hdec.2"), width, main_channels, 3, 1, 1, 1);
        let z_loc = store.add(
            p("entropy.z_loc"),
            Arr::zeros(IxDyn(&[hyper_channels])),
            true,
        );
        // softplus(0.54) ~ 1.0 initial scale
        let z_scale_raw = store.add(
            p("entropy.z_scale_raw"),
            Arr::from_elem(IxDyn(&[hyper_channels]), 0.54),
            true,
        );
        HyperpriorNet {
            enc,
            dec,
            henc,
            hdec_up,
            hdec_out,
            z_loc,
            z_scale_raw,
            channels,
            width,
            main_channels,
            hyper_channels,
            tap_channels,
        }
    }

    /// (N,C,H,W) -> y (N,M,H/16,W/16)
    pub fn analysis(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.forward(g, h);
            if i + 1 < self.enc.len() {
                h = g.mish(h);
            }
        }
        h
    }

    /// y -> (reconstruction clamped to [0,1], tap before the final
    /// transposed layer)
    pub fn synthesis(&self, g: &mut Graph, y: NodeId) -> (NodeId, NodeId) {
        let mut h = y;
        for conv in &self.dec[..3] {
            h = conv.forward(g, h);
            h = g.mish(h);
        }
        let tap = h;
        let out = self.dec[3].forward(g, tap);
        let recon = g.clamp(out, 0.0, 1.0);
        (recon, tap)
    }

    /// y -> z (N,Nh,H/64,W/64); operates on |y| so scales see magnitudes.
    pub fn hyper_analysis(&self, g: &mut Graph, y: NodeId) -> NodeId {
        let mut h = g.abs(y);
        for (i, conv) in self.henc.iter().enumerate() {
            h = conv.forward(g, h);
            if i + 1 < self.henc.len() {
                h = g.mish(h);
            }
        }
        h
    }

    /// z -> per-element Gaussian scales for y, floored at 0.11.
    pub fn hyper_synthesis(&self, g: &mut Graph, z: NodeId) -> NodeId {
        let mut h = z;
        for conv in &self.hdec_up {
            h = conv.forward(g, h);
            h = g.mish(h);
        }
        let raw = self.hdec_out.forward(g, h);
        let sp = g.softplus(raw);
        g.lower_bound(sp, SCALE_FLOOR)
    }

    /// Learned factorized-prior parameters for z: (loc, scale) nodes.
    pub fn z_prior(&self, g: &mut Graph) -> (NodeId, NodeId) {
        let loc = g.param(self.z_loc);
        let raw = g.param(self.z_scale_raw);
        let sp = g.softplus(raw);
        let scale = g.lower_bound(sp, SCALE_FLOOR);
        (loc, scale)
    }

    /// Concrete f64 prior parameters (used at freeze time).
    pub fn z_prior_values(&self, store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
        let loc = store.value(self.z_loc).iter().cloned().collect();
        let scale = store
            .value(self.z_scale_raw)
            .iter()
            .map(|&r| softplus_scalar(r).max(SCALE_FLOOR))
            .collect();
        (loc, scale)
    }

    pub fn complexity(&self, h: usize, w: usize) -> Cost {
        let mut total = Cost::default();
        let mut dims = (h, w);
        for conv in &self.enc {
            let (c, d) = conv.cost(dims.0, dims.1);
            total += c;
            dims = d;
        }
        let y_dims = dims;
        let mut dims = y_dims;
        for conv in &self.dec {
            let (c, d) = conv.cost(dims.0, dims.1);
            total += c;
            dims = d;
        }
        let mut dims = y_dims;
        for conv in &self.henc {
            let (c, d) = conv.cost(dims.0, dims.1);
            total += c;
            dims = d;
        }
        for conv in &self.hdec_up {
            let (c, d) = conv.cost(dims.0, dims.1);
            total += c;
            dims = d;
        }
        let (c, _) = self.hdec_out.cost(dims.0, dims.1);
        total += c;
        total += Cost::params_only(2 * self.hyper_channels as u64);
        total
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
