//! The full change detector: an order-invariant U-Net over the two
//! temporal streams, ending in the symmetric fusion gate and a sigmoid
//! probability head at twice the trunk resolution.

use cad_nn::complexity::Cost;
use cad_nn::layers::Conv2d;
use cad_nn::{Arr, Graph, NodeId, ParamStore, Rng};
use ndarray::IxDyn;

use crate::blocks::{
    stack_pair, unstack_pair, GlobalSelfAttention, MultiScaleAttention, MultiheadBlock,
    PairDownBlock, PairUpBlock, RefineBlock, SymmetricFusionGate,
};
use crate::{CdError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SizeVariant {
    /// Half widths everywhere.
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InputSpace {
    /// Codec feature maps at half the image resolution.
    Feature,
    /// Full-resolution pixels; a two-layer stem maps them to the trunk.
    Pixel,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DetectorConfig {
    /// Channel count of the incoming feature stream (codec tap width).
    pub tap_channels: usize,
    /// Source image channel count (used by the pixel stem).
    pub image_channels: usize,
    /// Width of the first level before the size-variant scaling.
    pub base_width: usize,
    /// Number of down/up levels.
    pub depth: usize,
    pub size: SizeVariant,
    pub input_space: InputSpace,
    pub heads: usize,
    pub threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            tap_channels: 32,
            image_channels: 3,
            base_width: 32,
            depth: 3,
            size: SizeVariant::Large,
            input_space: InputSpace::Feature,
            heads: 4,
            threshold: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn toy(tap_channels: usize, input_space: InputSpace) -> Self {
        DetectorConfig {
            tap_channels,
            base_width: 8,
            depth: 2,
            size: SizeVariant::Small,
            input_space,
            heads: 2,
            ..Default::default()
        }
    }

    pub fn width(&self, level: usize) -> usize {
        let w = self.base_width << level;
        match self.size {
            SizeVariant::Small => (w / 2).max(self.heads),
            SizeVariant::Large => w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(CdError::InvalidConfig("depth must be >= 1".into()));
        }
        if self.width(self.depth - 1) % self.heads != 0 {
            return Err(CdError::InvalidConfig(format!(
                "bottleneck width {} not divisible by {} heads",
                self.width(self.depth - 1),
                self.heads
            )));
        }
        Ok(())
    }
}

/// Per-pixel change probability plus its thresholded mask.
#[derive(Clone, Debug)]
pub struct ChangeMap {
    pub prob: Arr, // (H, W) in [0,1]
    pub mask: Arr, // (H, W) in {0,1}
    pub threshold: f64,
}

impl ChangeMap {
    pub fn from_prob(prob: Arr, threshold: f64) -> Self {
        let mask = prob.mapv(|p| if p >= threshold { 1.0 } else { 0.0 });
        ChangeMap {
            prob,
            mask,
            threshold,
        }
    }
}

struct Stem {
    conv1: Conv2d,
    conv2: Conv2d,
}

pub struct ChangeDetector {
    pub cfg: DetectorConfig,
    stem: Option<Stem>,
    downs: Vec<PairDownBlock>,
    gsa: GlobalSelfAttention,
    msa: MultiScaleAttention,
    mha: MultiheadBlock,
    ups: Vec<PairUpBlock>,
    refine: RefineBlock,
    fuse: SymmetricFusionGate,
    head: Conv2d,
}

impl ChangeDetector {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let p = |s: String| s;
        let stem = match cfg.input_space {
            InputSpace::Pixel => Some(Stem {
                conv1: Conv2d::new(
                    store,
                    rng,
                    &p(format!("{prefix}.stem.conv1")),
                    cfg.image_channels,
                    cfg.tap_channels,
                    3,
                    2,
                    1,
                    1,
                ),
                conv2: Conv2d::new(
                    store,
                    rng,
                    &p(format!("{prefix}.stem.conv2")),
                    cfg.tap_channels,
                    cfg.tap_channels,
                    3,
                    1,
                    1,
                    1,
                ),
            }),
            InputSpace::Feature => None,
        };
        let mut downs = Vec::new();
        let mut cin = cfg.tap_channels;
        for d in 0..cfg.depth {
            let width = cfg.width(d);
            downs.push(PairDownBlock::new(
                store,
                rng,
                &p(format!("{prefix}.down{d}")),
                cin,
                width,
            ));
            cin = width;
        }
        let bw = cfg.width(cfg.depth - 1);
        let gsa = GlobalSelfAttention::new(store, rng, &p(format!("{prefix}.gsa")), bw);
        let msa = MultiScaleAttention::new(store, rng, &p(format!("{prefix}.msa")), bw);
        let mha = MultiheadBlock::new(store, rng, &p(format!("{prefix}.mha")), bw, cfg.heads);
        let mut ups = Vec::new();
        let mut ucin = bw;
        for d in (0..cfg.depth).rev() {
            // skip stream: previous down level output, or the raw input pair
            let (skip, width) = if d == 0 {
                (cfg.tap_channels, cfg.width(0))
            } else {
                (cfg.width(d - 1), cfg.width(d - 1))
            };
            ups.push(PairUpBlock::new(
                store,
                rng,
                &p(format!("{prefix}.up{d}")),
                ucin,
                skip,
                width,
            ));
            ucin = width;
        }
        let refine = RefineBlock::new(store, rng, &p(format!("{prefix}.refine")), ucin);
        let fuse = SymmetricFusionGate::new(store, rng, &p(format!("{prefix}.fuse")), ucin);
        let head = Conv2d::new(store, rng, &p(format!("{prefix}.head")), ucin, 1, 1, 1, 0, 1);
        Ok(ChangeDetector {
            cfg,
            stem,
            downs,
            gsa,
            msa,
            mha,
            ups,
            refine,
            fuse,
            head,
        })
    }

    fn apply_stem(&self, g: &mut Graph, f1: NodeId, f2: NodeId) -> (NodeId, NodeId) {
        match &self.stem {
            None => (f1, f2),
            Some(stem) => {
                let s = stack_pair(g, f1, f2);
                let s = stem.conv1.forward(g, s);
                let s = g.mish(s);
                let s = stem.conv2.forward(g, s);
                let s = g.mish(s);
                unstack_pair(g, s)
            }
        }
    }

    /// The differentiable core: two input streams -> (N,1,2A,2B)
    /// probability map (sigmoid applied).
    pub fn forward(&self, g: &mut Graph, in1: NodeId, in2: NodeId) -> Result<NodeId> {
        if g.shape(in1) != g.shape(in2) {
            return Err(CdError::ShapeMismatch(format!(
                "input streams differ: {:?} vs {:?}",
                g.shape(in1),
                g.shape(in2)
            )));
        }
        let (f1, f2) = self.apply_stem(g, in1, in2);
        let expect_c = self.cfg.tap_channels;
        if g.shape(f1)[1] != expect_c {
            return Err(CdError::ShapeMismatch(format!(
                "expected {} trunk channels, got {}",
                expect_c,
                g.shape(f1)[1]
            )));
        }
        let side = g.shape(f1)[2].min(g.shape(f1)[3]);
        if side < (1 << self.cfg.depth) {
            return Err(CdError::ShapeMismatch(format!(
                "spatial side {side} too small for depth {}",
                self.cfg.depth
            )));
        }

        let mut skips: Vec<(NodeId, NodeId)> = vec![(f1, f2)];
        let mut pair = (f1, f2);
        for down in &self.downs {
            pair = down.forward(g, pair.0, pair.1);
            skips.push(pair);
        }

        // per-stream bottleneck attention with shared weights
        let s = stack_pair(g, pair.0, pair.1);
        let s = self.gsa.forward(g, s);
        let s = self.msa.forward(g, s);
        let s = self.mha.forward(g, s);
        pair = unstack_pair(g, s);

        for (i, up) in self.ups.iter().enumerate() {
            let skip = skips[self.cfg.depth - 1 - i];
            pair = up.forward(g, pair, skip);
        }

        let s = stack_pair(g, pair.0, pair.1);
        let s = self.refine.forward(g, s);
        let (r1, r2) = unstack_pair(g, s);
        let fused = self.fuse.forward(g, r1, r2);
        let logits = self.head.forward(g, fused);
        let up = g.upsample2(logits);
        Ok(g.sigmoid(up))
    }

    /// Inference entry point over plain arrays: two aligned feature (or
    /// pixel) streams -> a change map in the frame of the first input.
    pub fn detect(&self, store: &ParamStore, a: &Arr, b: &Arr) -> Result<ChangeMap> {
        if a.shape() != b.shape() {
            return Err(CdError::ShapeMismatch(format!(
                "detect inputs differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut g = Graph::eval(store);
        let batch = |x: &Arr| {
            let mut s = vec![1usize];
            s.extend_from_slice(x.shape());
            x.clone().into_shape_with_order(IxDyn(&s)).unwrap()
        };
        let ia = g.constant(batch(a));
        let ib = g.constant(batch(b));
        let prob = self.forward(&mut g, ia, ib)?;
        let v = g.value(prob);
        let (h, w) = (v.shape()[2], v.shape()[3]);
        let prob2d = v
            .clone()
            .into_shape_with_order(IxDyn(&[h, w]))
            .unwrap();
        Ok(ChangeMap::from_prob(prob2d, self.cfg.threshold))
    }

    pub fn complexity(&self, in_dims: (usize, usize)) -> Cost {
        let mut total = Cost::default();
        let mut dims = in_dims;
        if let Some(stem) = &self.stem {
            let (c1, d1) = stem.conv1.cost(dims.0, dims.1);
            let (c2, d2) = stem.conv2.cost(d1.0, d1.1);
            total += c1 + c2;
            dims = d2;
        }
        let mut cin = self.cfg.tap_channels;
        let mut skip_dims = Vec::new();
        for (d, down) in self.downs.iter().enumerate() {
            skip_dims.push(dims);
            let (c, nd) = down.cost(cin, dims.0, dims.1);
            // two streams share weights; FLOPs run twice
            total.params += c.params;
            total.flops += 2 * c.flops;
            dims = nd;
            cin = self.cfg.width(d);
        }
        for blk in [
            self.gsa.cost(dims.0, dims.1),
            self.msa.cost(dims.0, dims.1),
            self.mha.cost(dims.0, dims.1),
        ] {
            total.params += blk.params;
            total.flops += 2 * blk.flops;
        }
        for up in self.ups.iter() {
            let (c, nd) = up.cost(dims.0, dims.1);
            total.params += c.params;
            total.flops += 2 * c.flops;
            dims = nd;
        }
        let r = self.refine.cost(dims.0, dims.1);
        total.params += r.params;
        total.flops += 2 * r.flops;
        total += self.fuse.cost(dims.0, dims.1);
        let (h, _) = self.head.cost(dims.0, dims.1);
        total += h;
        total
    }
}

/// Mean binary cross-entropy over pixels with 1e-7 probability clamping.
pub fn cd_loss(g: &mut Graph, prob: NodeId, gt: NodeId) -> Result<NodeId> {
    if g.shape(prob) != g.shape(gt) {
        return Err(CdError::ShapeMismatch(format!(
            "loss shapes differ: {:?} vs {:?}",
            g.shape(prob),
            g.shape(gt)
        )));
    }
    const EPS: f64 = 1e-7;
    let p = g.clamp(prob, EPS, 1.0 - EPS);
    let ln_p = g.ln(p);
    let neg_p = g.neg(p);
    let q = g.add_scalar(neg_p, 1.0);
    let ln_q = g.ln(q);
    let neg_gt = g.neg(gt);
    let one_minus_gt = g.add_scalar(neg_gt, 1.0);
    let pos = g.mul(gt, ln_p);
    let negt = g.mul(one_minus_gt, ln_q);
    let sum = g.add(pos, negt);
    let mean = g.mean_all(sum);
    Ok(g.scale(mean, -1.0))
}

/// Convenience wrapper over plain arrays.
pub fn cd_loss_value(prob: &Arr, gt: &Arr) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::eval(&store);
    let p = g.constant(prob.clone());
    let t = g.constant(gt.clone());
    // eval graphs do not record backward closures, values still flow
    let l = cd_loss(&mut g, p, t).expect("matching shapes");
    g.scalar(l)
}
