//! Single-level homography regressor: concat pair -> optional pooling ->
//! depthwise-separable encoder blocks -> global average pool -> zero-init
//! linear head emitting 8 offsets on the flattened identity.

use cad_nn::complexity::Cost;
use cad_nn::layers::{BatchNorm2d, Conv2d, Linear, SqueezeExcite};
use cad_nn::{Arr, Graph, NodeId, ParamStore, Rng};
use ndarray::IxDyn;

use crate::{RegError, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LevelScale {
    Quarter,
    Half,
    Full,
}

impl LevelScale {
    pub fn as_f64(&self) -> f64 {
        match self {
            LevelScale::Quarter => 0.25,
            LevelScale::Half => 0.5,
            LevelScale::Full => 1.0,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LevelConfig {
    pub input_scale: LevelScale,
    pub channel_width: usize,
    pub num_encoder_blocks: usize,
    pub use_avg_pool: bool,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RegressorConfig {
    pub levels: Vec<LevelConfig>,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            levels: vec![
                LevelConfig {
                    input_scale: LevelScale::Quarter,
                    channel_width: 16,
                    num_encoder_blocks: 3,
                    use_avg_pool: true,
                },
                LevelConfig {
                    input_scale: LevelScale::Half,
                    channel_width: 32,
                    num_encoder_blocks: 3,
                    use_avg_pool: false,
                },
                LevelConfig {
                    input_scale: LevelScale::Full,
                    channel_width: 48,
                    num_encoder_blocks: 3,
                    use_avg_pool: false,
                },
            ],
        }
    }
}

impl RegressorConfig {
    /// Small widths for desk-scale training. The quarter-scale level skips
    /// the optional pooling: at 64px inputs it would shrink residual
    /// displacements below the feature resolution.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        let widths = [24, 32, 48];
        for (lvl, w) in cfg.levels.iter_mut().zip(widths) {
            lvl.channel_width = w;
            lvl.num_encoder_blocks = 3;
        }
        cfg.levels[0].use_avg_pool = false;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != 3 {
            return Err(RegError::InvalidConfig(format!(
                "expected exactly 3 levels, got {}",
                self.levels.len()
            )));
        }
        let scales = [LevelScale::Quarter, LevelScale::Half, LevelScale::Full];
        for (lvl, want) in self.levels.iter().zip(scales) {
            if lvl.input_scale != want {
                return Err(RegError::InvalidConfig(
                    "levels must be in ascending scale order 1/4, 1/2, 1".into(),
                ));
            }
        }
        for pair in self.levels.windows(2) {
            if pair[1].channel_width < pair[0].channel_width {
                return Err(RegError::InvalidConfig(
                    "channel widths must be non-decreasing across levels".into(),
                ));
            }
        }
        Ok(())
    }
}

struct EncoderBlock {
    depthwise: Conv2d,
    pointwise: Conv2d,
    bn: BatchNorm2d,
    se: SqueezeExcite,
}

impl EncoderBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        EncoderBlock {
            depthwise: Conv2d::new(store, rng, &format!("{name}.dw"), cin, cin, 3, stride, 1, cin),
            pointwise: Conv2d::new(store, rng, &format!("{name}.pw"), cin, cout, 1, 1, 0, 1),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
            se: SqueezeExcite::new(store, rng, &format!("{name}.se"), cout, 4),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.depthwise.forward(g, x);
        let h = self.pointwise.forward(g, h);
        let h = self.bn.forward(g, h);
        let h = g.mish(h);
        self.se.forward(g, h)
    }

    fn cost(&self, h: usize, w: usize) -> (Cost, (usize, usize)) {
        let (c1, d1) = self.depthwise.cost(h, w);
        let (c2, d2) = self.pointwise.cost(d1.0, d1.1);
        (c1 + c2 + self.bn.cost() + self.se.cost(), d2)
    }
}

pub struct HomographyRegressor {
    pub in_channels: usize,
    use_avg_pool: bool,
    blocks: Vec<EncoderBlock>,
    head: Linear,
}

/// Two constant planes holding normalized x/y coordinates. Appended to the
/// concatenated pair so that displacement-sensitive local features keep
/// their position through the global average pooling; without them the
/// pooled descriptor cancels antisymmetric fields such as rotations.
fn coord_planes(g: &mut Graph, n: usize, h: usize, w: usize) -> NodeId {
    let mut c = Arr::zeros(IxDyn(&[n, 2, h, w]));
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                c[[ni, 0, y, x]] = if w > 1 {
                    2.0 * x as f64 / (w as f64 - 1.0) - 1.0
                } else {
                    0.0
                };
                c[[ni, 1, y, x]] = if h > 1 {
                    2.0 * y as f64 / (h as f64 - 1.0) - 1.0
                } else {
                    0.0
                };
            }
        }
    }
    g.constant(c)
}

impl HomographyRegressor {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        pair_channels: usize,
        cfg: &LevelConfig,
        downsampling_blocks: usize,
    ) -> Self {
        let in_channels = 2 * pair_channels + 2;
        let mut blocks = Vec::new();
        let mut cin = in_channels;
        for b in 0..cfg.num_encoder_blocks {
            // downsample early, refine at constant resolution afterwards
            let stride = if b < downsampling_blocks { 2 } else { 1 };
            blocks.push(EncoderBlock::new(
                store,
                rng,
                &format!("{name}.block{b}"),
                cin,
                cfg.channel_width,
                stride,
            ));
            cin = cfg.channel_width;
        }
        // zero-init head: the untrained regressor must emit the identity
        let head = Linear::new_zeroed(store, &format!("{name}.head"), cin, 8);
        HomographyRegressor {
            in_channels,
            use_avg_pool: cfg.use_avg_pool,
            blocks,
            head,
        }
    }

    /// Regress a batch of forward maps aligning `moving` onto `reference`.
    /// Output is an (N,3,3) node with the bottom-right entry fixed at 1.
    pub fn forward(&self, g: &mut Graph, reference: NodeId, moving: NodeId) -> Result<NodeId> {
        let sa = g.shape(reference).to_vec();
        let sb = g.shape(moving).to_vec();
        if sa != sb {
            return Err(RegError::ShapeMismatch(format!(
                "regressor inputs differ: {sa:?} vs {sb:?}"
            )));
        }
        if sa[1] * 2 + 2 != self.in_channels {
            return Err(RegError::ShapeMismatch(format!(
                "regressor expects {} channels per input, got {}",
                (self.in_channels - 2) / 2,
                sa[1]
            )));
        }
        let n = sa[0];
        let (in_h, in_w) = (sa[2], sa[3]);
        let mut h = g.concat(1, &[reference, moving]);
        if self.use_avg_pool {
            h = g.avg_pool2d(h, 2, 2);
        }
        let hs = g.shape(h).to_vec();
        let coords = coord_planes(g, n, hs[2], hs[3]);
        h = g.concat(1, &[h, coords]);
        for block in &self.blocks {
            h = block.forward(g, h);
        }
        let pooled = g.mean_axes(h, &[2, 3], false); // (N, width)
        let offsets = self.head.forward(g, pooled); // (N, 8)

        // The 8 offsets perturb the identity in a normalized, center-origin
        // frame where every matrix entry is O(1); the map is then expressed
        // in pixel coordinates by conjugation. Working directly in pixel
        // coordinates would couple the entries across ~4 orders of
        // magnitude and pivot scale/rotation about the image corner.
        let id8 = Arr::from_shape_vec(
            IxDyn(&[1, 8]),
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let idc = g.constant(id8);
        let h8 = g.add(offsets, idc);
        let ones = g.constant(Arr::ones(IxDyn(&[n, 1])));
        let h9 = g.concat(1, &[h8, ones]);
        let h_norm = g.reshape(h9, &[n, 3, 3]);

        let sx = 2.0 / (in_w as f64 - 1.0);
        let sy = 2.0 / (in_h as f64 - 1.0);
        let to_norm = g.mat3_const([[sx, 0.0, -1.0], [0.0, sy, -1.0], [0.0, 0.0, 1.0]], n);
        let from_norm = g.mat3_const(
            [
                [1.0 / sx, 0.0, 1.0 / sx],
                [0.0, 1.0 / sy, 1.0 / sy],
                [0.0, 0.0, 1.0],
            ],
            n,
        );
        let t = g.mat3_mul(h_norm, to_norm);
        let h_px = g.mat3_mul(from_norm, t);
        // renormalize so the bottom-right entry is exactly 1
        let h22 = g.narrow(h_px, 1, 2, 1);
        let h22 = g.narrow(h22, 2, 2, 1); // (N,1,1)
        Ok(g.div(h_px, h22))
    }

    pub fn complexity(&self, in_h: usize, in_w: usize) -> Cost {
        let mut dims = if self.use_avg_pool {
            (in_h / 2, in_w / 2)
        } else {
            (in_h, in_w)
        };
        // coordinate planes add no parameters or MACs of their own
        let mut total = Cost::default();
        for b in &self.blocks {
            let (c, d) = b.cost(dims.0, dims.1);
            total += c;
            dims = d;
        }
        total + self.head.cost(1)
    }
}
