//! Deliberately order-sensitive baseline: a small U-Net over the two
//! streams concatenated along the channel axis. Exists to demonstrate the
//! failure mode the invariant architecture avoids.

use cad_nn::layers::{BatchNorm2d, Conv2d};
use cad_nn::{Arr, Graph, NodeId, ParamStore, Rng};
use ndarray::IxDyn;

use crate::detector::ChangeMap;
use crate::{CdError, Result};

pub struct ConcatBaseline {
    pub in_channels: usize,
    down1: Conv2d,
    bn1: BatchNorm2d,
    down2: Conv2d,
    bn2: BatchNorm2d,
    mid: Conv2d,
    bn3: BatchNorm2d,
    up1: Conv2d,
    bn4: BatchNorm2d,
    up2: Conv2d,
    bn5: BatchNorm2d,
    head: Conv2d,
    pub threshold: f64,
}

impl ConcatBaseline {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, in_channels: usize, width: usize) -> Self {
        ConcatBaseline {
            in_channels,
            down1: Conv2d::new(store, rng, &format!("{prefix}.down1"), 2 * in_channels, width, 3, 2, 1, 1),
            bn1: BatchNorm2d::new(store, &format!("{prefix}.bn1"), width),
            down2: Conv2d::new(store, rng, &format!("{prefix}.down2"), width, 2 * width, 3, 2, 1, 1),
            bn2: BatchNorm2d::new(store, &format!("{prefix}.bn2"), 2 * width),
            mid: Conv2d::new(store, rng, &format!("{prefix}.mid"), 2 * width, 2 * width, 3, 1, 1, 1),
            bn3: BatchNorm2d::new(store, &format!("{prefix}.bn3"), 2 * width),
            up1: Conv2d::new(store, rng, &format!("{prefix}.up1"), 2 * width, width, 3, 1, 1, 1),
            bn4: BatchNorm2d::new(store, &format!("{prefix}.bn4"), width),
            up2: Conv2d::new(store, rng, &format!("{prefix}.up2"), width, width, 3, 1, 1, 1),
            bn5: BatchNorm2d::new(store, &format!("{prefix}.bn5"), width),
            head: Conv2d::new(store, rng, &format!("{prefix}.head"), width, 1, 1, 1, 0, 1),
            threshold: 0.5,
        }
    }

    pub fn forward(&self, g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
        if g.shape(a) != g.shape(b) {
            return Err(CdError::ShapeMismatch("baseline inputs differ".into()));
        }
        let x = g.concat(1, &[a, b]);
        let h = self.down1.forward(g, x);
        let h = self.bn1.forward(g, h);
        let h = g.mish(h);
        let h = self.down2.forward(g, h);
        let h = self.bn2.forward(g, h);
        let h = g.mish(h);
        let h = self.mid.forward(g, h);
        let h = self.bn3.forward(g, h);
        let h = g.mish(h);
        let h = g.upsample2(h);
        let h = self.up1.forward(g, h);
        let h = self.bn4.forward(g, h);
        let h = g.mish(h);
        let h = g.upsample2(h);
        let h = self.up2.forward(g, h);
        let h = self.bn5.forward(g, h);
        let h = g.mish(h);
        let logits = self.head.forward(g, h);
        Ok(g.sigmoid(logits))
    }

    pub fn detect(&self, store: &ParamStore, a: &Arr, b: &Arr) -> Result<ChangeMap> {
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
        let prob2d = v.clone().into_shape_with_order(IxDyn(&[h, w])).unwrap();
        Ok(ChangeMap::from_prob(prob2d, self.threshold))
    }
}
