//! Building blocks of the change detector. Every block is equivariant to
//! swapping the two temporal streams: per-stream ops run with shared
//! weights by stacking the pair on the batch axis, and the only cross-time
//! mixing is an attention over the length-2 temporal sequence.

use cad_nn::complexity::{matmul_cost, Cost};
use cad_nn::layers::{BatchNorm2d, Conv2d, LayerNorm, Linear};
use cad_nn::{Graph, NodeId, ParamStore, Rng};

/// Stack the two streams on the batch axis.
pub fn stack_pair(g: &mut Graph, f1: NodeId, f2: NodeId) -> NodeId {
    g.concat(0, &[f1, f2])
}

/// Undo [`stack_pair`].
pub fn unstack_pair(g: &mut Graph, s: NodeId) -> (NodeId, NodeId) {
    let n = g.shape(s)[0];
    debug_assert!(n % 2 == 0);
    let half = n / 2;
    (g.narrow(s, 0, 0, half), g.narrow(s, 0, half, half))
}

/// Self-attention over the length-2 temporal sequence. Queries and keys are
/// spatially pooled 1x1-conv features; values are the full vectorized
/// streams. Swapping the inputs permutes the outputs exactly.
pub struct TemporalPairAttention {
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    pub channels: usize,
}

impl TemporalPairAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Self {
        TemporalPairAttention {
            q: Conv2d::new(store, rng, &format!("{name}.q"), channels, channels, 1, 1, 0, 1),
            k: Conv2d::new(store, rng, &format!("{name}.k"), channels, channels, 1, 1, 0, 1),
            v: Conv2d::new(store, rng, &format!("{name}.v"), channels, channels, 1, 1, 0, 1),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, f1: NodeId, f2: NodeId) -> (NodeId, NodeId) {
        let shape = g.shape(f1).to_vec();
        assert_eq!(shape, g.shape(f2), "temporal pair shapes must match");
        let (n, c, a, b) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.channels);
        let stacked = stack_pair(g, f1, f2);

        let pool_proj = |g: &mut Graph, conv: &Conv2d| -> NodeId {
            let m = conv.forward(g, stacked);
            let pooled = g.mean_axes(m, &[2, 3], false); // (2N, F)
            let (p1, p2) = unstack_pair(g, pooled);
            let p1 = g.reshape(p1, &[n, 1, c]);
            let p2 = g.reshape(p2, &[n, 1, c]);
            g.concat(1, &[p1, p2]) // (N, 2, F)
        };
        let q = pool_proj(g, &self.q);
        let k = pool_proj(g, &self.k);

        let vm = self.v.forward(g, stacked); // (2N, F, A, B)
        let (v1, v2) = unstack_pair(g, vm);
        let flat = c * a * b;
        let v1 = g.reshape(v1, &[n, 1, flat]);
        let v2 = g.reshape(v2, &[n, 1, flat]);
        let v = g.concat(1, &[v1, v2]); // (N, 2, F*A*B)

        let kt = g.permute(k, &[0, 2, 1]); // (N, F, 2)
        let scores = g.bmm(q, kt); // (N, 2, 2)
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = g.softmax_last(scores);

        // Mix the two value rows with explicit multiply-then-add instead of
        // a GEMM: fused accumulation is not commutative under operand
        // swap, and this keeps the swapped evaluation bit-identical.
        let coeff = |g: &mut Graph, i: usize, j: usize| -> NodeId {
            let row = g.narrow(attn, 1, i, 1);
            let e = g.narrow(row, 2, j, 1);
            g.reshape(e, &[n, 1])
        };
        let v0 = g.narrow(v, 1, 0, 1);
        let v0 = g.reshape(v0, &[n, flat]);
        let v1 = g.narrow(v, 1, 1, 1);
        let v1 = g.reshape(v1, &[n, flat]);
        let (a00, a01) = (coeff(g, 0, 0), coeff(g, 0, 1));
        let (a10, a11) = (coeff(g, 1, 0), coeff(g, 1, 1));
        let p00 = g.mul(a00, v0);
        let p01 = g.mul(a01, v1);
        let o1 = g.add(p00, p01);
        let p10 = g.mul(a10, v0);
        let p11 = g.mul(a11, v1);
        let o2 = g.add(p10, p11);
        let o1 = g.reshape(o1, &[n, c, a, b]);
        let o2 = g.reshape(o2, &[n, c, a, b]);
        (g.add(f1, o1), g.add(f2, o2))
    }

    /// Attention matrix alone (used by symmetry tests).
    pub fn attention(&self, g: &mut Graph, f1: NodeId, f2: NodeId) -> NodeId {
        let shape = g.shape(f1).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let stacked = stack_pair(g, f1, f2);
        let pool_proj = |g: &mut Graph, conv: &Conv2d| -> NodeId {
            let m = conv.forward(g, stacked);
            let pooled = g.mean_axes(m, &[2, 3], false);
            let (p1, p2) = unstack_pair(g, pooled);
            let p1 = g.reshape(p1, &[n, 1, c]);
            let p2 = g.reshape(p2, &[n, 1, c]);
            g.concat(1, &[p1, p2])
        };
        let q = pool_proj(g, &self.q);
        let k = pool_proj(g, &self.k);
        let kt = g.permute(k, &[0, 2, 1]);
        let scores = g.bmm(q, kt);
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        g.softmax_last(scores)
    }

    pub fn cost(&self, a: usize, b: usize) -> Cost {
        let (cq, _) = self.q.cost(a, b);
        let (ck, _) = self.k.cost(a, b);
        let (cv, _) = self.v.cost(a, b);
        // the 2x2 attention itself is negligible
        cq + ck + cv
    }
}

/// Downsampling stage: two shared conv-norm-Mish layers, 2x2 average
/// pooling, then temporal mixing.
pub struct PairDownBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    mix: TemporalPairAttention,
    pub out_channels: usize,
}

impl PairDownBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, width: usize) -> Self {
        PairDownBlock {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), cin, width, 3, 1, 1, 1),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), width),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), width, width, 3, 1, 1, 1),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), width),
            mix: TemporalPairAttention::new(store, rng, &format!("{name}.mix"), width),
            out_channels: width,
        }
    }

    pub fn forward(&self, g: &mut Graph, f1: NodeId, f2: NodeId) -> (NodeId, NodeId) {
        let s = stack_pair(g, f1, f2);
        let s = self.conv1.forward(g, s);
        let s = self.bn1.forward(g, s);
        let s = g.mish(s);
        let s = self.conv2.forward(g, s);
        let s = self.bn2.forward(g, s);
        let s = g.mish(s);
        let s = g.avg_pool2d(s, 2, 2);
        let (d1, d2) = unstack_pair(g, s);
        self.mix.forward(g, d1, d2)
    }

    pub fn cost(&self, cin: usize, h: usize, w: usize) -> (Cost, (usize, usize)) {
        let _ = cin;
        let (c1, d1) = self.conv1.cost(h, w);
        let (c2, d2) = self.conv2.cost(d1.0, d1.1);
        let half = (d2.0 / 2, d2.1 / 2);
        let total = c1 + c2 + self.bn1.cost() + self.bn2.cost() + self.mix.cost(half.0, half.1);
        (total, half)
    }
}

/// Upsampling stage: nearest x2, per-stream skip concatenation, two shared
/// conv-norm-Mish layers, then temporal mixing.
pub struct PairUpBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    mix: TemporalPairAttention,
    pub out_channels: usize,
}

impl PairUpBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        skip: usize,
        width: usize,
    ) -> Self {
        PairUpBlock {
            conv1: Conv2d::new(
                store,
                rng,
                &format!("{name}.conv1"),
                cin + skip,
                width,
                3,
                1,
                1,
                1,
            ),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), width),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), width, width, 3, 1, 1, 1),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), width),
            mix: TemporalPairAttention::new(store, rng, &format!("{name}.mix"), width),
            out_channels: width,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        pair: (NodeId, NodeId),
        skip: (NodeId, NodeId),
    ) -> (NodeId, NodeId) {
        let s = stack_pair(g, pair.0, pair.1);
        let s = g.upsample2(s);
        let sk = stack_pair(g, skip.0, skip.1);
        assert_eq!(
            g.shape(s)[2..],
            g.shape(sk)[2..],
            "skip spatial dims must match the upsampled stream"
        );
        let s = g.concat(1, &[s, sk]);
        let s = self.conv1.forward(g, s);
        let s = self.bn1.forward(g, s);
        let s = g.mish(s);
        let s = self.conv2.forward(g, s);
        let s = self.bn2.forward(g, s);
        let s = g.mish(s);
        let (u1, u2) = unstack_pair(g, s);
        self.mix.forward(g, u1, u2)
    }

    pub fn cost(&self, h: usize, w: usize) -> (Cost, (usize, usize)) {
        let up = (2 * h, 2 * w);
        let (c1, d1) = self.conv1.cost(up.0, up.1);
        let (c2, d2) = self.conv2.cost(d1.0, d1.1);
        let total = c1 + c2 + self.bn1.cost() + self.bn2.cost() + self.mix.cost(d2.0, d2.1);
        (total, d2)
    }
}

/// Spatial self-attention over all positions with F/8 query/key channels,
/// a separable-conv refinement and a residual connection.
pub struct GlobalSelfAttention {
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    refine_dw: Conv2d,
    refine_pw: Conv2d,
    bn: BatchNorm2d,
    pub channels: usize,
    pub qk_channels: usize,
}

impl GlobalSelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Self {
        let qk = (channels / 8).max(1);
        GlobalSelfAttention {
            q: Conv2d::new(store, rng, &format!("{name}.q"), channels, qk, 1, 1, 0, 1),
            k: Conv2d::new(store, rng, &format!("{name}.k"), channels, qk, 1, 1, 0, 1),
            v: Conv2d::new(store, rng, &format!("{name}.v"), channels, channels, 1, 1, 0, 1),
            refine_dw: Conv2d::new(
                store,
                rng,
                &format!("{name}.refine_dw"),
                channels,
                channels,
                3,
                1,
                1,
                channels,
            ),
            refine_pw: Conv2d::new(
                store,
                rng,
                &format!("{name}.refine_pw"),
                channels,
                channels,
                1,
                1,
                0,
                1,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels),
            channels,
            qk_channels: qk,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let o = self.attend(g, x);
        let o = self.refine_dw.forward(g, o);
        let o = self.refine_pw.forward(g, o);
        let o = self.bn.forward(g, o);
        let o = g.mish(o);
        g.add(x, o)
    }

    /// Raw attention output before refinement (exposed for oracle tests).
    pub fn attend(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let shape = g.shape(x).to_vec();
        let (n, c, a, b) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.channels);
        let ab = a * b;
        let qm = self.q.forward(g, x);
        let km = self.k.forward(g, x);
        let vm = self.v.forward(g, x);
        let q = g.reshape(qm, &[n, self.qk_channels, ab]);
        let q = g.permute(q, &[0, 2, 1]); // (N, AB, qk)
        let k = g.reshape(km, &[n, self.qk_channels, ab]); // (N, qk, AB)
        let scores = g.bmm(q, k); // (N, AB, AB)
        let scores = g.scale(scores, 1.0 / (self.qk_channels as f64).sqrt());
        let attn = g.softmax_last(scores);
        let v = g.reshape(vm, &[n, c, ab]);
        let v = g.permute(v, &[0, 2, 1]); // (N, AB, F)
        let o = g.bmm(attn, v); // (N, AB, F)
        let o = g.permute(o, &[0, 2, 1]);
        g.reshape(o, &[n, c, a, b])
    }

    pub fn cost(&self, a: usize, b: usize) -> Cost {
        let ab = a * b;
        let (cq, _) = self.q.cost(a, b);
        let (ck, _) = self.k.cost(a, b);
        let (cv, _) = self.v.cost(a, b);
        let (cd, _) = self.refine_dw.cost(a, b);
        let (cp, _) = self.refine_pw.cost(a, b);
        cq + ck
            + cv
            + cd
            + cp
            + self.bn.cost()
            + matmul_cost(ab, self.qk_channels, ab)
            + matmul_cost(ab, ab, self.channels)
    }
}

/// Runs one shared global attention over the identity, 2x2-box and 4x4-box
/// filtered versions of the input and fuses the 3F stack back to F.
pub struct MultiScaleAttention {
    pub att: GlobalSelfAttention,
    fuse: Conv2d,
    bn: BatchNorm2d,
    pub channels: usize,
}

impl MultiScaleAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Self {
        MultiScaleAttention {
            att: GlobalSelfAttention::new(store, rng, &format!("{name}.att"), channels),
            fuse: Conv2d::new(
                store,
                rng,
                &format!("{name}.fuse"),
                3 * channels,
                channels,
                3,
                1,
                1,
                1,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let b1 = g.box_filter(x, 2);
        let b2 = g.box_filter(x, 4);
        let a0 = self.att.forward(g, x);
        let a1 = self.att.forward(g, b1);
        let a2 = self.att.forward(g, b2);
        let cat = g.concat(1, &[a0, a1, a2]);
        let f = self.fuse.forward(g, cat);
        let f = self.bn.forward(g, f);
        g.mish(f)
    }

    pub fn cost(&self, a: usize, b: usize) -> Cost {
        let mut total = Cost::default();
        for _ in 0..3 {
            total += self.att.cost(a, b);
        }
        // shared weights: count parameters once
        total.params = self.att.cost(a, b).params;
        let (cf, _) = self.fuse.cost(a, b);
        total + cf + self.bn.cost()
    }
}

/// Pre-norm transformer block over the AB spatial tokens.
pub struct MultiheadBlock {
    ln1: LayerNorm,
    ln2: LayerNorm,
    qkv: Linear,
    proj: Linear,
    mlp1: Linear,
    mlp2: Linear,
    pub channels: usize,
    pub heads: usize,
}

impl MultiheadBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize, heads: usize) -> Self {
        assert!(channels % heads == 0, "heads must divide the width");
        MultiheadBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), channels),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), channels),
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), channels, 3 * channels),
            proj: Linear::new(store, rng, &format!("{name}.proj"), channels, channels),
            mlp1: Linear::new(store, rng, &format!("{name}.mlp1"), channels, 4 * channels),
            mlp2: Linear::new(store, rng, &format!("{name}.mlp2"), 4 * channels, channels),
            channels,
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let shape = g.shape(x).to_vec();
        let (n, c, a, b) = (shape[0], shape[1], shape[2], shape[3]);
        let ab = a * b;
        let tokens = g.reshape(x, &[n, c, ab]);
        let tokens = g.permute(tokens, &[0, 2, 1]); // (N, AB, F)

        let t = self.ln1.forward(g, tokens);
        let qkv = self.qkv.forward(g, t); // (N, AB, 3F)
        let q = g.narrow(qkv, 2, 0, c);
        let k = g.narrow(qkv, 2, c, c);
        let v = g.narrow(qkv, 2, 2 * c, c);
        let dh = c / self.heads;
        let to_heads = |g: &mut Graph, t: NodeId| -> NodeId {
            let t = g.reshape(t, &[n, ab, self.heads, dh]);
            let t = g.permute(t, &[0, 2, 1, 3]);
            g.reshape(t, &[n * self.heads, ab, dh])
        };
        let qh = to_heads(g, q);
        let kh = to_heads(g, k);
        let vh = to_heads(g, v);
        let kt = g.permute(kh, &[0, 2, 1]);
        let scores = g.bmm(qh, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_last(scores);
        let oh = g.bmm(attn, vh); // (N*h, AB, dh)
        let o = g.reshape(oh, &[n, self.heads, ab, dh]);
        let o = g.permute(o, &[0, 2, 1, 3]);
        let o = g.reshape(o, &[n, ab, c]);
        let o = self.proj.forward(g, o);
        let h1 = g.add(tokens, o);

        let t2 = self.ln2.forward(g, h1);
        let m = self.mlp1.forward(g, t2);
        let m = g.gelu(m);
        let m = self.mlp2.forward(g, m);
        let h2 = g.add(h1, m);

        let back = g.permute(h2, &[0, 2, 1]);
        g.reshape(back, &[n, c, a, b])
    }

    pub fn cost(&self, a: usize, b: usize) -> Cost {
        let ab = a * b;
        self.ln1.cost()
            + self.ln2.cost()
            + self.qkv.cost(ab)
            + self.proj.cost(ab)
            + self.mlp1.cost(ab)
            + self.mlp2.cost(ab)
            + matmul_cost(ab, self.channels, ab)
            + matmul_cost(ab, ab, self.channels)
    }
}

/// Refinement head: 5x5 -> 3x3 -> 1x1 with BN + Mish between.
pub struct RefineBlock {
    conv5: Conv2d,
    bn1: BatchNorm2d,
    conv3: Conv2d,
    bn2: BatchNorm2d,
    conv1: Conv2d,
    pub channels: usize,
}

impl RefineBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Self {
        RefineBlock {
            conv5: Conv2d::new(store, rng, &format!("{name}.conv5"), channels, channels, 5, 1, 2, 1),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), channels),
            conv3: Conv2d::new(store, rng, &format!("{name}.conv3"), channels, channels, 3, 1, 1, 1),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), channels),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), channels, channels, 1, 1, 0, 1),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let r = self.conv5.forward(g, x);
        let r = self.bn1.forward(g, r);
        let r = g.mish(r);
        let r = self.conv3.forward(g, r);
        let r = self.bn2.forward(g, r);
        let r = g.mish(r);
        self.conv1.forward(g, r)
    }

    pub fn cost(&self, a: usize, b: usize) -> Cost {
        let (c5, _) = self.conv5.cost(a, b);
        let (c3, _) = self.conv3.cost(a, b);
        let (c1, _) = self.conv1.cost(a, b);
        c5 + c3 + c1 + self.bn1.cost() + self.bn2.cost()
    }
}

/// Order-invariant fusion: mean and absolute difference of the two streams
/// drive a sigmoid gate that modulates the mean.
pub struct SymmetricFusionGate {
    pub conv: Conv2d,
    pub channels: usize,
}

impl SymmetricFusionGate {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Self {
        SymmetricFusionGate {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), channels, channels, 3, 1, 1, 1),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, z1: NodeId, z2: NodeId) -> NodeId {
        assert_eq!(g.shape(z1), g.shape(z2), "fusion gate shapes must match");
        let sum = g.add(z1, z2);
        let avg = g.scale(sum, 0.5);
        let diff = g.sub(z1, z2);
        let dabs = g.abs(diff);
        let comb = g.add(avg, dabs);
        let comb = g.scale(comb, 0.5);
        let gate = self.conv.forward(g, comb);
        let gate = g.sigmoid(gate);
        g.mul(gate, avg)
    }

    pub fn cost(&self, a: usize, b: usize) -> Cost {
        self.conv.cost(a, b).0
    }
}
