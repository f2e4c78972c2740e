//! Reusable layers built on the graph ops.

use ndarray::IxDyn;
use rand::Rng as _;

use crate::complexity::Cost;
use crate::conv::conv_out_dim;
use crate::graph::{Arr, Graph, NodeId};
use crate::store::{ParamId, ParamStore};
use crate::Rng;

fn uniform_init(rng: &mut Rng, shape: &[usize], bound: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self {
        let fan_in = (in_ch / groups) * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, &[out_ch, in_ch / groups, k, k], bound),
            true,
        );
        let bias = Some(store.add(
            format!("{name}.bias"),
            uniform_init(rng, &[out_ch], bound),
            true,
        ));
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }

    pub fn cost(&self, h: usize, w: usize) -> (Cost, (usize, usize)) {
        let ho = conv_out_dim(h, self.k, self.stride, self.pad);
        let wo = conv_out_dim(w, self.k, self.stride, self.pad);
        let params =
            (self.k * self.k * self.in_ch / self.groups * self.out_ch + self.out_ch) as u64;
        let flops =
            2 * (self.k * self.k * self.in_ch / self.groups * self.out_ch * ho * wo) as u64;
        (Cost { params, flops }, (ho, wo))
    }
}

#[derive(Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, &[in_ch, out_ch, k, k], bound),
            true,
        );
        let bias = Some(store.add(
            format!("{name}.bias"),
            uniform_init(rng, &[out_ch], bound),
            true,
        ));
        ConvTranspose2d {
            weight,
            bias,
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv_transpose2d(x, w, b, self.stride, self.pad, self.out_pad)
    }

    pub fn cost(&self, h_in: usize, w_in: usize) -> (Cost, (usize, usize)) {
        let ho = crate::conv::conv_t_out_dim(h_in, self.k, self.stride, self.pad, self.out_pad);
        let wo = crate::conv::conv_t_out_dim(w_in, self.k, self.stride, self.pad, self.out_pad);
        let params = (self.k * self.k * self.in_ch * self.out_ch + self.out_ch) as u64;
        let flops = 2 * (self.k * self.k * self.in_ch * self.out_ch * h_in * w_in) as u64;
        (Cost { params, flops }, (ho, wo))
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: ParamId, // (out, in)
    pub bias: ParamId,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_f: usize, out_f: usize) -> Self {
        let bound = 1.0 / (in_f as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, &[out_f, in_f], bound),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            uniform_init(rng, &[out_f], bound),
            true,
        );
        Linear {
            weight,
            bias,
            in_f,
            out_f,
        }
    }

    /// Zero-initialized variant (used by heads that must start as identity).
    pub fn new_zeroed(store: &mut ParamStore, name: &str, in_f: usize, out_f: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Arr::zeros(IxDyn(&[out_f, in_f])),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Arr::zeros(IxDyn(&[out_f])), true);
        Linear {
            weight,
            bias,
            in_f,
            out_f,
        }
    }

    /// Applies to the last axis of an N-d input.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let shape = g.shape(x).to_vec();
        let last = *shape.last().unwrap();
        assert_eq!(last, self.in_f, "linear input width");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let x2 = g.reshape(x, &[rows, self.in_f]);
        let w = g.param(self.weight);
        let wt = g.permute(w, &[1, 0]);
        let y2 = g.matmul(x2, wt);
        let b = g.param(self.bias);
        let y2 = g.add(y2, b);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_f;
        g.reshape(y2, &out_shape)
    }

    pub fn cost(&self, tokens: usize) -> Cost {
        Cost {
            params: (self.in_f * self.out_f + self.out_f) as u64,
            flops: 2 * (self.in_f * self.out_f * tokens) as u64,
        }
    }
}

/// Batch normalization over (N,H,W) per channel, with frozen running
/// statistics in eval mode so inference stays deterministic.
#[derive(Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub ch: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Arr::ones(IxDyn(&[ch])), true);
        let beta = store.add(format!("{name}.beta"), Arr::zeros(IxDyn(&[ch])), true);
        let running_mean = store.add(
            format!("{name}.running_mean"),
            Arr::zeros(IxDyn(&[ch])),
            false,
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            Arr::ones(IxDyn(&[ch])),
            false,
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            ch,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let shape = g.shape(x).to_vec();
        assert_eq!(shape.len(), 4);
        assert_eq!(shape[1], self.ch, "batchnorm channel mismatch");
        let (mean_id, var_id) = match g.mode() {
            crate::graph::Mode::Train => {
                let mu = g.mean_axes(x, &[0, 2, 3], true); // (1,C,1,1)
                let xc = g.sub(x, mu);
                let sq = g.square(xc);
                let var = g.mean_axes(sq, &[0, 2, 3], true);
                // queue running-stat updates from the concrete batch values
                let count = (shape[0] * shape[2] * shape[3]) as f64;
                let mu_v = g.value(mu).iter().cloned().collect::<Vec<_>>();
                let var_v = g.value(var).iter().cloned().collect::<Vec<_>>();
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let old_m = g.store.value(self.running_mean).clone();
                let old_v = g.store.value(self.running_var).clone();
                let m = self.momentum;
                let new_m = Arr::from_shape_vec(
                    IxDyn(&[self.ch]),
                    (0..self.ch)
                        .map(|c| (1.0 - m) * old_m[[c]] + m * mu_v[c])
                        .collect(),
                )
                .unwrap();
                let new_v = Arr::from_shape_vec(
                    IxDyn(&[self.ch]),
                    (0..self.ch)
                        .map(|c| (1.0 - m) * old_v[[c]] + m * var_v[c] * unbias)
                        .collect(),
                )
                .unwrap();
                g.queue_buffer_update(self.running_mean, new_m);
                g.queue_buffer_update(self.running_var, new_v);
                (mu, var)
            }
            crate::graph::Mode::Eval => {
                let rm = g.param(self.running_mean);
                let rv = g.param(self.running_var);
                let rm = g.reshape(rm, &[1, self.ch, 1, 1]);
                let rv = g.reshape(rv, &[1, self.ch, 1, 1]);
                (rm, rv)
            }
        };
        let xc = g.sub(x, mean_id);
        let veps = g.add_scalar(var_id, self.eps);
        let std = g.sqrt(veps);
        let xhat = g.div(xc, std);
        let gamma = g.param(self.gamma);
        let gamma = g.reshape(gamma, &[1, self.ch, 1, 1]);
        let beta = g.param(self.beta);
        let beta = g.reshape(beta, &[1, self.ch, 1, 1]);
        let scaled = g.mul(xhat, gamma);
        g.add(scaled, beta)
    }

    pub fn cost(&self) -> Cost {
        Cost {
            params: 2 * self.ch as u64,
            flops: 0,
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Arr::ones(IxDyn(&[width])), true);
        let beta = store.add(format!("{name}.beta"), Arr::zeros(IxDyn(&[width])), true);
        LayerNorm {
            gamma,
            beta,
            width,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let nd = g.shape(x).len();
        let mu = g.mean_axes(x, &[nd - 1], true);
        let xc = g.sub(x, mu);
        let sq = g.square(xc);
        let var = g.mean_axes(sq, &[nd - 1], true);
        let veps = g.add_scalar(var, self.eps);
        let std = g.sqrt(veps);
        let xhat = g.div(xc, std);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let scaled = g.mul(xhat, gamma);
        g.add(scaled, beta)
    }

    pub fn cost(&self) -> Cost {
        Cost {
            params: 2 * self.width as u64,
            flops: 0,
        }
    }
}

/// Squeeze-and-excite channel gating.
#[derive(Clone)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
    pub ch: usize,
}

impl SqueezeExcite {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, ch: usize, reduction: usize) -> Self {
        let mid = (ch / reduction).max(1);
        SqueezeExcite {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), ch, mid),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), mid, ch),
            ch,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let n = g.shape(x)[0];
        let pooled = g.mean_axes(x, &[2, 3], false); // (N,C)
        let h = self.fc1.forward(g, pooled);
        let h = g.mish(h);
        let h = self.fc2.forward(g, h);
        let gate = g.sigmoid(h);
        let gate = g.reshape(gate, &[n, self.ch, 1, 1]);
        g.mul(x, gate)
    }

    pub fn cost(&self) -> Cost {
        self.fc1.cost(1) + self.fc2.cost(1)
    }
}
