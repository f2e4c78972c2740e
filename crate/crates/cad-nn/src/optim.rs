//! Adam optimizer with prefix-based parameter groups.

use std::collections::HashMap;

use crate::graph::Arr;
use crate::store::ParamStore;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second-moment adaptive optimizer. Learning rates resolve by the
/// longest matching name prefix, so sub-models can train at their own rate.
pub struct Adam {
    cfg: AdamConfig,
    group_lr: Vec<(String, f64)>,
    lr_scale: f64,
    m: HashMap<usize, Arr>,
    v: HashMap<usize, Arr>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            group_lr: Vec::new(),
            lr_scale: 1.0,
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }

    /// Parameters whose name starts with `prefix` train at `lr`.
    pub fn set_group_lr(&mut self, prefix: impl Into<String>, lr: f64) {
        self.group_lr.push((prefix.into(), lr));
    }

    /// Multiplier applied on top of every group lr (used by step schedules).
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    pub fn lr_scale(&self) -> f64 {
        self.lr_scale
    }

    fn lr_for(&self, name: &str) -> f64 {
        let mut best: Option<(usize, f64)> = None;
        for (prefix, lr) in &self.group_lr {
            if name.starts_with(prefix.as_str()) {
                let len = prefix.len();
                if best.map_or(true, |(blen, _)| len > blen) {
                    best = Some((len, *lr));
                }
            }
        }
        best.map_or(self.cfg.lr, |(_, lr)| lr) * self.lr_scale
    }

    /// Apply one update from gradients keyed by parameter index.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<usize, Arr>) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let mut order: Vec<usize> = grads.keys().copied().collect();
        order.sort_unstable();
        for idx in order {
            let id = crate::store::ParamId(idx);
            if !store.is_trainable(id) {
                continue;
            }
            let g_raw = &grads[&idx];
            let value = store.value(id).clone();
            let mut g = g_raw.clone();
            if self.cfg.weight_decay != 0.0 {
                g.scaled_add(self.cfg.weight_decay, &value);
            }
            let lr = self.lr_for(store.name(id));
            let m = self
                .m
                .entry(idx)
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |mi, gi| *mi = b1 * *mi + (1.0 - b1) * gi);
            let v = self
                .v
                .entry(idx)
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            v.zip_mut_with(&g, |vi, gi| *vi = b2 * *vi + (1.0 - b2) * gi * gi);
            let eps = self.cfg.eps;
            let mut new_value = value;
            ndarray::Zip::from(&mut new_value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
            store.set_value(id, new_value);
        }
    }
}
