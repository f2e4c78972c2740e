//! Entropy models: a conditional zero-mean Gaussian (convolved with the
//! quantization uniform) for the main latent, and a learned per-channel
//! discretized logistic for the hyper latent. The same closed forms drive
//! the differentiable rate estimate and the frozen coder tables.

use cad_nn::{Arr, Graph, NodeId};
use statrs::function::erf::erf;

use crate::rangecoder::{cumulative, quantize_freqs};

/// Probabilities below this floor clamp before the log so the rate stays
/// finite.
pub const PROB_FLOOR: f64 = 2.329_514_e-10; // 2^-32
pub const SCALE_FLOOR: f64 = 0.11;
pub const LOG2_E: f64 = std::f64::consts::LOG2_E;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn logistic_cdf(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mass the Gaussian(0, sigma) * U(-1/2,1/2) model puts on the quantization
/// bin around `v`.
pub fn gaussian_bin_prob(v: f64, sigma: f64) -> f64 {
    let s = sigma.max(SCALE_FLOOR);
    std_normal_cdf((v + 0.5) / s) - std_normal_cdf((v - 0.5) / s)
}

/// Mass of the discretized logistic with location `loc` and scale `s`.
pub fn logistic_bin_prob(v: f64, loc: f64, s: f64) -> f64 {
    let s = s.max(SCALE_FLOOR);
    logistic_cdf((v - loc + 0.5) / s) - logistic_cdf((v - loc - 0.5) / s)
}

/// Information content in bits of a clamped probability.
pub fn bits_from_prob(p: f64) -> f64 {
    -p.max(PROB_FLOOR).log2()
}

/// Total bits of a main latent under per-element Gaussian scales.
pub fn gaussian_bits(values: &Arr, sigma: &Arr) -> f64 {
    assert_eq!(values.shape(), sigma.shape());
    values
        .iter()
        .zip(sigma.iter())
        .map(|(&v, &s)| bits_from_prob(gaussian_bin_prob(v, s)))
        .sum()
}

/// Total bits of a hyper latent under per-channel logistic parameters.
/// `z` is (..., C, h, w) with the channel axis first among the last three.
pub fn logistic_bits(z: &Arr, loc: &[f64], scale: &[f64]) -> f64 {
    let shape = z.shape();
    let c_axis = shape.len() - 3;
    let c = shape[c_axis];
    assert_eq!(loc.len(), c);
    assert_eq!(scale.len(), c);
    let mut total = 0.0;
    for (idx, &v) in z.indexed_iter() {
        let ci = idx[c_axis];
        total += bits_from_prob(logistic_bin_prob(v, loc[ci], scale[ci]));
    }
    total
}

/// Differentiable bits of the main latent: `values` and `sigma` are nodes
/// of identical shape; returns a scalar node in bits.
pub fn gaussian_bits_node(g: &mut Graph, values: NodeId, sigma: NodeId) -> NodeId {
    const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
    let hi = g.add_scalar(values, 0.5);
    let lo = g.add_scalar(values, -0.5);
    let hi = g.div(hi, sigma);
    let lo = g.div(lo, sigma);
    let hi = g.scale(hi, INV_SQRT2);
    let lo = g.scale(lo, INV_SQRT2);
    let e_hi = g.erf(hi);
    let e_lo = g.erf(lo);
    let diff = g.sub(e_hi, e_lo);
    let p = g.scale(diff, 0.5);
    let p = g.clamp(p, PROB_FLOOR, 1.0);
    let ln_p = g.ln(p);
    let bits = g.scale(ln_p, -LOG2_E);
    g.sum_all(bits)
}

/// Differentiable bits of the hyper latent. `loc`/`scale` are (C,) nodes,
/// `z` is (N,C,h,w).
pub fn logistic_bits_node(g: &mut Graph, z: NodeId, loc: NodeId, scale: NodeId) -> NodeId {
    let c = g.shape(loc)[0];
    assert_eq!(g.shape(z)[1], c);
    let loc = g.reshape(loc, &[1, c, 1, 1]);
    let scale = g.reshape(scale, &[1, c, 1, 1]);
    let centered = g.sub(z, loc);
    let hi = g.add_scalar(centered, 0.5);
    let lo = g.add_scalar(centered, -0.5);
    let hi = g.div(hi, scale);
    let lo = g.div(lo, scale);
    let s_hi = g.sigmoid(hi);
    let s_lo = g.sigmoid(lo);
    let p = g.sub(s_hi, s_lo);
    let p = g.clamp(p, PROB_FLOOR, 1.0);
    let ln_p = g.ln(p);
    let bits = g.scale(ln_p, -LOG2_E);
    g.sum_all(bits)
}

/// One per-channel (or per-scale-bin) coder table. Symbols cover the
/// integer interval [min_symbol, min_symbol + n - 1] plus a trailing escape
/// slot for out-of-range values.
#[derive(Clone, Debug)]
pub struct SymbolTable {
    pub min_symbol: i32,
    /// Cumulative frequencies, length n_symbols + 2 (escape included).
    pub cum: Vec<u32>,
}

impl SymbolTable {
    pub fn n_regular(&self) -> usize {
        self.cum.len() - 2
    }

    pub fn escape_index(&self) -> usize {
        self.cum.len() - 2
    }

    pub fn symbol_of(&self, v: f64) -> Option<usize> {
        let vi = v as i64;
        let rel = vi - self.min_symbol as i64;
        if v.fract() == 0.0 && rel >= 0 && (rel as usize) < self.n_regular() {
            Some(rel as usize)
        } else {
            None
        }
    }

    pub fn value_of(&self, symbol: usize) -> i32 {
        self.min_symbol + symbol as i32
    }

    pub fn lookup(&self, cum_offset: u32) -> usize {
        self.cum.partition_point(|&c| c <= cum_offset) - 1
    }

    fn from_probs(min_symbol: i32, probs_with_escape: &[f64]) -> SymbolTable {
        let freqs = quantize_freqs(probs_with_escape);
        SymbolTable {
            min_symbol,
            cum: cumulative(&freqs),
        }
    }
}

/// Coder tables quantized from the learned entropy models at freeze time.
#[derive(Clone, Debug)]
pub struct FrozenTables {
    pub model_id: u16,
    pub lambda_index: u8,
    /// Log-spaced Gaussian scale bins; element sigmas round up to a bin.
    pub scale_table: Vec<f64>,
    pub y_tables: Vec<SymbolTable>,
    pub z_tables: Vec<SymbolTable>,
}

pub const N_SCALE_BINS: usize = 256;
pub const MAX_SCALE: f64 = 256.0;

pub fn build_scale_table() -> Vec<f64> {
    let lo = SCALE_FLOOR.ln();
    let hi = MAX_SCALE.ln();
    (0..N_SCALE_BINS)
        .map(|i| (lo + (hi - lo) * i as f64 / (N_SCALE_BINS - 1) as f64).exp())
        .collect()
}

pub fn scale_bin_index(table: &[f64], sigma: f64) -> usize {
    table.partition_point(|&s| s < sigma).min(table.len() - 1)
}

impl FrozenTables {
    pub fn build(model_id: u16, lambda_index: u8, z_loc: &[f64], z_scale: &[f64]) -> FrozenTables {
        let scale_table = build_scale_table();
        let y_tables = scale_table
            .iter()
            .map(|&s| {
                let radius = ((6.0 * s).ceil() as i32 + 1).clamp(2, 2048);
                let mut probs: Vec<f64> = (-radius..=radius)
                    .map(|v| gaussian_bin_prob(v as f64, s))
                    .collect();
                let mass: f64 = probs.iter().sum();
                probs.push((1.0 - mass).max(1e-12));
                SymbolTable::from_probs(-radius, &probs)
            })
            .collect();
        let z_tables = z_loc
            .iter()
            .zip(z_scale.iter())
            .map(|(&loc, &s)| {
                let s = s.max(SCALE_FLOOR);
                let center = loc.round() as i32;
                let radius = ((16.0 * s).ceil() as i32 + 1).clamp(2, 4096);
                let mut probs: Vec<f64> = (center - radius..=center + radius)
                    .map(|v| logistic_bin_prob(v as f64, loc, s))
                    .collect();
                let mass: f64 = probs.iter().sum();
                probs.push((1.0 - mass).max(1e-12));
                SymbolTable::from_probs(center - radius, &probs)
            })
            .collect();
        FrozenTables {
            model_id,
            lambda_index,
            scale_table,
            y_tables,
            z_tables,
        }
    }
}
