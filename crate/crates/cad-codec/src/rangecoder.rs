//! Byte-oriented range coder with 16-bit probability precision.
//!
//! Frequencies are cumulative counts out of a fixed total of 2^16. Carries
//! propagate directly into the output buffer, so the flush cost is a fixed
//! four bytes and the per-symbol precision loss stays below 0.006 bits.

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Encode a symbol occupying [cum, cum+freq) out of 2^16.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        let add = r * cum;
        let (new_low, carry) = self.low.overflowing_add(add);
        self.low = new_low;
        if carry {
            self.propagate_carry();
        }
        self.range = r * freq;
        while self.range < TOP {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    fn propagate_carry(&mut self) {
        for byte in self.out.iter_mut().rev() {
            let (b, overflow) = byte.overflowing_add(1);
            *byte = b;
            if !overflow {
                return;
            }
        }
        unreachable!("carry out of an empty or all-0xFF prefix");
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            buf,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.buf.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative-frequency bucket of the next symbol. The caller looks up
    /// the symbol in its table and must then call [`Self::apply`].
    pub fn peek_cum(&self) -> u32 {
        let r = self.range >> PROB_BITS;
        (self.code.wrapping_sub(self.low) / r).min(PROB_TOTAL - 1)
    }

    pub fn apply(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PROB_BITS;
        self.low = self.low.wrapping_add(r * cum);
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// True when the decoder has consumed more bytes than the buffer holds
    /// (reads past the end return zeros, which signals truncation).
    pub fn overran(&self) -> bool {
        self.pos > self.buf.len()
    }
}

/// Quantize a probability vector to integer frequencies summing exactly to
/// 2^16 with every entry >= 1.
pub fn quantize_freqs(probs: &[f64]) -> Vec<u32> {
    assert!(!probs.is_empty());
    let n = probs.len() as u32;
    assert!(n < PROB_TOTAL, "too many symbols for 16-bit precision");
    let mut freqs: Vec<u32> = probs
        .iter()
        .map(|&p| ((p.max(0.0) * PROB_TOTAL as f64) as u32).max(1))
        .collect();
    let mut sum: i64 = freqs.iter().map(|&f| f as i64).sum();
    // steal from / give to the largest buckets until the total is exact
    while sum != PROB_TOTAL as i64 {
        if sum < PROB_TOTAL as i64 {
            let i = argmax(&freqs);
            let add = ((PROB_TOTAL as i64 - sum) as u32).min(freqs[i]);
            freqs[i] += add;
            sum += add as i64;
        } else {
            let i = argmax(&freqs);
            let sub = ((sum - PROB_TOTAL as i64) as u32).min(freqs[i] - 1);
            if sub == 0 {
                // largest bucket is already 1: shrink any bucket > 1
                let j = freqs.iter().position(|&f| f > 1).expect("sum > total");
                freqs[j] -= 1;
                sum -= 1;
            } else {
                freqs[i] -= sub;
                sum -= sub as i64;
            }
        }
    }
    freqs
}

fn argmax(v: &[u32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cumulative table from frequencies: cum[i]..cum[i+1] spans symbol i.
pub fn cumulative(freqs: &[u32]) -> Vec<u32> {
    let mut cum = Vec::with_capacity(freqs.len() + 1);
    let mut acc = 0u32;
    cum.push(0);
    for &f in freqs {
        acc += f;
        cum.push(acc);
    }
    debug_assert_eq!(acc, PROB_TOTAL);
    cum
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn roundtrip(freqs: &[u32], symbols: &[usize]) -> usize {
        let cum = cumulative(freqs);
        let mut enc = RangeEncoder::new();
        for &s in symbols {
            enc.encode(cum[s], freqs[s]);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &s in symbols {
            let off = dec.peek_cum();
            let found = cum.partition_point(|&c| c <= off) - 1;
            assert_eq!(found, s, "symbol mismatch");
            dec.apply(cum[found], freqs[found]);
        }
        bytes.len()
    }

    #[test]
    fn uniform_8bit_overhead_is_at_most_8_bytes() {
        let freqs = vec![PROB_TOTAL / 256; 256];
        let mut rng = cad_nn::seeded_rng(7);
        let symbols: Vec<usize> = (0..1024).map(|_| rng.random_range(0..256)).collect();
        let len = roundtrip(&freqs, &symbols);
        assert!((1024..=1032).contains(&len), "payload length {len}");
    }

    #[test]
    fn skewed_model_roundtrips() {
        let probs: Vec<f64> = (0..10).map(|i| 1.0 / (1 << i) as f64).collect();
        let freqs = quantize_freqs(&probs);
        assert_eq!(freqs.iter().sum::<u32>(), PROB_TOTAL);
        let mut rng = cad_nn::seeded_rng(11);
        let symbols: Vec<usize> = (0..5000).map(|_| rng.random_range(0..10)).collect();
        roundtrip(&freqs, &symbols);
    }

    #[test]
    fn peaked_model_compresses_constants() {
        let mut probs = vec![1e-6; 33];
        probs[16] = 1.0;
        let freqs = quantize_freqs(&probs);
        let symbols = vec![16usize; 2400];
        let len = roundtrip(&freqs, &symbols);
        assert!(len < 30, "peaked model should code ~0 bits/symbol, got {len} bytes");
    }

    #[test]
    fn carry_propagation_is_exercised() {
        // frequencies that drive low close to wrap-around repeatedly
        let freqs = quantize_freqs(&[0.9999, 0.0001]);
        let mut symbols = vec![0usize; 4096];
        for i in (0..4096).step_by(97) {
            symbols[i] = 1;
        }
        roundtrip(&freqs, &symbols);
    }
}
