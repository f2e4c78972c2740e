//! Parameter/FLOP accounting.
//!
//! Convention: one multiply-accumulate counts as 2 FLOPs; bias additions and
//! activations are not counted. Parameter counts are exact (weights + biases).

use std::ops::{Add, AddAssign};

#[derive(Clone, Copy, Default, Debug, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost {
            params: self.params + rhs.params,
            flops: self.flops + rhs.flops,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.params += rhs.params;
        self.flops += rhs.flops;
    }
}

impl Cost {
    pub fn flops_only(flops: u64) -> Cost {
        Cost { params: 0, flops }
    }

    pub fn params_only(params: u64) -> Cost {
        Cost { params, flops: 0 }
    }
}

/// Cost of a plain matrix product (m,k) x (k,n).
pub fn matmul_cost(m: usize, k: usize, n: usize) -> Cost {
    Cost::flops_only(2 * (m * k * n) as u64)
}
