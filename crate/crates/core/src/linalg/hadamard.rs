//! Normalized Walsh-Hadamard operator in natural (Sylvester) ordering.

use super::RealMatrix;
use crate::error::{OscarError, Result};

pub(crate) fn require_power_of_two(d: usize, what: &str) -> Result<u32> {
    if d == 0 || !d.is_power_of_two() {
        return Err(OscarError::dim(format!("{what} must be a power of two, got {d}")));
    }
    Ok(d.trailing_zeros())
}

/// Builds `H_d` by the recursion `H_{2m} = (1/√2)·[[H_m, H_m], [H_m, −H_m]]`, `H_1 = [1]`.
pub fn hadamard_matrix(d: usize) -> Result<RealMatrix> {
    require_power_of_two(d, "Hadamard size")?;
    let mut h = RealMatrix::identity(1);
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut m = 1;
    while m < d {
        let prev = h;
        h = RealMatrix::from_fn(2 * m, 2 * m, |i, j| {
            let v = prev[(i % m, j % m)] * inv_sqrt2;
            if i >= m && j >= m {
                -v
            } else {
                v
            }
        });
        m *= 2;
    }
    // Repeated 1/√2 products drift by an ulp or two; the exact magnitude is known.
    let mag = (1.0 / d as f64).sqrt();
    Ok(h.map(|v| mag.copysign(v)))
}

/// In-place fast transform `x ← x·H_d` in O(d log d).
///
/// Since `H_d` is symmetric this also computes `H_d·x`.
pub fn fwht_normalized(x: &mut [f64]) -> Result<()> {
    require_power_of_two(x.len(), "transform length")?;
    let n = x.len();
    let mut half = 1;
    while half < n {
        for block in x.chunks_exact_mut(2 * half) {
            let (lo, hi) = block.split_at_mut(half);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (s, t) = (*a + *b, *a - *b);
                *a = s;
                *b = t;
            }
        }
        half *= 2;
    }
    let norm = 1.0 / (n as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= norm);
    Ok(())
}
