use serde::{Deserialize, Serialize};

use crate::error::{OscarError, Result};
use crate::linalg::RealMatrix;

/// Dynamic range seen by a per-group quantizer over a block of rotated rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRangeStats {
    /// `E_t[max_{i∈g} x_{t,i} − min_{i∈g} x_{t,i}]` for each group `g`.
    pub per_group: Vec<f64>,
    /// Average of `per_group`.
    pub mean: f64,
    /// Largest `|x|` over the whole block.
    pub max_abs: f64,
}

pub fn group_dynamic_range_stats(x: &RealMatrix, group_size: usize) -> Result<GroupRangeStats> {
    if group_size == 0 || !x.cols().is_multiple_of(group_size) {
        return Err(OscarError::dim(format!(
            "group size {group_size} does not divide {}",
            x.cols()
        )));
    }
    let groups = x.cols() / group_size;
    let mut per_group = vec![0.0; groups];
    for row in x.row_iter() {
        for (acc, g) in per_group.iter_mut().zip(row.chunks_exact(group_size)) {
            let (lo, hi) = g
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            *acc += hi - lo;
        }
    }
    let tokens = x.rows().max(1) as f64;
    per_group.iter_mut().for_each(|v| *v /= tokens);
    let mean = if groups == 0 {
        0.0
    } else {
        per_group.iter().sum::<f64>() / groups as f64
    };
    Ok(GroupRangeStats {
        per_group,
        mean,
        max_abs: x.max_abs(),
    })
}

/// Effective stored bits per cache element at context length `context`.
///
/// Compressed tokens pay `bits + meta_bits/group_size`; the `protected` sink and
/// recent tokens are kept at 16 bits.
pub fn effective_bpe(bits: u8, group_size: usize, meta_bits: u32, protected: usize, context: usize) -> Result<f64> {
    if group_size == 0 {
        return Err(OscarError::input("group size must be positive"));
    }
    if context <= protected {
        return Err(OscarError::input(format!(
            "context length {context} must exceed the {protected} protected tokens"
        )));
    }
    let f = protected as f64 / context as f64;
    let compressed = bits as f64 + meta_bits as f64 / group_size as f64;
    Ok((1.0 - f) * compressed + f * 16.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_by_hand() {
        let x = RealMatrix::from_fn(6, 8, |_, _| 2.5);
        let s = group_dynamic_range_stats(&x, 4).unwrap();
        assert_eq!(s.per_group, vec![0.0, 0.0]);

        let x = RealMatrix::from_fn(1, 8, |_, j| j as f64);
        let s = group_dynamic_range_stats(&x, 4).unwrap();
        assert_eq!(s.per_group, vec![3.0, 3.0]);
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.max_abs, 7.0);
        assert!(group_dynamic_range_stats(&x, 3).is_err());
    }

    #[test]
    fn bpe_operating_points() {
        assert_eq!(effective_bpe(2, 128, 32, 0, 131072).unwrap(), 2.25);
        let b = effective_bpe(2, 128, 32, 320, 131072).unwrap();
        assert!((b - 2.283_569_335_937_5).abs() < 1e-12);
        let b = effective_bpe(2, 128, 32, 320, 32768).unwrap();
        assert!((b - 2.384_277_343_75).abs() < 1e-12);
        assert!(effective_bpe(2, 128, 32, 320, 320).is_err());
    }
}
