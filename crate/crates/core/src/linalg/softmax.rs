use super::RealMatrix;
use crate::error::{OscarError, Result};

/// Stable softmax of one row in place. `-inf` entries are masked out.
///
/// Fails when every entry is masked, since there is nothing to normalize.
pub fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(OscarError::FullyMasked);
    }
    if !max.is_finite() {
        return Err(OscarError::NonFinite("softmax logit".into()));
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
    Ok(())
}

/// Row-wise softmax; with `causal`, row `i` only sees columns `0..=i`.
pub fn masked_softmax_rows(logits: &RealMatrix, causal: bool) -> Result<RealMatrix> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        if causal {
            row.iter_mut().skip(i + 1).for_each(|v| *v = f64::NEG_INFINITY);
        }
        softmax_in_place(row)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let mut r = [0.7, 0.7];
        softmax_in_place(&mut r).unwrap();
        assert_eq!(r, [0.5, 0.5]);

        let mut r = [0.0, 3f64.ln()];
        softmax_in_place(&mut r).unwrap();
        assert!((r[0] - 0.25).abs() < 1e-15 && (r[1] - 0.75).abs() < 1e-15);

        let mut r = [f64::NEG_INFINITY, 2.0, f64::NEG_INFINITY];
        softmax_in_place(&mut r).unwrap();
        assert_eq!(r, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn causal_rows_have_zero_upper_triangle() {
        let l = RealMatrix::from_fn(4, 4, |i, j| (i as f64) - 0.3 * j as f64);
        let s = masked_softmax_rows(&l, true).unwrap();
        assert_eq!(s[(0, 0)], 1.0);
        for i in 0..4 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for j in (i + 1)..4 {
                assert_eq!(s[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut r = [f64::NEG_INFINITY; 3];
        assert!(matches!(softmax_in_place(&mut r), Err(OscarError::FullyMasked)));
        let empty = RealMatrix::zeros(2, 0);
        assert!(masked_softmax_rows(&empty, false).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let mut r = [1000.0, 999.0];
        softmax_in_place(&mut r).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
    }
}
