use super::hadamard::require_power_of_two;
use super::RealMatrix;
use crate::error::{OscarError, Result};

/// A bijection on `{0, …, d−1}`.
///
/// Read as a column permutation: the matrix `P` has `P[:, j] = e_{map[j]}`, so
/// `(X·P)[:, j] = X[:, map[j]]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn identity(d: usize) -> Self {
        Permutation {
            map: (0..d).collect(),
        }
    }

    pub fn from_map(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &m in &map {
            if m >= map.len() || std::mem::replace(&mut seen[m], true) {
                return Err(OscarError::input(format!(
                    "{map:?} is not a permutation of 0..{}",
                    map.len()
                )));
            }
        }
        Ok(Permutation { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    /// Source coordinate feeding output position `j`.
    #[inline]
    pub fn source(&self, j: usize) -> usize {
        self.map[j]
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.map.len()];
        for (j, &m) in self.map.iter().enumerate() {
            inv[m] = j;
        }
        Permutation { map: inv }
    }

    /// `self ∘ other`, i.e. `j ↦ self(other(j))`.
    pub fn compose(&self, other: &Permutation) -> Result<Permutation> {
        if self.len() != other.len() {
            return Err(OscarError::shape("composing permutations of different sizes"));
        }
        Ok(Permutation {
            map: other.map.iter().map(|&j| self.map[j]).collect(),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn to_matrix(&self) -> RealMatrix {
        let d = self.map.len();
        let mut p = RealMatrix::zeros(d, d);
        for (j, &m) in self.map.iter().enumerate() {
            p[(m, j)] = 1.0;
        }
        p
    }

    pub fn permute_slice<T: Copy>(&self, x: &[T]) -> Vec<T> {
        self.map.iter().map(|&m| x[m]).collect()
    }
}

/// `β(k)`: the `log₂ d`-bit reversal of `k`.
pub fn bit_reversal(d: usize) -> Result<Permutation> {
    let bits = require_power_of_two(d, "bit-reversal size")?;
    let map = (0..d)
        .map(|k| {
            if bits == 0 {
                0
            } else {
                k.reverse_bits() >> (usize::BITS - bits)
            }
        })
        .collect();
    Ok(Permutation { map })
}

/// Returns `X·P`: output column `j` is input column `p.source(j)`.
pub fn apply_permutation_columns(x: &RealMatrix, p: &Permutation) -> Result<RealMatrix> {
    if x.cols() != p.len() {
        return Err(OscarError::shape(format!(
            "permutation of size {} on a matrix with {} columns",
            p.len(),
            x.cols()
        )));
    }
    Ok(RealMatrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, p.source(j))]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_reversals() {
        assert_eq!(bit_reversal(1).unwrap().as_slice(), &[0]);
        assert_eq!(bit_reversal(2).unwrap().as_slice(), &[0, 1]);
        assert_eq!(bit_reversal(8).unwrap().as_slice(), &[0, 4, 2, 6, 1, 5, 3, 7]);
        let b = bit_reversal(128).unwrap();
        assert_eq!((b.source(1), b.source(2), b.source(3)), (64, 32, 96));
        assert!(bit_reversal(12).is_err());
    }

    #[test]
    fn reversal_is_an_involution() {
        let mut d = 1;
        while d <= 4096 {
            let b = bit_reversal(d).unwrap();
            assert!(b.compose(&b).unwrap().is_identity(), "d={d}");
            d *= 2;
        }
    }

    #[test]
    fn matrix_form_agrees_with_column_gather() {
        let p = Permutation::from_map(vec![2, 0, 3, 1]).unwrap();
        let x = RealMatrix::from_fn(3, 4, |i, j| (10 * i + j) as f64);
        let gathered = apply_permutation_columns(&x, &p).unwrap();
        assert_eq!(gathered, x.matmul(&p.to_matrix()).unwrap());
        assert_eq!(gathered.row(1), &[12.0, 10.0, 13.0, 11.0]);
        let back = apply_permutation_columns(&gathered, &p.inverse()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn rejects_non_bijections() {
        assert!(Permutation::from_map(vec![0, 0, 1]).is_err());
        assert!(Permutation::from_map(vec![0, 3]).is_err());
    }
}
