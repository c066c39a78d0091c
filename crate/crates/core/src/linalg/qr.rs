use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{dot, RealMatrix};
use crate::error::{OscarError, Result};

/// Orthonormalizes the columns of `a` by modified Gram-Schmidt with one
/// re-orthogonalization pass. The implied `R` factor has a positive diagonal.
pub fn orthonormalize_columns(a: &RealMatrix) -> Result<RealMatrix> {
    let (n, k) = a.shape();
    if k > n {
        return Err(OscarError::dim(format!("cannot orthonormalize {k} columns in R^{n}")));
    }
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
    for j in 0..k {
        let (done, rest) = cols.split_at_mut(j);
        let col = &mut rest[0];
        for _ in 0..2 {
            for prev in done.iter() {
                let proj = dot(prev, col);
                col.iter_mut().zip(prev).for_each(|(c, p)| *c -= proj * p);
            }
        }
        let norm = dot(col, col).sqrt();
        if norm < 1e-300 {
            return Err(OscarError::input("rank-deficient input to orthonormalization"));
        }
        col.iter_mut().for_each(|c| *c /= norm);
    }
    let mut q = RealMatrix::zeros(n, k);
    for (j, c) in cols.iter().enumerate() {
        q.set_column(j, c);
    }
    Ok(q)
}

/// `n×k` matrix with orthonormal columns, Haar-distributed via QR of a Gaussian.
pub fn random_orthonormal<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> RealMatrix {
    loop {
        let g = RealMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng));
        if let Ok(q) = orthonormalize_columns(&g) {
            return q;
        }
    }
}

pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> RealMatrix {
    random_orthonormal(n, n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 2, 7, 32, 128] {
            let q = random_orthogonal(n, &mut rng);
            assert!(q.orthogonality_defect() < 1e-12, "n={n}");
        }
        let q = random_orthonormal(10, 3, &mut rng);
        assert_eq!(q.shape(), (10, 3));
        assert!(q.orthogonality_defect() < 1e-12);
    }

    #[test]
    fn rank_deficient_rejected() {
        let a = RealMatrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        assert!(orthonormalize_columns(&a).is_err());
    }
}
