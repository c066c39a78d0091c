//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use super::RealMatrix;
use crate::error::{OscarError, Result};

/// Inputs may be asymmetric by at most this much (absolute) before being rejected.
pub const SYMMETRY_TOLERANCE: f64 = 1e-7;
/// Sweeps stop once every off-diagonal entry is below `CONVERGENCE_FACTOR · ‖A‖_F`.
pub const CONVERGENCE_FACTOR: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 100;

/// `A = U·diag(Λ)·Uᵀ` with eigenvalues in descending order.
///
/// Each eigenvector column is sign-normalized so that its largest-magnitude entry
/// (lowest index on ties) is positive. Repeated eigenvalues keep the order in which
/// the Jacobi sweep left them, so their eigenvectors are only one valid choice.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    vectors: RealMatrix,
    values: Vec<f64>,
}

impl EigenDecomposition {
    /// Eigenvectors in columns.
    pub fn vectors(&self) -> &RealMatrix {
        &self.vectors
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn reconstruct(&self) -> RealMatrix {
        let d = self.dim();
        let scaled = RealMatrix::from_fn(d, d, |i, j| self.vectors[(i, j)] * self.values[j]);
        scaled.matmul_t(&self.vectors).expect("square factors")
    }

    pub fn into_parts(self) -> (RealMatrix, Vec<f64>) {
        (self.vectors, self.values)
    }
}

pub fn sym_eig(a: &RealMatrix) -> Result<EigenDecomposition> {
    if !a.is_square() {
        return Err(OscarError::dim(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOLERANCE {
        return Err(OscarError::input(format!(
            "matrix is not symmetric (max |a_ij - a_ji| = {asym:.3e})"
        )));
    }
    let n = a.rows();
    let mut m = a.clone();
    m.symmetrize();
    let tol = CONVERGENCE_FACTOR * m.frobenius_norm();
    let mut v = RealMatrix::identity(n);

    let mut sweep = 0;
    loop {
        let off = max_off_diagonal(&m);
        if off <= tol {
            break;
        }
        if sweep == MAX_SWEEPS {
            return Err(OscarError::Convergence {
                sweeps: sweep,
                off_diagonal: off,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut m, &mut v, p, q);
            }
        }
        sweep += 1;
    }

    let raw: Vec<f64> = m.diagonal();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal eigenvalues stay in ascending original index.
    order.sort_by(|&i, &j| raw[j].total_cmp(&raw[i]));

    let mut vectors = RealMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        normalize_sign(&mut col);
        vectors.set_column(dst, &col);
        values.push(raw[src]);
    }
    Ok(EigenDecomposition { vectors, values })
}

fn max_off_diagonal(m: &RealMatrix) -> f64 {
    let n = m.rows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max(m[(i, j)].abs());
        }
    }
    worst
}

/// One Jacobi rotation zeroing `m[p][q]`, accumulated into `v`.
fn rotate(m: &mut RealMatrix, v: &mut RealMatrix, p: usize, q: usize) {
    let apq = m[(p, q)];
    if apq == 0.0 {
        return;
    }
    let n = m.rows();
    let app = m[(p, p)];
    let aqq = m[(q, q)];
    let theta = (aqq - app) / (2.0 * apq);
    let t = if theta.abs() > 1e150 {
        0.5 / theta
    } else {
        let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
        sign / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for k in 0..n {
        let akp = m[(k, p)];
        let akq = m[(k, q)];
        m[(k, p)] = c * akp - s * akq;
        m[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = m[(p, k)];
        let aqk = m[(q, k)];
        m[(p, k)] = c * apk - s * aqk;
        m[(q, k)] = s * apk + c * aqk;
    }
    m[(p, p)] = app - t * apq;
    m[(q, q)] = aqq + t * apq;
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

fn normalize_sign(col: &mut [f64]) {
    let mut best = 0;
    for (i, x) in col.iter().enumerate() {
        if x.abs() > col[best].abs() {
            best = i;
        }
    }
    if col.get(best).is_some_and(|&x| x < 0.0) {
        col.iter_mut().for_each(|x| *x = -*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        let e = sym_eig(&RealMatrix::identity(4)).unwrap();
        assert_eq!(e.values(), &[1.0; 4]);
        assert_eq!(e.vectors(), &RealMatrix::identity(4));

        let e = sym_eig(&RealMatrix::from_diagonal(&[2.0, 1.0])).unwrap();
        assert_eq!(e.values(), &[2.0, 1.0]);
        assert_eq!(e.vectors(), &RealMatrix::identity(2));

        let e = sym_eig(&RealMatrix::from_diagonal(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(e.values(), &[3.0, 2.0, 1.0]);
        assert_eq!(e.vectors().column(0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn two_by_two_closed_form() {
        let a = RealMatrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let e = sym_eig(&a).unwrap();
        assert!((e.values()[0] - 3.0).abs() < 1e-14);
        assert!((e.values()[1] - 1.0).abs() < 1e-14);
        let u0 = e.vectors().column(0);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((u0[0] - r).abs() < 1e-14 && (u0[1] - r).abs() < 1e-14);
    }

    #[test]
    fn rejects_asymmetric_and_rectangular() {
        let a = RealMatrix::from_rows(&[[1.0, 2.0], [2.1, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&a), Err(OscarError::Input(_))));
        assert!(matches!(sym_eig(&RealMatrix::zeros(2, 3)), Err(OscarError::Dimension(_))));
    }

    #[test]
    fn tiny_asymmetry_is_tolerated() {
        let a = RealMatrix::from_rows(&[[1.0, 0.5], [0.5 + 5e-8, 1.0]]).unwrap();
        assert!(sym_eig(&a).is_ok());
    }

    #[test]
    fn zero_matrix() {
        let e = sym_eig(&RealMatrix::zeros(3, 3)).unwrap();
        assert_eq!(e.values(), &[0.0; 3]);
        assert!(e.vectors().orthogonality_defect() == 0.0);
    }

    #[test]
    fn random_six_by_six_reconstructs() {
        // Fixed LCG keeps this independent of the rand crate.
        let mut state = 0x2545_f491_4f6c_dd1du64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let b = RealMatrix::from_fn(6, 6, |_, _| next());
        let mut a = b.add(&b.transpose()).unwrap();
        a.symmetrize();
        let e = sym_eig(&a).unwrap();
        let err = e.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(err <= 1e-7, "reconstruction error {err}");
        assert!(e.vectors().orthogonality_defect() <= 1e-9);
        assert!(e.values().windows(2).all(|w| w[0] >= w[1]));
    }
}
