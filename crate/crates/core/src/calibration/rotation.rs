use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{OscarError, Result};
use crate::linalg::{apply_permutation_columns, bit_reversal, hadamard_matrix, EigenDecomposition, Permutation, RealMatrix};

/// Permuted bit-reversal ordering: the coordinate with the `k`-th largest
/// eigenvalue is placed at output position `β(k)`, i.e. `P[:, β(k)] = e_{σ(k)}`.
///
/// Ties in `eigenvalues` are ranked by ascending index.
pub fn pbr_permutation(eigenvalues: &[f64], d: usize) -> Result<Permutation> {
    if eigenvalues.len() != d {
        return Err(OscarError::shape(format!(
            "{} eigenvalues for dimension {d}",
            eigenvalues.len()
        )));
    }
    let beta = bit_reversal(d)?;
    let mut sigma: Vec<usize> = (0..d).collect();
    sigma.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]));
    let mut map = vec![0; d];
    for (k, &src) in sigma.iter().enumerate() {
        map[beta.source(k)] = src;
    }
    Permutation::from_map(map)
}

/// `R = U·H·P`.
pub fn compose_rotation(basis: &RealMatrix, hadamard: &RealMatrix, perm: &Permutation) -> Result<RealMatrix> {
    let d = basis.rows();
    if basis.shape() != (d, d) || hadamard.shape() != (d, d) || perm.len() != d {
        return Err(OscarError::dim(format!(
            "compose_rotation on {}x{} basis, {}x{} Hadamard, {}-permutation",
            basis.rows(),
            basis.cols(),
            hadamard.rows(),
            hadamard.cols(),
            perm.len()
        )));
    }
    let defect = basis.orthogonality_defect();
    if defect > 1e-6 {
        return Err(OscarError::input(format!("basis is not orthonormal (defect {defect:.3e})")));
    }
    apply_permutation_columns(&basis.matmul(hadamard)?, perm)
}

/// The rotation families compared by the evaluation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationKind {
    /// `I`
    Identity,
    /// `H`
    Hadamard,
    /// `U`
    Eigen,
    /// `U·H`
    EigenHadamard,
    /// `U·H·P_br`
    Oscar,
}

impl RotationKind {
    pub const ALL: [RotationKind; 5] = [
        RotationKind::Identity,
        RotationKind::Hadamard,
        RotationKind::Eigen,
        RotationKind::EigenHadamard,
        RotationKind::Oscar,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RotationKind::Identity => "I",
            RotationKind::Hadamard => "H",
            RotationKind::Eigen => "U",
            RotationKind::EigenHadamard => "U·H",
            RotationKind::Oscar => "U·H·P",
        }
    }

    pub fn build(self, eig: &EigenDecomposition) -> Result<RealMatrix> {
        let d = eig.dim();
        Ok(match self {
            RotationKind::Identity => RealMatrix::identity(d),
            RotationKind::Hadamard => hadamard_matrix(d)?,
            RotationKind::Eigen => eig.vectors().clone(),
            RotationKind::EigenHadamard => eig.vectors().matmul(&hadamard_matrix(d)?)?,
            RotationKind::Oscar => compose_rotation(
                eig.vectors(),
                &hadamard_matrix(d)?,
                &pbr_permutation(eig.values(), d)?,
            )?,
        })
    }
}

impl fmt::Display for RotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RotationKind::Identity => "none",
            RotationKind::Hadamard => "hadamard",
            RotationKind::Eigen => "eigen",
            RotationKind::EigenHadamard => "eigen-hadamard",
            RotationKind::Oscar => "oscar",
        };
        f.write_str(s)
    }
}

impl FromStr for RotationKind {
    type Err = OscarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "identity" => Ok(RotationKind::Identity),
            "hadamard" => Ok(RotationKind::Hadamard),
            "eigen" => Ok(RotationKind::Eigen),
            "eigen-hadamard" => Ok(RotationKind::EigenHadamard),
            "oscar" => Ok(RotationKind::Oscar),
            other => Err(OscarError::input(format!("unknown rotation {other:?}"))),
        }
    }
}

/// Diagonal of `Rᵀ·C·R`.
pub fn rotated_importance(rotation: &RealMatrix, target: &RealMatrix) -> Result<Vec<f64>> {
    Ok(rotation.t_matmul(&target.matmul(rotation)?)?.diagonal())
}

/// `max_i / mean_i` of the rotated importance diagonal; 1.0 means perfectly equal.
pub fn importance_ratio(rotation: &RealMatrix, target: &RealMatrix) -> Result<f64> {
    let diag = rotated_importance(rotation, target)?;
    let mean = diag.iter().sum::<f64>() / diag.len() as f64;
    let max = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(if mean == 0.0 { 1.0 } else { max / mean })
}
