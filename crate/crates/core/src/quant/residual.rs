use crate::error::{OscarError, Result};
use crate::linalg::RealMatrix;

/// `E = Σ_j e_jᵀ e_j` over token residuals `e_j = x̂_j − x_j` in the rotated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCovariance {
    pub matrix: RealMatrix,
    pub tokens: usize,
}

impl ResidualCovariance {
    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// `tr(M·E)` for a symmetric importance metric `M`.
    pub fn weighted_trace(&self, metric: &RealMatrix) -> Result<f64> {
        if metric.shape() != self.matrix.shape() {
            return Err(OscarError::shape("importance metric and residual differ in size"));
        }
        Ok(metric
            .as_slice()
            .iter()
            .zip(self.matrix.as_slice())
            .map(|(m, e)| m * e)
            .sum())
    }
}

pub fn residual_covariance(original: &RealMatrix, reconstructed: &RealMatrix) -> Result<ResidualCovariance> {
    if original.shape() != reconstructed.shape() {
        return Err(OscarError::shape(format!(
            "residual of {}x{} against {}x{}",
            original.rows(),
            original.cols(),
            reconstructed.rows(),
            reconstructed.cols()
        )));
    }
    let residual = reconstructed.sub(original)?;
    Ok(ResidualCovariance {
        matrix: residual.gram(),
        tokens: original.rows(),
    })
}

/// `Σ_j e_j·M·e_jᵀ`, equal to `tr(M·E)` without forming `E`.
pub fn weighted_residual(original: &RealMatrix, reconstructed: &RealMatrix, metric: &RealMatrix) -> Result<f64> {
    if original.shape() != reconstructed.shape() || metric.shape() != (original.cols(), original.cols()) {
        return Err(OscarError::shape("weighted residual shapes disagree"));
    }
    let mut total = 0.0;
    let mut e = vec![0.0; original.cols()];
    for (x, y) in original.row_iter().zip(reconstructed.row_iter()) {
        e.iter_mut().zip(x.iter().zip(y)).for_each(|(e, (a, b))| *e = b - a);
        let me = metric.vec_mul(&e)?;
        total += crate::linalg::dot(&me, &e);
    }
    Ok(total)
}
