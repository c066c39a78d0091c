//! Clip-ratio selection by exhaustive grid search on the frozen-error surrogate.

use crate::error::{OscarError, Result};
use crate::linalg::dot;
use crate::linalg::RealMatrix;
use crate::quant::{fake_quantize, validate_clip_ratio, QuantConfig};

pub const DEFAULT_CLIP_GRID: [f64; 5] = [0.88, 0.92, 0.96, 0.98, 1.0];

/// Rotated calibration rows of one head and the matching importance metric `RᵀCR`.
#[derive(Debug, Clone, Copy)]
pub struct ClipProblem<'a> {
    pub rotated: &'a RealMatrix,
    pub metric: &'a RealMatrix,
}

/// `tr(M·E(ρ))`: importance-weighted residual of clip+quantize against the unclipped rows.
pub fn clip_surrogate(problem: &ClipProblem<'_>, config: &QuantConfig) -> Result<f64> {
    let d = problem.rotated.cols();
    if problem.metric.shape() != (d, d) {
        return Err(OscarError::shape("importance metric does not match row width"));
    }
    let mut total = 0.0;
    let mut e = vec![0.0; d];
    for row in problem.rotated.row_iter() {
        let recon = fake_quantize(row, config)?;
        e.iter_mut()
            .zip(recon.iter().zip(row))
            .for_each(|(e, (r, x))| *e = r - x);
        total += dot(&problem.metric.vec_mul(&e)?, &e);
    }
    Ok(total)
}

/// Surrogate per candidate, summed over all problems.
fn sweep(problems: &[ClipProblem<'_>], config: &QuantConfig, grid: &[f64]) -> Result<Vec<f64>> {
    grid.iter()
        .map(|&rho| {
            let cfg = config.with_clip(rho);
            problems.iter().map(|p| clip_surrogate(p, &cfg)).sum()
        })
        .collect()
}

/// Picks `(ρ_K, ρ_V)` from `grid × grid` minimizing the summed key and value surrogates.
///
/// Exact ties go to the larger ratio (less clipping).
pub fn calibrate_clip(
    keys: &[ClipProblem<'_>],
    values: &[ClipProblem<'_>],
    key_config: &QuantConfig,
    value_config: &QuantConfig,
    grid: &[f64],
) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(OscarError::EmptyGrid);
    }
    for &rho in grid {
        validate_clip_ratio(rho)?;
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let grid: Vec<f64> = order.iter().map(|&i| grid[i]).collect();

    let key_loss = sweep(keys, key_config, &grid)?;
    let value_loss = sweep(values, value_config, &grid)?;
    let mut best = (f64::INFINITY, 0, 0);
    for (i, kl) in key_loss.iter().enumerate() {
        for (j, vl) in value_loss.iter().enumerate() {
            if kl + vl < best.0 {
                best = (kl + vl, i, j);
            }
        }
    }
    Ok((grid[best.1], grid[best.2]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_and_empty_grids() {
        let x = RealMatrix::from_fn(4, 8, |i, j| ((i * 8 + j) as f64).sin());
        let m = RealMatrix::identity(8);
        let p = [ClipProblem { rotated: &x, metric: &m }];
        let cfg = QuantConfig::int2(4);
        assert_eq!(calibrate_clip(&p, &p, &cfg, &cfg, &[1.0]).unwrap(), (1.0, 1.0));
        assert!(matches!(calibrate_clip(&p, &p, &cfg, &cfg, &[]), Err(OscarError::EmptyGrid)));
        assert!(calibrate_clip(&p, &p, &cfg, &cfg, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn grid_aligned_rows_never_clip() {
        // Every group holds the four INT2 levels, so ρ = 1 reconstructs exactly and
        // any clipping only adds error.
        let levels = [-1.5, -0.5, 0.5, 1.5];
        let x = RealMatrix::from_fn(16, 32, |i, j| {
            levels[(i + 3 * j) % 4] * (1.0 + (j / 4) as f64) * (1.0 + (i % 3) as f64)
        });
        let m = RealMatrix::identity(32);
        let p = [ClipProblem { rotated: &x, metric: &m }];
        let cfg = QuantConfig::int2(4);
        assert_eq!(clip_surrogate(&p[0], &cfg).unwrap(), 0.0);
        assert!(clip_surrogate(&p[0], &cfg.with_clip(0.9)).unwrap() > 0.0);
        assert_eq!(calibrate_clip(&p, &p, &cfg, &cfg, &[0.9, 1.0]).unwrap(), (1.0, 1.0));
    }
}
