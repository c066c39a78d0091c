use serde::{Deserialize, Serialize};

use crate::calibration::{head_query_covariance, importance_ratio, HeadActivations, RotationKind};
use crate::error::Result;
use crate::linalg::sym_eig;
use crate::quant::{fake_quantize_rows, group_dynamic_range_stats, residual_covariance, QuantConfig};

/// One line of the rotation comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkedExampleRow {
    pub mode: String,
    /// `max |K̃|`.
    pub max_abs: f64,
    /// Mean over groups of `E_t[max − min]`.
    pub mean_group_range: f64,
    /// `max_i / mean_i` of `diag(RᵀC_Q R)`.
    pub importance_ratio: f64,
    /// Unweighted INT2 residual `tr(E_K)`, no clipping.
    pub trace_residual: f64,
}

/// Compares the five rotation families on the keys of one kv-head.
pub fn worked_example_report(head: &HeadActivations, group_size: usize) -> Result<Vec<WorkedExampleRow>> {
    let c_q = head_query_covariance(head)?;
    let eig = sym_eig(&c_q)?;
    let cfg = QuantConfig::int2(group_size);
    cfg.validate_for(head.head_dim())?;
    RotationKind::ALL
        .iter()
        .map(|&kind| {
            let r = kind.build(&eig)?;
            let kr = head.keys.matmul(&r)?;
            let ranges = group_dynamic_range_stats(&kr, group_size)?;
            let e = residual_covariance(&kr, &fake_quantize_rows(&kr, &cfg)?)?;
            Ok(WorkedExampleRow {
                mode: kind.label().to_string(),
                max_abs: ranges.max_abs,
                mean_group_range: ranges.mean,
                importance_ratio: importance_ratio(&r, &c_q)?,
                trace_residual: e.trace(),
            })
        })
        .collect()
}
