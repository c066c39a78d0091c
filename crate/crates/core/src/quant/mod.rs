//! Clipping, per-group affine quantization, bit packing and residual accounting.

mod affine;
mod config;
mod residual;
mod stats;

pub use affine::{
    bf16_truncate, clip_and_quantize, clip_threshold, dequantize_row, fake_quantize, pack_codes,
    packed_len, percentile_clip, quantize_row, unpack_codes, QuantizedCacheRow,
};
pub(crate) use config::validate_clip_ratio;
pub use config::{QuantConfig, DEFAULT_SCALE_FLOOR};
pub use residual::{residual_covariance, weighted_residual, ResidualCovariance};
pub use stats::{effective_bpe, group_dynamic_range_stats, GroupRangeStats};

use crate::error::Result;
use crate::linalg::RealMatrix;

/// Fake-quantizes every row of `x` (clip, quantize, dequantize).
pub fn fake_quantize_rows(x: &RealMatrix, config: &QuantConfig) -> Result<RealMatrix> {
    let mut out = RealMatrix::zeros(x.rows(), x.cols());
    for (i, row) in x.row_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&fake_quantize(row, config)?);
    }
    Ok(out)
}
