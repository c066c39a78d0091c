use serde::{Deserialize, Serialize};

use crate::error::{OscarError, Result};

pub const DEFAULT_SCALE_FLOOR: f64 = 1e-8;

/// Per-group affine quantizer settings for one of the K or V branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    /// Per-token percentile clip ratio in `(0, 1]`.
    pub clip_ratio: f64,
    /// Lower bound applied to every per-group scale.
    pub scale_floor: f64,
    /// Round-trip scales and zeros through bfloat16 before use.
    pub bf16_meta: bool,
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: usize, clip_ratio: f64) -> Result<Self> {
        let cfg = QuantConfig {
            bits,
            group_size,
            clip_ratio,
            scale_floor: DEFAULT_SCALE_FLOOR,
            bf16_meta: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// INT2 at the given group size, no clipping.
    pub fn int2(group_size: usize) -> Self {
        QuantConfig {
            bits: 2,
            group_size,
            clip_ratio: 1.0,
            scale_floor: DEFAULT_SCALE_FLOOR,
            bf16_meta: false,
        }
    }

    pub fn with_clip(mut self, clip_ratio: f64) -> Self {
        self.clip_ratio = clip_ratio;
        self
    }

    pub fn with_bits(mut self, bits: u8) -> Self {
        self.bits = bits;
        self
    }

    pub fn with_bf16_meta(mut self, on: bool) -> Self {
        self.bf16_meta = on;
        self
    }

    #[inline]
    pub fn q_max(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(OscarError::input(format!("bit width {} outside 1..=8", self.bits)));
        }
        if self.group_size == 0 {
            return Err(OscarError::input("group size must be positive"));
        }
        validate_clip_ratio(self.clip_ratio)?;
        if !(self.scale_floor > 0.0 && self.scale_floor.is_finite()) {
            return Err(OscarError::input("scale floor must be a positive finite number"));
        }
        Ok(())
    }

    /// Validates the config against a row width `d`.
    pub fn validate_for(&self, d: usize) -> Result<()> {
        self.validate()?;
        if !d.is_multiple_of(self.group_size) {
            return Err(OscarError::dim(format!(
                "group size {} does not divide head dimension {d}",
                self.group_size
            )));
        }
        Ok(())
    }

    pub fn groups(&self, d: usize) -> usize {
        d / self.group_size
    }
}

pub(crate) fn validate_clip_ratio(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(OscarError::input(format!("clip ratio {rho} outside (0, 1]")))
    }
}
