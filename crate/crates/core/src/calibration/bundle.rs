//! Offline calibration: covariance targets → eigenbasis → Hadamard → PBR, then clip ratios.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::clip::{calibrate_clip, ClipProblem, DEFAULT_CLIP_GRID};
use super::covariance::{estimate_query_covariance, estimate_value_covariance, SharingMode};
use super::rotation::{rotated_importance, RotationKind};
use super::ActivationDump;
use crate::error::{OscarError, Result};
use crate::linalg::{sym_eig, EigenDecomposition, RealMatrix};
use crate::quant::QuantConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipScope {
    /// One `(ρ_K, ρ_V)` pair per layer, shared by its heads.
    PerLayer,
    /// One pair for the whole model.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub sharing: SharingMode,
    pub bits: u8,
    pub key_group: usize,
    pub value_group: usize,
    pub clip_grid: Vec<f64>,
    pub clip_scope: ClipScope,
    pub causal: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            sharing: SharingMode::PerHead,
            bits: 2,
            key_group: 128,
            value_group: 128,
            clip_grid: DEFAULT_CLIP_GRID.to_vec(),
            clip_scope: ClipScope::PerLayer,
            causal: true,
        }
    }
}

/// One side (K or V) of a calibrated slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSide {
    /// The composed rotation `U·H·P_br`.
    pub rotation: RealMatrix,
    /// Eigenbasis `U` of the covariance target, kept for ablations.
    pub basis: RealMatrix,
    /// Descending eigenvalues of the target.
    pub spectrum: Vec<f64>,
    pub clip_ratio: f64,
}

impl SlotSide {
    fn from_eigen(eig: EigenDecomposition) -> Result<Self> {
        let rotation = RotationKind::Oscar.build(&eig)?;
        let (basis, spectrum) = eig.into_parts();
        Ok(SlotSide {
            rotation,
            basis,
            spectrum,
            clip_ratio: 1.0,
        })
    }

    /// Target covariance rebuilt from the stored eigenpairs.
    pub fn target(&self) -> RealMatrix {
        let d = self.spectrum.len();
        let scaled = RealMatrix::from_fn(d, d, |i, j| self.basis[(i, j)] * self.spectrum[j]);
        let mut c = scaled.matmul_t(&self.basis).expect("square");
        c.symmetrize();
        c
    }

    /// Rotation for an ablation mode built from the stored eigenbasis.
    pub fn rotation_for(&self, kind: RotationKind) -> Result<RealMatrix> {
        match kind {
            RotationKind::Oscar => Ok(self.rotation.clone()),
            RotationKind::Identity => Ok(RealMatrix::identity(self.spectrum.len())),
            RotationKind::Hadamard => crate::linalg::hadamard_matrix(self.spectrum.len()),
            RotationKind::Eigen => Ok(self.basis.clone()),
            RotationKind::EigenHadamard => self
                .basis
                .matmul(&crate::linalg::hadamard_matrix(self.spectrum.len())?),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationSlot {
    pub layer: usize,
    /// `None` when the rotation is shared across the layer's kv-heads.
    pub head: Option<usize>,
    pub key: SlotSide,
    pub value: SlotSide,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tokens: usize,
    pub dump_hash: String,
}

/// Calibrated rotations and clip ratios for every (layer, kv-head or shared) slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationBundle {
    pub head_dim: usize,
    pub layers: usize,
    pub kv_heads: usize,
    pub sharing: SharingMode,
    pub bits: u8,
    pub key_group: usize,
    pub value_group: usize,
    pub slots: Vec<RotationSlot>,
    pub provenance: Provenance,
}

impl RotationBundle {
    pub fn slot(&self, layer: usize, head: usize) -> Result<&RotationSlot> {
        let idx = match self.sharing {
            SharingMode::PerHead => layer * self.kv_heads + head,
            SharingMode::Shared => layer,
        };
        if layer >= self.layers || head >= self.kv_heads || idx >= self.slots.len() {
            return Err(OscarError::input(format!("bundle has no slot for layer {layer}, head {head}")));
        }
        Ok(&self.slots[idx])
    }

    pub fn key_config(&self, slot: &RotationSlot) -> QuantConfig {
        QuantConfig::int2(self.key_group)
            .with_clip(slot.key.clip_ratio)
            .with_bits(self.bits)
    }

    pub fn value_config(&self, slot: &RotationSlot) -> QuantConfig {
        QuantConfig::int2(self.value_group)
            .with_clip(slot.value.clip_ratio)
            .with_bits(self.bits)
    }

    /// Largest `‖RᵀR − I‖_max` over all stored rotations.
    pub fn max_orthogonality_defect(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| [&s.key.rotation, &s.value.rotation])
            .map(RealMatrix::orthogonality_defect)
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        crate::linalg::require_power_of_two(self.head_dim, "head dimension")?;
        for g in [self.key_group, self.value_group] {
            QuantConfig::int2(g).with_bits(self.bits).validate_for(self.head_dim)?;
        }
        let expected = match self.sharing {
            SharingMode::PerHead => self.layers * self.kv_heads,
            SharingMode::Shared => self.layers,
        };
        if self.slots.len() != expected {
            return Err(OscarError::format(format!(
                "bundle has {} slots, expected {expected}",
                self.slots.len()
            )));
        }
        for s in &self.slots {
            for side in [&s.key, &s.value] {
                crate::quant::validate_clip_ratio(side.clip_ratio)?;
                if side.rotation.shape() != (self.head_dim, self.head_dim) {
                    return Err(OscarError::format("rotation has the wrong size"));
                }
            }
        }
        let defect = self.max_orthogonality_defect();
        if defect > 1e-6 {
            return Err(OscarError::format(format!(
                "stored rotation is not orthogonal (defect {defect:.3e})"
            )));
        }
        Ok(())
    }
}

pub fn calibrate_bundle(dump: &ActivationDump, options: &CalibrationOptions) -> Result<RotationBundle> {
    let key_cfg = QuantConfig::int2(options.key_group).with_bits(options.bits);
    let value_cfg = QuantConfig::int2(options.value_group).with_bits(options.bits);
    key_cfg.validate_for(dump.head_dim())?;
    value_cfg.validate_for(dump.head_dim())?;
    if options.clip_grid.is_empty() {
        return Err(OscarError::EmptyGrid);
    }

    let keys: Vec<(usize, Option<usize>)> = match options.sharing {
        SharingMode::PerHead => (0..dump.layers())
            .flat_map(|l| (0..dump.kv_heads()).map(move |h| (l, Some(h))))
            .collect(),
        SharingMode::Shared => (0..dump.layers()).map(|l| (l, None)).collect(),
    };
    let mut slots: Vec<RotationSlot> = keys
        .par_iter()
        .map(|&(layer, head)| {
            let h = head.unwrap_or(0);
            let cq = estimate_query_covariance(dump, layer, h, options.sharing)?;
            let cs = estimate_value_covariance(dump, layer, h, options.sharing, options.causal)?;
            Ok(RotationSlot {
                layer,
                head,
                key: SlotSide::from_eigen(sym_eig(&cq.matrix)?)?,
                value: SlotSide::from_eigen(sym_eig(&cs.matrix)?)?,
            })
        })
        .collect::<Result<_>>()?;

    // Every (layer, kv-head) contributes its own rotated rows, whichever slot it uses.
    struct Rotated {
        layer: usize,
        keys: RealMatrix,
        key_metric: RealMatrix,
        values: RealMatrix,
        value_metric: RealMatrix,
    }
    let sharing = options.sharing;
    let heads: Vec<(usize, usize)> = (0..dump.layers())
        .flat_map(|l| (0..dump.kv_heads()).map(move |h| (l, h)))
        .collect();
    let rotated: Vec<Rotated> = heads
        .par_iter()
        .map(|&(layer, head)| {
            let slot = &slots[match sharing {
                SharingMode::PerHead => layer * dump.kv_heads() + head,
                SharingMode::Shared => layer,
            }];
            let act = dump.head(layer, head)?;
            Ok(Rotated {
                layer,
                keys: act.keys.matmul(&slot.key.rotation)?,
                key_metric: metric(&slot.key)?,
                values: act.values.matmul(&slot.value.rotation)?,
                value_metric: metric(&slot.value)?,
            })
        })
        .collect::<Result<_>>()?;

    let scopes: Vec<Option<usize>> = match options.clip_scope {
        ClipScope::PerLayer => (0..dump.layers()).map(Some).collect(),
        ClipScope::Global => vec![None],
    };
    let ratios: Vec<(Option<usize>, (f64, f64))> = scopes
        .par_iter()
        .map(|&scope| {
            let members: Vec<&Rotated> = rotated
                .iter()
                .filter(|r| scope.is_none_or(|l| r.layer == l))
                .collect();
            let kp: Vec<ClipProblem<'_>> = members
                .iter()
                .map(|r| ClipProblem { rotated: &r.keys, metric: &r.key_metric })
                .collect();
            let vp: Vec<ClipProblem<'_>> = members
                .iter()
                .map(|r| ClipProblem { rotated: &r.values, metric: &r.value_metric })
                .collect();
            Ok((scope, calibrate_clip(&kp, &vp, &key_cfg, &value_cfg, &options.clip_grid)?))
        })
        .collect::<Result<_>>()?;
    for slot in &mut slots {
        let (_, (rk, rv)) = ratios
            .iter()
            .find(|(scope, _)| scope.is_none_or(|l| l == slot.layer))
            .expect("every layer has a clip scope");
        slot.key.clip_ratio = *rk;
        slot.value.clip_ratio = *rv;
    }

    Ok(RotationBundle {
        head_dim: dump.head_dim(),
        layers: dump.layers(),
        kv_heads: dump.kv_heads(),
        sharing: options.sharing,
        bits: options.bits,
        key_group: options.key_group,
        value_group: options.value_group,
        slots,
        provenance: Provenance {
            tokens: dump.tokens(),
            dump_hash: dump.content_hash(),
        },
    })
}

/// Importance metric `RᵀCR` for one side.
fn metric(side: &SlotSide) -> Result<RealMatrix> {
    let c = side.target();
    let mut m = side.rotation.t_matmul(&c.matmul(&side.rotation)?)?;
    m.symmetrize();
    Ok(m)
}

/// Diagonal of `RᵀCR` for the key side of a slot.
pub fn key_importance(slot: &RotationSlot) -> Result<Vec<f64>> {
    rotated_importance(&slot.key.rotation, &slot.key.target())
}
