//! Offline calibration of attention-aware rotations and clip thresholds.

mod bundle;
mod clip;
mod covariance;
mod dump;
mod rotation;

pub use bundle::{
    calibrate_bundle, key_importance, CalibrationOptions, ClipScope, Provenance, RotationBundle, RotationSlot,
    SlotSide,
};
pub use clip::{calibrate_clip, clip_surrogate, ClipProblem, DEFAULT_CLIP_GRID};
pub use covariance::{
    attention_apply, estimate_query_covariance, estimate_score_value_covariance, estimate_value_covariance,
    head_query_covariance, head_score_value_covariance, CovarianceTarget, SharingMode, TargetKind,
};
pub use dump::{ActivationDump, HeadActivations};
pub use rotation::{compose_rotation, importance_ratio, pbr_permutation, rotated_importance, RotationKind};
