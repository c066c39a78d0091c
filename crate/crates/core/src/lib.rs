//! Attention-aware KV-cache rotation calibration and a reference mixed-precision
//! INT2 cache simulator.
//!
//! The pipeline: estimate the query covariance `C_Q` and the score-weighted value
//! covariance `C_S` from calibration activations, rotate keys by `U_Q·H·P_br` and values
//! by `U_S·H·P_br`, then store the middle of the cache as clipped per-group INT2 while
//! sink and recent tokens stay at full precision.

pub mod cache;
pub mod calibration;
pub mod error;
pub mod io;
pub mod linalg;
pub mod quant;
pub mod synth;
pub mod verify;

pub use error::{OscarError, Result};
