//! Synthetic activation dumps with a power-law query spectrum and planted key outliers.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::{ActivationDump, HeadActivations};
use crate::error::{OscarError, Result};
use crate::linalg::{orthonormalize_columns, random_orthogonal, require_power_of_two, RealMatrix};

/// Spectrum decay applied to keys and values.
const KV_DECAY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub tokens: usize,
    pub head_dim: usize,
    pub kv_heads: usize,
    pub gqa_ratio: usize,
    pub layers: usize,
    /// Key channels scaled by `outlier_scale`.
    pub outlier_channels: usize,
    pub outlier_scale: f64,
    /// Query eigenvalues fall off as `(j + 1)^(-decay)`.
    pub spectrum_decay: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tokens: 512,
            head_dim: 128,
            kv_heads: 2,
            gqa_ratio: 4,
            layers: 1,
            outlier_channels: 4,
            outlier_scale: 10.0,
            spectrum_decay: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        require_power_of_two(self.head_dim, "head dimension")?;
        if self.tokens == 0 || self.kv_heads == 0 || self.gqa_ratio == 0 || self.layers == 0 {
            return Err(OscarError::input("tokens, heads, GQA ratio and layers must be positive"));
        }
        if self.outlier_channels >= self.head_dim {
            return Err(OscarError::input(format!(
                "{} outlier channels do not fit in dimension {}",
                self.outlier_channels, self.head_dim
            )));
        }
        if !(self.outlier_scale.is_finite() && self.outlier_scale > 0.0) {
            return Err(OscarError::input("outlier scale must be positive"));
        }
        if !(self.spectrum_decay.is_finite() && self.spectrum_decay >= 0.0) {
            return Err(OscarError::input("spectrum decay must be non-negative"));
        }
        Ok(())
    }

    /// Population query spectrum, descending with mean 1.
    pub fn query_spectrum(&self) -> Vec<f64> {
        power_law(self.head_dim, self.spectrum_decay)
    }
}

fn power_law(d: usize, decay: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..d).map(|j| ((j + 1) as f64).powf(-decay)).collect();
    let mean = raw.iter().sum::<f64>() / d as f64;
    raw.into_iter().map(|x| x / mean).collect()
}

/// `T × d` rows `Z·diag(√λ)·Wᵀ` with Gaussian `Z`.
fn correlated_rows<R: Rng + ?Sized>(t: usize, spectrum: &[f64], basis: &RealMatrix, rng: &mut R) -> RealMatrix {
    let d = spectrum.len();
    let sqrt: Vec<f64> = spectrum.iter().map(|l| l.sqrt()).collect();
    let z = RealMatrix::from_fn(t, d, |_, j| {
        let g: f64 = StandardNormal.sample(rng);
        g * sqrt[j]
    });
    z.matmul_t(basis).expect("square basis")
}

/// Orthogonal basis whose first columns are the unit vectors of `channels`, completed
/// by a random orthonormal basis of their complement.
fn basis_with_channels<R: Rng + ?Sized>(d: usize, channels: &[usize], rng: &mut R) -> Result<RealMatrix> {
    let m = channels.len();
    let mut g = RealMatrix::from_fn(d, d - m, |_, _| StandardNormal.sample(rng));
    for &c in channels {
        g.row_mut(c).fill(0.0);
    }
    let rest = orthonormalize_columns(&g)?;
    Ok(RealMatrix::from_fn(d, d, |i, j| {
        if j < m {
            (i == channels[j]) as u8 as f64
        } else {
            rest[(i, j - m)]
        }
    }))
}

/// Generates a dump; identical configs give bit-identical dumps.
///
/// Per kv-head the leading query directions are the key outlier channels; apart from that
/// shared channel set the key and value bases are independent random rotations.
pub fn generate(config: &SynthConfig) -> Result<ActivationDump> {
    config.validate()?;
    let (t, d) = (config.tokens, config.head_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let q_spec = config.query_spectrum();
    let kv_spec = power_law(d, KV_DECAY);
    let mut heads = Vec::with_capacity(config.layers * config.kv_heads);
    for _ in 0..config.layers * config.kv_heads {
        let channels = sample(&mut rng, d, config.outlier_channels).into_vec();
        let w = basis_with_channels(d, &channels, &mut rng)?;
        let queries = (0..config.gqa_ratio)
            .map(|_| correlated_rows(t, &q_spec, &w, &mut rng).round_to_f32())
            .collect();
        let w_k = random_orthogonal(d, &mut rng);
        let mut keys = correlated_rows(t, &kv_spec, &w_k, &mut rng);
        for &c in &channels {
            for i in 0..t {
                keys[(i, c)] *= config.outlier_scale;
            }
        }
        let w_v = random_orthogonal(d, &mut rng);
        let values = correlated_rows(t, &kv_spec, &w_v, &mut rng);
        heads.push(HeadActivations {
            queries,
            keys: keys.round_to_f32(),
            values: values.round_to_f32(),
        });
    }
    ActivationDump::new(config.layers, config.kv_heads, config.gqa_ratio, d, heads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            tokens: 64,
            head_dim: 16,
            kv_heads: 2,
            gqa_ratio: 2,
            layers: 2,
            outlier_channels: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn spectrum_has_unit_mean() {
        let s = SynthConfig::default().query_spectrum();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        assert!(s[0] > 10.0);
    }

    #[test]
    fn channel_basis_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = basis_with_channels(16, &[3, 11], &mut rng).unwrap();
        assert!(w.orthogonality_defect() < 1e-12);
        assert_eq!((w[(3, 0)], w[(11, 1)]), (1.0, 1.0));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&SynthConfig { head_dim: 12, ..small() }).is_err());
        assert!(generate(&SynthConfig { outlier_channels: 16, ..small() }).is_err());
        assert!(generate(&SynthConfig { tokens: 0, ..small() }).is_err());
    }
}
