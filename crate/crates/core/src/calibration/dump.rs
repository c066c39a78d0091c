use sha2::{Digest, Sha256};

use crate::error::{OscarError, Result};
use crate::linalg::RealMatrix;

/// Calibration tensors of one kv-head: its `g` grouped query heads plus K and V.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadActivations {
    pub queries: Vec<RealMatrix>,
    pub keys: RealMatrix,
    pub values: RealMatrix,
}

impl HeadActivations {
    pub fn tokens(&self) -> usize {
        self.keys.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.keys.cols()
    }

    /// All grouped query rows stacked, `(g·T) × d`.
    pub fn stacked_queries(&self) -> RealMatrix {
        let parts: Vec<&RealMatrix> = self.queries.iter().collect();
        RealMatrix::vstack(&parts).expect("query heads share the head dimension")
    }

    /// The first `n` tokens of every tensor.
    pub fn truncated(&self, n: usize) -> HeadActivations {
        HeadActivations {
            queries: self.queries.iter().map(|q| q.row_range(0, n)).collect(),
            keys: self.keys.row_range(0, n),
            values: self.values.row_range(0, n),
        }
    }
}

/// Per (layer, kv-head) calibration activations with GQA metadata.
///
/// Heads are stored layer-major: slot `layer · kv_heads + head`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    layers: usize,
    kv_heads: usize,
    gqa_ratio: usize,
    head_dim: usize,
    tokens: usize,
    heads: Vec<HeadActivations>,
}

impl ActivationDump {
    pub fn new(
        layers: usize,
        kv_heads: usize,
        gqa_ratio: usize,
        head_dim: usize,
        heads: Vec<HeadActivations>,
    ) -> Result<Self> {
        if layers == 0 || kv_heads == 0 || gqa_ratio == 0 {
            return Err(OscarError::EmptyDump("no layers, heads or query groups".into()));
        }
        crate::linalg::require_power_of_two(head_dim, "head dimension")?;
        if heads.len() != layers * kv_heads {
            return Err(OscarError::shape(format!(
                "expected {} head slots, got {}",
                layers * kv_heads,
                heads.len()
            )));
        }
        let tokens = heads[0].tokens();
        if tokens == 0 {
            return Err(OscarError::EmptyDump("T = 0 tokens".into()));
        }
        for (slot, h) in heads.iter().enumerate() {
            if h.queries.len() != gqa_ratio {
                return Err(OscarError::shape(format!(
                    "slot {slot}: {} query heads, GQA ratio is {gqa_ratio}",
                    h.queries.len()
                )));
            }
            let all = h.queries.iter().chain([&h.keys, &h.values]);
            for m in all {
                if m.shape() != (tokens, head_dim) {
                    return Err(OscarError::shape(format!(
                        "slot {slot}: tensor is {}x{}, expected {tokens}x{head_dim}",
                        m.rows(),
                        m.cols()
                    )));
                }
            }
        }
        Ok(ActivationDump {
            layers,
            kv_heads,
            gqa_ratio,
            head_dim,
            tokens,
            heads,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn gqa_ratio(&self) -> usize {
        self.gqa_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head(&self, layer: usize, head: usize) -> Result<&HeadActivations> {
        if layer >= self.layers || head >= self.kv_heads {
            return Err(OscarError::input(format!(
                "no slot (layer {layer}, head {head}) in a {}x{} dump",
                self.layers, self.kv_heads
            )));
        }
        Ok(&self.heads[layer * self.kv_heads + head])
    }

    pub fn layer_heads(&self, layer: usize) -> Result<&[HeadActivations]> {
        if layer >= self.layers {
            return Err(OscarError::input(format!("no layer {layer}")));
        }
        Ok(&self.heads[layer * self.kv_heads..(layer + 1) * self.kv_heads])
    }

    pub fn heads(&self) -> &[HeadActivations] {
        &self.heads
    }

    /// SHA-256 over the shape header and the little-endian `f32` image of every tensor.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.layers, self.kv_heads, self.gqa_ratio, self.head_dim, self.tokens] {
            h.update((v as u64).to_le_bytes());
        }
        for head in &self.heads {
            for m in head.queries.iter().chain([&head.keys, &head.values]) {
                for &x in m.as_slice() {
                    h.update((x as f32).to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(t: usize, d: usize, g: usize, fill: f64) -> HeadActivations {
        HeadActivations {
            queries: (0..g).map(|_| RealMatrix::from_fn(t, d, |_, _| fill)).collect(),
            keys: RealMatrix::from_fn(t, d, |i, _| i as f64),
            values: RealMatrix::from_fn(t, d, |_, j| j as f64),
        }
    }

    #[test]
    fn validates_shapes() {
        assert!(ActivationDump::new(1, 1, 2, 4, vec![head(3, 4, 2, 1.0)]).is_ok());
        assert!(ActivationDump::new(1, 1, 2, 6, vec![head(3, 6, 2, 1.0)]).is_err());
        assert!(ActivationDump::new(1, 1, 3, 4, vec![head(3, 4, 2, 1.0)]).is_err());
        assert!(ActivationDump::new(1, 2, 2, 4, vec![head(3, 4, 2, 1.0)]).is_err());
        assert!(matches!(
            ActivationDump::new(1, 1, 2, 4, vec![head(0, 4, 2, 1.0)]),
            Err(OscarError::EmptyDump(_))
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ActivationDump::new(1, 1, 1, 4, vec![head(2, 4, 1, 1.0)]).unwrap();
        let b = ActivationDump::new(1, 1, 1, 4, vec![head(2, 4, 1, 2.0)]).unwrap();
        assert_eq!(a.content_hash(), a.clone().content_hash());
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }
}
