//! Mixed-precision KV cache: full-precision sink ∥ packed INT2 history ∥ full-precision recent.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::attention::{segmented_attention, AttentionSegment};
use crate::error::{OscarError, Result};
use crate::linalg::RealMatrix;
use crate::quant::{clip_and_quantize, dequantize_row, QuantConfig, QuantizedCacheRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheLayout {
    /// Leading tokens kept at full precision.
    pub sink: usize,
    /// Most recent tokens kept at full precision.
    pub recent: usize,
}

impl CacheLayout {
    pub fn new(sink: usize, recent: usize) -> Self {
        CacheLayout { sink, recent }
    }

    pub fn protected(&self) -> usize {
        self.sink + self.recent
    }
}

impl Default for CacheLayout {
    fn default() -> Self {
        CacheLayout { sink: 64, recent: 256 }
    }
}

/// How demoted rows are stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CacheCodec {
    Affine { key: QuantConfig, value: QuantConfig },
    /// Keep rotated rows exactly; isolates the rotation path from quantization.
    Passthrough,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredRow {
    Packed(QuantizedCacheRow),
    Exact(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub position: usize,
    pub key: StoredRow,
    pub value: StoredRow,
}

/// Which token positions each segment holds, as half-open ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub sink: Range<usize>,
    pub history: Range<usize>,
    pub recent: Range<usize>,
}

impl Partition {
    /// True when the three ranges tile `0..t` in order.
    pub fn tiles(&self, t: usize) -> bool {
        self.sink.start == 0
            && self.sink.end == self.history.start
            && self.history.end == self.recent.start
            && self.recent.end == t
    }
}

/// State of one request's cache for one kv-head.
#[derive(Debug, Clone)]
pub struct KvCacheState {
    layout: CacheLayout,
    codec: CacheCodec,
    head_dim: usize,
    key_rotation: RealMatrix,
    value_rotation: RealMatrix,
    sink_keys: Vec<f64>,
    sink_values: Vec<f64>,
    recent_keys: Vec<f64>,
    recent_values: Vec<f64>,
    /// Rotated copies of the recent rows, waiting for demotion.
    staging: VecDeque<(Vec<f64>, Vec<f64>)>,
    history: Vec<HistoryEntry>,
    // Rows are immutable once demoted, so their dequantized, rotated-back form is
    // cached here instead of being rebuilt at every step.
    history_keys: Vec<f64>,
    history_values: Vec<f64>,
    position: usize,
}

impl KvCacheState {
    pub fn new(layout: CacheLayout, codec: CacheCodec, key_rotation: RealMatrix, value_rotation: RealMatrix) -> Result<Self> {
        let d = key_rotation.rows();
        if key_rotation.shape() != (d, d) || value_rotation.shape() != (d, d) {
            return Err(OscarError::dim("cache rotations must be square and of equal size"));
        }
        if let CacheCodec::Affine { key, value } = &codec {
            key.validate_for(d)?;
            value.validate_for(d)?;
        }
        Ok(KvCacheState {
            layout,
            codec,
            head_dim: d,
            key_rotation,
            value_rotation,
            sink_keys: Vec::new(),
            sink_values: Vec::new(),
            recent_keys: Vec::new(),
            recent_values: Vec::new(),
            staging: VecDeque::new(),
            history: Vec::new(),
            history_keys: Vec::new(),
            history_values: Vec::new(),
            position: 0,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn layout(&self) -> CacheLayout {
        self.layout
    }

    /// Number of tokens written so far.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn sink_len(&self) -> usize {
        self.sink_keys.len() / self.head_dim
    }

    pub fn recent_len(&self) -> usize {
        self.recent_keys.len() / self.head_dim
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn staging_len(&self) -> usize {
        self.staging.len()
    }

    pub fn partition(&self) -> Partition {
        let s = self.sink_len();
        let h = s + self.history_len();
        Partition {
            sink: 0..s,
            history: s..h,
            recent: h..h + self.recent_len(),
        }
    }

    /// Writes positions `position..position + n` from a prompt in one batch.
    pub fn prefill(&mut self, keys: &RealMatrix, values: &RealMatrix) -> Result<()> {
        let d = self.head_dim;
        if keys.rows() == 0 {
            return Err(OscarError::input("prefill needs at least one token"));
        }
        if keys.cols() != d || values.shape() != keys.shape() {
            return Err(OscarError::shape("prefill tensors do not match the cache head dimension"));
        }
        let n = keys.rows();
        let sink_take = if self.history.is_empty() && self.recent_len() == 0 {
            self.layout.sink.saturating_sub(self.sink_len()).min(n)
        } else {
            0
        };
        for i in 0..sink_take {
            self.sink_keys.extend_from_slice(keys.row(i));
            self.sink_values.extend_from_slice(values.row(i));
        }
        self.position += sink_take;
        if sink_take == n {
            return Ok(());
        }
        let rest_k = keys.row_range(sink_take, n).matmul(&self.key_rotation)?;
        let rest_v = values.row_range(sink_take, n).matmul(&self.value_rotation)?;
        for i in sink_take..n {
            let r = i - sink_take;
            self.push_recent(keys.row(i), values.row(i), rest_k.row(r).to_vec(), rest_v.row(r).to_vec())?;
        }
        Ok(())
    }

    /// Appends one token, demoting the oldest recent token when the window overflows.
    pub fn append(&mut self, k: &[f64], v: &[f64]) -> Result<()> {
        let d = self.head_dim;
        if k.len() != d || v.len() != d {
            return Err(OscarError::shape(format!("token rows must have length {d}")));
        }
        if self.sink_len() < self.layout.sink && self.history.is_empty() && self.recent_len() == 0 {
            self.sink_keys.extend_from_slice(k);
            self.sink_values.extend_from_slice(v);
            self.position += 1;
            return Ok(());
        }
        let rk = self.key_rotation.vec_mul(k)?;
        let rv = self.value_rotation.vec_mul(v)?;
        self.push_recent(k, v, rk, rv)
    }

    fn push_recent(&mut self, k: &[f64], v: &[f64], rk: Vec<f64>, rv: Vec<f64>) -> Result<()> {
        self.recent_keys.extend_from_slice(k);
        self.recent_values.extend_from_slice(v);
        self.staging.push_back((rk, rv));
        self.position += 1;
        if self.recent_len() > self.layout.recent {
            let d = self.head_dim;
            self.recent_keys.drain(..d);
            self.recent_values.drain(..d);
            let (rk, rv) = self.staging.pop_front().expect("staging mirrors the recent window");
            let position = self.sink_len() + self.history.len();
            self.quantize_and_write(rk, rv, position)?;
        }
        Ok(())
    }

    fn quantize_and_write(&mut self, rk: Vec<f64>, rv: Vec<f64>, position: usize) -> Result<()> {
        let (key, value, kd, vd) = match &self.codec {
            CacheCodec::Affine { key, value } => {
                let qk = clip_and_quantize(&rk, key)?;
                let qv = clip_and_quantize(&rv, value)?;
                let kd = dequantize_row(&qk, key)?;
                let vd = dequantize_row(&qv, value)?;
                (StoredRow::Packed(qk), StoredRow::Packed(qv), kd, vd)
            }
            CacheCodec::Passthrough => (StoredRow::Exact(rk.clone()), StoredRow::Exact(rv.clone()), rk, rv),
        };
        // Back to the original frame: x̂ = Q(x̃)·Rᵀ.
        let back_k = self.key_rotation.mul_vec(&kd)?;
        let back_v = self.value_rotation.mul_vec(&vd)?;
        self.history_keys.extend_from_slice(&back_k);
        self.history_values.extend_from_slice(&back_v);
        self.history.push(HistoryEntry { position, key, value });
        Ok(())
    }

    /// Attention output of query `q` against everything cached so far.
    pub fn attend(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.head_dim {
            return Err(OscarError::shape("query length differs from head dimension"));
        }
        let segments = [
            AttentionSegment::new(&self.sink_keys, &self.sink_values),
            AttentionSegment::new(&self.history_keys, &self.history_values),
            AttentionSegment::new(&self.recent_keys, &self.recent_values),
        ];
        segmented_attention(q, &segments, 1.0 / (self.head_dim as f64).sqrt())
    }

    /// One decode step: append `(k, v)`, then attend with `q`.
    pub fn decode_step(&mut self, q: &[f64], k: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.append(k, v)?;
        self.attend(q)
    }

    /// Keys as attention currently sees them, in position order.
    pub fn materialized_keys(&self) -> RealMatrix {
        self.materialize(&self.sink_keys, &self.history_keys, &self.recent_keys)
    }

    pub fn materialized_values(&self) -> RealMatrix {
        self.materialize(&self.sink_values, &self.history_values, &self.recent_values)
    }

    fn materialize(&self, sink: &[f64], hist: &[f64], recent: &[f64]) -> RealMatrix {
        let mut data = Vec::with_capacity(sink.len() + hist.len() + recent.len());
        data.extend_from_slice(sink);
        data.extend_from_slice(hist);
        data.extend_from_slice(recent);
        RealMatrix::from_vec(self.position, self.head_dim, data).expect("cache rows are finite")
    }
}
