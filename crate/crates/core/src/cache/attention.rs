//! Decode attention over a partitioned cache with an online-softmax merge.

use crate::error::{OscarError, Result};
use crate::linalg::dot;

/// A contiguous block of cached rows, `n × d` row-major.
///
/// `bias` is added to each row's logit; `-inf` masks the row out.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSegment<'a> {
    pub keys: &'a [f64],
    pub values: &'a [f64],
    pub bias: Option<&'a [f64]>,
}

impl<'a> AttentionSegment<'a> {
    pub fn new(keys: &'a [f64], values: &'a [f64]) -> Self {
        AttentionSegment { keys, values, bias: None }
    }

    pub fn with_bias(mut self, bias: &'a [f64]) -> Self {
        self.bias = Some(bias);
        self
    }
}

/// Running `(max, normalizer, weighted sum)` of one or more segments.
#[derive(Debug, Clone)]
struct Partial {
    max: f64,
    sum: f64,
    acc: Vec<f64>,
}

impl Partial {
    fn empty(d: usize) -> Self {
        Partial {
            max: f64::NEG_INFINITY,
            sum: 0.0,
            acc: vec![0.0; d],
        }
    }

    fn merge(&mut self, other: Partial) {
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if self.max == f64::NEG_INFINITY {
            *self = other;
            return;
        }
        let m = self.max.max(other.max);
        let a = (self.max - m).exp();
        let b = (other.max - m).exp();
        self.sum = self.sum * a + other.sum * b;
        for (x, y) in self.acc.iter_mut().zip(other.acc) {
            *x = *x * a + y * b;
        }
        self.max = m;
    }
}

fn segment_partial(q: &[f64], seg: &AttentionSegment<'_>, scale: f64) -> Result<Partial> {
    let d = q.len();
    let n = seg.keys.len() / d;
    if seg.keys.len() != n * d || seg.values.len() != seg.keys.len() {
        return Err(OscarError::shape(format!(
            "segment with {} key and {} value entries for head dimension {d}",
            seg.keys.len(),
            seg.values.len()
        )));
    }
    if seg.bias.is_some_and(|b| b.len() != n) {
        return Err(OscarError::shape("segment bias length differs from row count"));
    }
    let logits: Vec<f64> = (0..n)
        .map(|j| {
            let l = dot(q, &seg.keys[j * d..(j + 1) * d]) * scale;
            l + seg.bias.map_or(0.0, |b| b[j])
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = Partial::empty(d);
    if max == f64::NEG_INFINITY {
        return Ok(p);
    }
    p.max = max;
    for (j, &l) in logits.iter().enumerate() {
        let w = (l - max).exp();
        p.sum += w;
        for (a, v) in p.acc.iter_mut().zip(&seg.values[j * d..(j + 1) * d]) {
            *a += w * v;
        }
    }
    Ok(p)
}

/// `softmax(q·Kᵀ·scale + bias)·V` over the concatenation of `segments`, computed
/// segment by segment.
pub fn segmented_attention(q: &[f64], segments: &[AttentionSegment<'_>], scale: f64) -> Result<Vec<f64>> {
    if segments.iter().all(|s| s.keys.is_empty()) {
        return Err(OscarError::input("attention over an empty cache"));
    }
    let mut total = Partial::empty(q.len());
    for seg in segments.iter().filter(|s| !s.keys.is_empty()) {
        total.merge(segment_partial(q, seg, scale)?);
    }
    if total.max == f64::NEG_INFINITY {
        return Err(OscarError::FullyMasked);
    }
    let inv = 1.0 / total.sum;
    Ok(total.acc.into_iter().map(|a| a * inv).collect())
}

/// Single-pass reference over one contiguous block.
pub fn monolithic_attention(q: &[f64], keys: &[f64], values: &[f64], scale: f64) -> Result<Vec<f64>> {
    let d = q.len();
    let n = keys.len() / d;
    let mut logits: Vec<f64> = (0..n).map(|j| dot(q, &keys[j * d..(j + 1) * d]) * scale).collect();
    crate::linalg::softmax_in_place(&mut logits)?;
    let mut out = vec![0.0; d];
    for (j, p) in logits.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(&values[j * d..(j + 1) * d]) {
            *o += p * v;
        }
    }
    Ok(out)
}
