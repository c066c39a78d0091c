//! Attention-aware covariance targets.
//!
//! The key target is the grouped-query second moment `C_Q`; the value target is
//! `C_S = (1/T)·(SV)ᵀ(SV)` where `S` is the causal attention matrix.

use serde::{Deserialize, Serialize};

use super::{ActivationDump, HeadActivations};
use crate::error::{OscarError, Result};
use crate::linalg::{softmax_in_place, sym_eig, RealMatrix};

/// Query rows per softmax block; bounds the score buffer at `BLOCK × T`.
const SCORE_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharingMode {
    /// One rotation per (layer, kv-head).
    PerHead,
    /// One rotation per layer, averaging targets across kv-heads.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Query,
    ScoreValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTarget {
    pub kind: TargetKind,
    pub matrix: RealMatrix,
}

impl CovarianceTarget {
    fn new(kind: TargetKind, mut matrix: RealMatrix) -> Self {
        matrix.symmetrize();
        CovarianceTarget { kind, matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Smallest eigenvalue divided by the trace (zero for a zero target).
    pub fn relative_min_eigenvalue(&self) -> Result<f64> {
        let eig = sym_eig(&self.matrix)?;
        let tr = self.trace();
        let min = eig.values().last().copied().unwrap_or(0.0);
        Ok(if tr == 0.0 { min } else { min / tr })
    }
}

/// `(1/(T·g)) · Σ_i Q_iᵀ Q_i` over the grouped query heads of one kv-head.
pub fn head_query_covariance(head: &HeadActivations) -> Result<RealMatrix> {
    let t = head.tokens();
    if t == 0 || head.queries.is_empty() {
        return Err(OscarError::EmptyDump("no query rows".into()));
    }
    let d = head.head_dim();
    let mut acc = RealMatrix::zeros(d, d);
    for q in &head.queries {
        acc.add_assign_scaled(&q.gram(), 1.0)?;
    }
    Ok(acc.scale(1.0 / (t * head.queries.len()) as f64))
}

/// Key-side target for `(layer, head)`; in shared mode `head` is ignored and the
/// per-head targets of the layer are averaged.
pub fn estimate_query_covariance(
    dump: &ActivationDump,
    layer: usize,
    head: usize,
    mode: SharingMode,
) -> Result<CovarianceTarget> {
    let m = match mode {
        SharingMode::PerHead => head_query_covariance(dump.head(layer, head)?)?,
        SharingMode::Shared => average(dump.layer_heads(layer)?, head_query_covariance)?,
    };
    Ok(CovarianceTarget::new(TargetKind::Query, m))
}

/// `S·X` for `S = softmax_row(Q·Kᵀ/√d + mask)`, computed in row blocks.
pub fn attention_apply(q: &RealMatrix, k: &RealMatrix, x: &RealMatrix, causal: bool) -> Result<RealMatrix> {
    if q.cols() != k.cols() || k.rows() != x.rows() {
        return Err(OscarError::shape(format!(
            "attention over Q {}x{}, K {}x{}, X {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            x.rows(),
            x.cols()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = RealMatrix::zeros(q.rows(), x.cols());
    let mut start = 0;
    while start < q.rows() {
        let end = (start + SCORE_BLOCK).min(q.rows());
        let block = q.row_range(start, end);
        let mut scores = block.matmul_t(k)?;
        for r in 0..scores.rows() {
            let i = start + r;
            let row = scores.row_mut(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v = if causal && j > i { f64::NEG_INFINITY } else { *v * scale };
            }
            softmax_in_place(row)?;
        }
        let part = scores.matmul(x)?;
        for r in 0..part.rows() {
            out.row_mut(start + r).copy_from_slice(part.row(r));
        }
        start = end;
    }
    Ok(out)
}

/// `(1/T)·(SV)ᵀ(SV)` for a single query head.
pub fn estimate_score_value_covariance(
    q: &RealMatrix,
    k: &RealMatrix,
    v: &RealMatrix,
    causal: bool,
) -> Result<CovarianceTarget> {
    if q.rows() == 0 {
        return Err(OscarError::EmptyDump("no query rows".into()));
    }
    let sv = attention_apply(q, k, v, causal)?;
    Ok(CovarianceTarget::new(
        TargetKind::ScoreValue,
        sv.gram().scale(1.0 / q.rows() as f64),
    ))
}

/// Value-side target of one kv-head, averaged over its grouped query heads.
pub fn head_score_value_covariance(head: &HeadActivations, causal: bool) -> Result<RealMatrix> {
    let d = head.head_dim();
    let mut acc = RealMatrix::zeros(d, d);
    for q in &head.queries {
        let c = estimate_score_value_covariance(q, &head.keys, &head.values, causal)?;
        acc.add_assign_scaled(&c.matrix, 1.0)?;
    }
    Ok(acc.scale(1.0 / head.queries.len().max(1) as f64))
}

pub fn estimate_value_covariance(
    dump: &ActivationDump,
    layer: usize,
    head: usize,
    mode: SharingMode,
    causal: bool,
) -> Result<CovarianceTarget> {
    let m = match mode {
        SharingMode::PerHead => head_score_value_covariance(dump.head(layer, head)?, causal)?,
        SharingMode::Shared => average(dump.layer_heads(layer)?, |h| {
            head_score_value_covariance(h, causal)
        })?,
    };
    Ok(CovarianceTarget::new(TargetKind::ScoreValue, m))
}

fn average(
    heads: &[HeadActivations],
    f: impl Fn(&HeadActivations) -> Result<RealMatrix>,
) -> Result<RealMatrix> {
    let first = heads.first().ok_or_else(|| OscarError::EmptyDump("no heads".into()))?;
    let d = first.head_dim();
    let mut acc = RealMatrix::zeros(d, d);
    for h in heads {
        acc.add_assign_scaled(&f(h)?, 1.0)?;
    }
    Ok(acc.scale(1.0 / heads.len() as f64))
}
