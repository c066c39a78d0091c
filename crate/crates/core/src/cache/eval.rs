//! End-to-end distortion of one kv-head: prefill + decode through the cache, then
//! compare quantized attention against full precision.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attention::monolithic_attention;
use super::state::{CacheCodec, CacheLayout, KvCacheState};
use crate::calibration::{
    attention_apply, head_query_covariance, head_score_value_covariance, importance_ratio, ActivationDump,
    HeadActivations, RotationBundle, RotationKind, RotationSlot,
};
use crate::error::{OscarError, Result};
use crate::linalg::{dot, softmax_in_place, RealMatrix};
use crate::quant::{
    effective_bpe, fake_quantize_rows, group_dynamic_range_stats, residual_covariance, weighted_residual,
    GroupRangeStats, QuantConfig,
};

/// Probability floor applied to the quantized distribution inside the KL.
pub const KL_FLOOR: f64 = 1e-12;

/// Relative tolerance of the trace-identity side assertions.
pub const IDENTITY_TOLERANCE: f64 = 1e-8;

const DENSE_SCORE_LIMIT: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Rotate with the given kind and quantize.
    Rotation(RotationKind),
    /// Rotate with the calibrated rotation but store rows exactly.
    Passthrough,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Rotation(kind) => kind.fmt(f),
            EvalMode::Passthrough => f.write_str("passthrough"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = OscarError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "passthrough" {
            Ok(EvalMode::Passthrough)
        } else {
            s.parse().map(EvalMode::Rotation)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub layout: CacheLayout,
    pub mode: EvalMode,
    /// Tokens written by prefill; the rest are decoded one at a time.
    /// Defaults to `min(T, sink + recent)`, at least 1.
    pub prefill: Option<usize>,
    /// Context length used for BPE accounting.
    pub bpe_context: usize,
    pub bf16_meta: bool,
    pub causal: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            layout: CacheLayout::default(),
            mode: EvalMode::Rotation(RotationKind::Oscar),
            prefill: None,
            bpe_context: 131_072,
            bf16_meta: false,
            causal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub layer: usize,
    pub head: usize,
    pub mode: String,
    pub tokens: usize,
    pub history_tokens: usize,
    pub clip_k: f64,
    pub clip_v: f64,
    /// `‖K − K̂‖_F² / ‖K‖_F²` over the final cache contents.
    pub key_rel_mse: f64,
    pub value_rel_mse: f64,
    /// `Σ_i ‖Q_i Kᵀ − Q_i K̂ᵀ‖_F²` over the grouped query heads.
    pub logit_mse: f64,
    /// Relative gap between `logit_mse` and `tr((K−K̂)QᵀQ(K−K̂)ᵀ)`.
    pub logit_identity_slack: f64,
    /// `Σ_i ‖S_i V − S_i V̂‖_F²`, with `S_i` the full-precision scores.
    pub output_mse: f64,
    /// Relative gap to `tr((V−V̂)ᵀSᵀS(V−V̂))`; `None` when `T` is too large to form `S`.
    pub output_identity_slack: Option<f64>,
    /// Mean over query rows of `KL(p_full ‖ p_quant)`.
    pub attention_kl: f64,
    /// `Σ‖o_t − o_t^ref‖² / Σ‖o_t^ref‖²` over decode steps.
    pub decode_output_rel_mse: f64,
    /// Largest per-step relative output error.
    pub decode_max_rel_err: f64,
    pub decode_steps: usize,
    /// `tr(E_K)` over every rotated key row.
    pub trace_residual_k: f64,
    pub trace_residual_v: f64,
    /// `tr(RᵀCR·E)`.
    pub weighted_residual_k: f64,
    pub weighted_residual_v: f64,
    pub importance_ratio_k: f64,
    pub importance_ratio_v: f64,
    pub key_ranges: GroupRangeStats,
    pub value_ranges: GroupRangeStats,
    pub effective_bpe: f64,
}

/// Simulates one kv-head through the cache and measures every distortion metric.
pub fn evaluate_distortion(
    head: &HeadActivations,
    slot: &RotationSlot,
    key_config: &QuantConfig,
    value_config: &QuantConfig,
    options: &EvalOptions,
) -> Result<DistortionReport> {
    let t = head.tokens();
    let d = head.head_dim();
    if t == 0 || head.queries.is_empty() {
        return Err(OscarError::EmptyDump("head has no tokens".into()));
    }
    let key_cfg = key_config.with_bf16_meta(options.bf16_meta);
    let value_cfg = value_config.with_bf16_meta(options.bf16_meta);
    key_cfg.validate_for(d)?;
    value_cfg.validate_for(d)?;

    let (r_k, r_v, codec) = match options.mode {
        EvalMode::Rotation(kind) => (
            slot.key.rotation_for(kind)?,
            slot.value.rotation_for(kind)?,
            CacheCodec::Affine { key: key_cfg, value: value_cfg },
        ),
        EvalMode::Passthrough => (slot.key.rotation.clone(), slot.value.rotation.clone(), CacheCodec::Passthrough),
    };

    // Cache simulation: prefill, then decode the remaining tokens one by one.
    let n_prefill = options
        .prefill
        .unwrap_or_else(|| options.layout.protected())
        .clamp(1, t);
    let mut cache = KvCacheState::new(options.layout, codec, r_k.clone(), r_v.clone())?;
    cache.prefill(&head.keys.row_range(0, n_prefill), &head.values.row_range(0, n_prefill))?;
    let scale = 1.0 / (d as f64).sqrt();
    let (mut err_sq, mut ref_sq, mut max_rel) = (0.0, 0.0, 0.0_f64);
    for pos in n_prefill..t {
        cache.append(head.keys.row(pos), head.values.row(pos))?;
        let keys = &head.keys.as_slice()[..(pos + 1) * d];
        let values = &head.values.as_slice()[..(pos + 1) * d];
        for q in &head.queries {
            let o = cache.attend(q.row(pos))?;
            let reference = monolithic_attention(q.row(pos), keys, values, scale)?;
            let e: f64 = o.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum();
            let r: f64 = reference.iter().map(|b| b * b).sum();
            err_sq += e;
            ref_sq += r;
            max_rel = max_rel.max(safe_ratio(e, r).sqrt());
        }
    }
    let k_hat = cache.materialized_keys();
    let v_hat = cache.materialized_values();

    // Attention-level metrics on the final cache.
    let dk = head.keys.sub(&k_hat)?;
    let dv = head.values.sub(&v_hat)?;
    let mut logit_mse = 0.0;
    let mut qtq = RealMatrix::zeros(d, d);
    for q in &head.queries {
        let logits = q.matmul_t(&head.keys)?;
        let approx = q.matmul_t(&k_hat)?;
        logit_mse += logits.sub(&approx)?.frobenius_norm_sq();
        qtq.add_assign_scaled(&q.gram(), 1.0)?;
    }
    let logit_rhs: f64 = dk.row_iter().map(|e| dot(&qtq.vec_mul(e).expect("d×d"), e)).sum();
    let logit_floor = 1e-24 * qtq.trace() * head.keys.frobenius_norm_sq();
    let logit_identity_slack = check_identity("logit", logit_mse, logit_rhs, logit_floor)?;

    let mut output_mse = 0.0;
    for q in &head.queries {
        let sv = attention_apply(q, &head.keys, &head.values, options.causal)?;
        let sv_hat = attention_apply(q, &head.keys, &v_hat, options.causal)?;
        output_mse += sv.sub(&sv_hat)?.frobenius_norm_sq();
    }
    let output_identity_slack = if t <= DENSE_SCORE_LIMIT {
        let eye = RealMatrix::identity(t);
        let mut sts = RealMatrix::zeros(t, t);
        for q in &head.queries {
            let s = attention_apply(q, &head.keys, &eye, options.causal)?;
            sts.add_assign_scaled(&s.gram(), 1.0)?;
        }
        let w = sts.matmul(&dv)?;
        let rhs: f64 = dv.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
        let floor = 1e-24 * sts.trace() * head.values.frobenius_norm_sq();
        Some(check_identity("output", output_mse, rhs, floor)?)
    } else {
        None
    };

    let attention_kl = mean_attention_kl(head, &k_hat, options.causal)?;

    // Quantizer view over every rotated row.
    let kr = head.keys.matmul(&r_k)?;
    let vr = head.values.matmul(&r_v)?;
    let (kq, vq) = match codec {
        CacheCodec::Affine { key, value } => (fake_quantize_rows(&kr, &key)?, fake_quantize_rows(&vr, &value)?),
        CacheCodec::Passthrough => (kr.clone(), vr.clone()),
    };
    let c_q = head_query_covariance(head)?;
    let c_s = head_score_value_covariance(head, options.causal)?;
    let m_k = metric(&r_k, &c_q)?;
    let m_v = metric(&r_v, &c_s)?;
    let e_k = residual_covariance(&kr, &kq)?;
    let e_v = residual_covariance(&vr, &vq)?;

    let protected = options.layout.protected();
    let bpe_k = effective_bpe(key_cfg.bits, key_cfg.group_size, 32, protected, options.bpe_context)?;
    let bpe_v = effective_bpe(value_cfg.bits, value_cfg.group_size, 32, protected, options.bpe_context)?;

    Ok(DistortionReport {
        layer: slot.layer,
        head: slot.head.unwrap_or(0),
        mode: options.mode.to_string(),
        tokens: t,
        history_tokens: cache.history_len(),
        clip_k: key_cfg.clip_ratio,
        clip_v: value_cfg.clip_ratio,
        key_rel_mse: safe_ratio(dk.frobenius_norm_sq(), head.keys.frobenius_norm_sq()),
        value_rel_mse: safe_ratio(dv.frobenius_norm_sq(), head.values.frobenius_norm_sq()),
        logit_mse,
        logit_identity_slack,
        output_mse,
        output_identity_slack,
        attention_kl,
        decode_output_rel_mse: safe_ratio(err_sq, ref_sq),
        decode_max_rel_err: max_rel,
        decode_steps: t - n_prefill,
        trace_residual_k: e_k.trace(),
        trace_residual_v: e_v.trace(),
        weighted_residual_k: weighted_residual(&kr, &kq, &m_k)?,
        weighted_residual_v: weighted_residual(&vr, &vq, &m_v)?,
        importance_ratio_k: importance_ratio(&r_k, &c_q)?,
        importance_ratio_v: importance_ratio(&r_v, &c_s)?,
        key_ranges: group_dynamic_range_stats(&kr, key_cfg.group_size)?,
        value_ranges: group_dynamic_range_stats(&vr, value_cfg.group_size)?,
        effective_bpe: 0.5 * (bpe_k + bpe_v),
    })
}

/// Evaluates every (layer, kv-head) of `dump` against its slot in `bundle`.
pub fn evaluate_dump(
    dump: &ActivationDump,
    bundle: &RotationBundle,
    bits: Option<u8>,
    options: &EvalOptions,
) -> Result<Vec<DistortionReport>> {
    if dump.head_dim() != bundle.head_dim || dump.layers() != bundle.layers || dump.kv_heads() != bundle.kv_heads {
        return Err(OscarError::input("activation dump and bundle shapes differ"));
    }
    let pairs: Vec<(usize, usize)> = (0..dump.layers())
        .flat_map(|l| (0..dump.kv_heads()).map(move |h| (l, h)))
        .collect();
    pairs
        .par_iter()
        .map(|&(layer, h)| {
            let slot = bundle.slot(layer, h)?;
            let mut key_cfg = bundle.key_config(slot);
            let mut value_cfg = bundle.value_config(slot);
            if let Some(b) = bits {
                key_cfg = key_cfg.with_bits(b);
                value_cfg = value_cfg.with_bits(b);
            }
            let mut report = evaluate_distortion(dump.head(layer, h)?, slot, &key_cfg, &value_cfg, options)?;
            report.layer = layer;
            report.head = h;
            Ok(report)
        })
        .collect()
}

/// Totals and means over a set of per-head reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSummary {
    pub heads: usize,
    pub mean_key_rel_mse: f64,
    pub mean_value_rel_mse: f64,
    pub total_logit_mse: f64,
    pub total_output_mse: f64,
    pub mean_attention_kl: f64,
    pub mean_decode_output_rel_mse: f64,
    pub total_trace_residual_k: f64,
    pub total_trace_residual_v: f64,
    pub max_importance_ratio_k: f64,
    pub effective_bpe: f64,
}

pub fn summarize(reports: &[DistortionReport]) -> DistortionSummary {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&DistortionReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let total = |f: fn(&DistortionReport) -> f64| reports.iter().map(f).sum::<f64>();
    DistortionSummary {
        heads: reports.len(),
        mean_key_rel_mse: mean(|r| r.key_rel_mse),
        mean_value_rel_mse: mean(|r| r.value_rel_mse),
        total_logit_mse: total(|r| r.logit_mse),
        total_output_mse: total(|r| r.output_mse),
        mean_attention_kl: mean(|r| r.attention_kl),
        mean_decode_output_rel_mse: mean(|r| r.decode_output_rel_mse),
        total_trace_residual_k: total(|r| r.trace_residual_k),
        total_trace_residual_v: total(|r| r.trace_residual_v),
        max_importance_ratio_k: reports.iter().map(|r| r.importance_ratio_k).fold(0.0, f64::max),
        effective_bpe: mean(|r| r.effective_bpe),
    }
}

/// `KL(p ‖ q) = Σ p·ln(p / max(q, 1e-12))`, clamped at zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum();
    kl.max(0.0)
}

fn mean_attention_kl(head: &HeadActivations, k_hat: &RealMatrix, causal: bool) -> Result<f64> {
    let t = head.tokens();
    let scale = 1.0 / (head.head_dim() as f64).sqrt();
    let mut total = 0.0;
    for q in &head.queries {
        for i in 0..t {
            let n = if causal { i + 1 } else { t };
            let qi = q.row(i);
            let mut p: Vec<f64> = (0..n).map(|j| dot(qi, head.keys.row(j)) * scale).collect();
            let mut p_hat: Vec<f64> = (0..n).map(|j| dot(qi, k_hat.row(j)) * scale).collect();
            softmax_in_place(&mut p)?;
            softmax_in_place(&mut p_hat)?;
            total += kl_divergence(&p, &p_hat);
        }
    }
    Ok(total / (t * head.queries.len()) as f64)
}

fn metric(rotation: &RealMatrix, target: &RealMatrix) -> Result<RealMatrix> {
    let mut m = rotation.t_matmul(&target.matmul(rotation)?)?;
    m.symmetrize();
    Ok(m)
}

fn safe_ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Relative gap between two evaluations of the same quantity; errors past tolerance.
fn check_identity(name: &str, lhs: f64, rhs: f64, floor: f64) -> Result<f64> {
    let gap = (lhs - rhs).abs();
    let scale = lhs.abs().max(rhs.abs());
    if gap > IDENTITY_TOLERANCE * scale + floor {
        return Err(OscarError::Consistency(format!(
            "{name} trace identity violated: {lhs:e} vs {rhs:e}"
        )));
    }
    Ok(if scale == 0.0 { 0.0 } else { gap / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::SlotSide;
    use crate::linalg::{hadamard_matrix, sym_eig};

    fn toy_head(t: usize, d: usize, g: usize) -> HeadActivations {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut f = || {
            RealMatrix::from_fn(t, d, |_, j| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x * if j == 1 { 6.0 } else { 1.0 }
            })
        };
        HeadActivations {
            queries: (0..g).map(|_| f()).collect(),
            keys: f(),
            values: f(),
        }
    }

    fn toy_slot(head: &HeadActivations) -> RotationSlot {
        let side = |c: RealMatrix| {
            let eig = sym_eig(&c).unwrap();
            let rotation = RotationKind::Oscar.build(&eig).unwrap();
            let (basis, spectrum) = eig.into_parts();
            SlotSide { rotation, basis, spectrum, clip_ratio: 1.0 }
        };
        RotationSlot {
            layer: 0,
            head: Some(0),
            key: side(head_query_covariance(head).unwrap()),
            value: side(head_score_value_covariance(head, true).unwrap()),
        }
    }

    fn opts(mode: EvalMode) -> EvalOptions {
        EvalOptions {
            layout: CacheLayout::new(2, 6),
            mode,
            prefill: Some(12),
            bpe_context: 1024,
            ..EvalOptions::default()
        }
    }

    #[test]
    fn passthrough_reports_zero_distortion() {
        let head = toy_head(40, 8, 2);
        let slot = toy_slot(&head);
        let cfg = QuantConfig::int2(4);
        let r = evaluate_distortion(&head, &slot, &cfg, &cfg, &opts(EvalMode::Passthrough)).unwrap();
        assert!(r.history_tokens > 0);
        for v in [r.key_rel_mse, r.value_rel_mse, r.logit_mse, r.output_mse, r.attention_kl, r.decode_max_rel_err] {
            assert!(v < 1e-9, "{v}");
        }
        assert_eq!(r.trace_residual_k, 0.0);
    }

    #[test]
    fn more_bits_lower_logit_error() {
        let head = toy_head(40, 8, 2);
        let slot = toy_slot(&head);
        let mode = opts(EvalMode::Rotation(RotationKind::Oscar));
        let two = evaluate_distortion(&head, &slot, &QuantConfig::int2(8), &QuantConfig::int2(8), &mode).unwrap();
        let eight_cfg = QuantConfig::int2(8).with_bits(8);
        let eight = evaluate_distortion(&head, &slot, &eight_cfg, &eight_cfg, &mode).unwrap();
        assert!(eight.logit_mse < two.logit_mse, "{} vs {}", eight.logit_mse, two.logit_mse);
        assert!(two.logit_identity_slack < 1e-8);
        assert!(two.output_identity_slack.unwrap() < 1e-8);
    }

    #[test]
    fn oscar_importance_is_flat() {
        let head = toy_head(24, 8, 2);
        let slot = toy_slot(&head);
        let cfg = QuantConfig::int2(4);
        let r = evaluate_distortion(&head, &slot, &cfg, &cfg, &opts(EvalMode::Rotation(RotationKind::Oscar))).unwrap();
        assert!((r.importance_ratio_k - 1.0).abs() < 1e-9);
        let h = hadamard_matrix(8).unwrap();
        assert!(h.orthogonality_defect() < 1e-12);
    }

    #[test]
    fn kl_basics() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert!(kl_divergence(&p, &[0.5, 0.3, 0.2]) > 0.0);
        assert!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("passthrough".parse::<EvalMode>().unwrap(), EvalMode::Passthrough);
        assert_eq!("none".parse::<EvalMode>().unwrap(), EvalMode::Rotation(RotationKind::Identity));
        assert!("bogus".parse::<EvalMode>().is_err());
    }
}
