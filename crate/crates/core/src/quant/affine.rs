//! Per-token percentile clipping and per-group asymmetric min-max quantization.
//!
//! Packed layout: codes form a little-end-first bit stream, code `i` occupying bits
//! `b·i .. b·i + b` counted from bit 0 of byte 0. At `b = 2` this is four codes per
//! byte with code `i` in bits `2(i mod 4) ..= 2(i mod 4) + 1` of byte `i / 4`.

use super::QuantConfig;
use crate::error::{OscarError, Result};

/// One token row after clipping and quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCacheRow {
    pub packed: Vec<u8>,
    pub scales: Vec<f64>,
    pub zeros: Vec<f64>,
    /// Clip threshold applied before quantization.
    pub tau: f64,
    pub len: usize,
    pub bits: u8,
}

impl QuantizedCacheRow {
    pub fn codes(&self) -> Result<Vec<u8>> {
        unpack_codes(&self.packed, self.len, self.bits)
    }
}

#[inline]
pub fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let b = bits as usize;
    let mask = ((1u16 << bits) - 1) as u8;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    for (i, &c) in codes.iter().enumerate() {
        let c = (c & mask) as u16;
        let bit = i * b;
        let (byte, shift) = (bit / 8, bit % 8);
        let wide = c << shift;
        out[byte] |= wide as u8;
        if shift + b > 8 {
            out[byte + 1] |= (wide >> 8) as u8;
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], n: usize, bits: u8) -> Result<Vec<u8>> {
    if !(1..=8).contains(&bits) {
        return Err(OscarError::format(format!("bit width {bits} outside 1..=8")));
    }
    let expected = packed_len(n, bits);
    if bytes.len() != expected {
        return Err(OscarError::format(format!(
            "{n} codes at {bits} bits need {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let b = bits as usize;
    let mask = (1u16 << bits) - 1;
    Ok((0..n)
        .map(|i| {
            let bit = i * b;
            let (byte, shift) = (bit / 8, bit % 8);
            let mut wide = bytes[byte] as u16;
            if shift + b > 8 {
                wide |= (bytes[byte + 1] as u16) << 8;
            }
            ((wide >> shift) & mask) as u8
        })
        .collect())
}

/// Nearest-rank `ρ`-quantile of `|x|` and the row clipped to `[−τ, τ]`.
///
/// The rank index is `⌈ρ·d⌉ − 1` into the ascending sorted magnitudes.
pub fn percentile_clip(row: &[f64], rho: f64) -> (f64, Vec<f64>) {
    if row.is_empty() {
        return (0.0, Vec::new());
    }
    let tau = clip_threshold(row, rho);
    (tau, row.iter().map(|&x| x.clamp(-tau, tau)).collect())
}

pub fn clip_threshold(row: &[f64], rho: f64) -> f64 {
    let d = row.len();
    if rho >= 1.0 {
        return row.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
    }
    let mut mags: Vec<f64> = row.iter().map(|x| x.abs()).collect();
    mags.sort_by(f64::total_cmp);
    // The epsilon keeps products like 0.96·100 = 96.00000000000001 on rank 96.
    let rank = ((rho * d as f64) - 1e-9).ceil().max(1.0) as usize;
    mags[rank.min(d) - 1]
}

/// bfloat16 round trip by truncating the low 16 bits of the f32 encoding.
pub fn bf16_truncate(x: f64) -> f64 {
    f32::from_bits((x as f32).to_bits() & 0xFFFF_0000) as f64
}

/// Quantizes an already clipped row group by group.
pub fn quantize_row(row: &[f64], config: &QuantConfig) -> Result<QuantizedCacheRow> {
    quantize_with_tau(row, config, f64::NAN)
}

fn quantize_with_tau(row: &[f64], config: &QuantConfig, tau: f64) -> Result<QuantizedCacheRow> {
    config.validate_for(row.len())?;
    if let Some(i) = row.iter().position(|v| !v.is_finite()) {
        return Err(OscarError::NonFinite(format!("row element {i}")));
    }
    let q_max = config.q_max() as f64;
    let groups = config.groups(row.len());
    let mut codes = Vec::with_capacity(row.len());
    let mut scales = Vec::with_capacity(groups);
    let mut zeros = Vec::with_capacity(groups);
    for group in row.chunks_exact(config.group_size) {
        let (lo, hi) = group
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let mut s = ((hi - lo) / q_max).max(config.scale_floor);
        let mut z = -lo / s;
        if config.bf16_meta {
            s = bf16_truncate(s);
            z = bf16_truncate(z);
        }
        codes.extend(
            group
                .iter()
                .map(|&x| (x / s + z).round_ties_even().clamp(0.0, q_max) as u8),
        );
        scales.push(s);
        zeros.push(z);
    }
    Ok(QuantizedCacheRow {
        packed: pack_codes(&codes, config.bits),
        scales,
        zeros,
        tau: if tau.is_nan() {
            row.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
        } else {
            tau
        },
        len: row.len(),
        bits: config.bits,
    })
}

pub fn dequantize_row(q: &QuantizedCacheRow, config: &QuantConfig) -> Result<Vec<f64>> {
    if q.bits != config.bits {
        return Err(OscarError::format(format!(
            "row packed at {} bits, config expects {}",
            q.bits, config.bits
        )));
    }
    config.validate_for(q.len)?;
    let groups = config.groups(q.len);
    if q.scales.len() != groups || q.zeros.len() != groups {
        return Err(OscarError::format(format!(
            "expected {groups} scale/zero pairs, got {}/{}",
            q.scales.len(),
            q.zeros.len()
        )));
    }
    let codes = q.codes()?;
    let mut out = Vec::with_capacity(q.len);
    for (g, chunk) in codes.chunks_exact(config.group_size).enumerate() {
        let (s, z) = (q.scales[g], q.zeros[g]);
        out.extend(chunk.iter().map(|&c| s * (c as f64 - z)));
    }
    Ok(out)
}

/// Percentile-clips with `config.clip_ratio`, then quantizes.
pub fn clip_and_quantize(row: &[f64], config: &QuantConfig) -> Result<QuantizedCacheRow> {
    let (tau, clipped) = percentile_clip(row, config.clip_ratio);
    quantize_with_tau(&clipped, config, tau)
}

/// Clip, quantize and dequantize in one go.
pub fn fake_quantize(row: &[f64], config: &QuantConfig) -> Result<Vec<f64>> {
    dequantize_row(&clip_and_quantize(row, config)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(bits: u8, g: usize) -> QuantConfig {
        QuantConfig::new(bits, g, 1.0).unwrap()
    }

    #[test]
    fn grid_point_groups_are_exact() {
        let c = cfg(2, 4);
        let q = quantize_row(&[0.0, 1.0, 2.0, 3.0], &c).unwrap();
        assert_eq!((q.scales[0], q.zeros[0]), (1.0, 0.0));
        assert_eq!(q.codes().unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(dequantize_row(&q, &c).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);

        let q = quantize_row(&[-1.0, 0.0, 1.0, 2.0], &c).unwrap();
        assert_eq!((q.scales[0], q.zeros[0]), (1.0, 1.0));
        assert_eq!(q.codes().unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(dequantize_row(&q, &c).unwrap(), vec![-1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn constant_group_reconstructs_exactly() {
        let c = cfg(2, 4);
        let q = quantize_row(&[5.0; 4], &c).unwrap();
        assert_eq!(q.scales[0], 1e-8);
        assert_eq!(q.codes().unwrap(), vec![0; 4]);
        assert_eq!(dequantize_row(&q, &c).unwrap(), vec![5.0; 4]);
    }

    #[test]
    fn packing_layout_is_little_end_first() {
        assert_eq!(pack_codes(&[0, 1, 2, 3], 2), vec![0xE4]);
        assert_eq!(pack_codes(&[3, 0, 0, 0, 1], 2), vec![0x03, 0x01]);
        assert_eq!(pack_codes(&[0xF, 0x1], 4), vec![0x1F]);
        // 3-bit codes straddle byte boundaries.
        let codes = [7, 1, 5, 2, 6, 3, 0, 4];
        let packed = pack_codes(&codes, 3);
        assert_eq!(packed.len(), 3);
        assert_eq!(unpack_codes(&packed, 8, 3).unwrap(), codes);
    }

    #[test]
    fn corrupt_packing_length_is_rejected() {
        let c = cfg(2, 4);
        let mut q = quantize_row(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], &c).unwrap();
        q.packed.push(0);
        assert!(matches!(dequantize_row(&q, &c), Err(OscarError::Format(_))));
        q.packed.truncate(1);
        assert!(dequantize_row(&q, &c).is_err());
    }

    #[test]
    fn percentile_rules() {
        let (tau, out) = percentile_clip(&[3.0, -1.0, 4.0, -2.0], 1.0);
        assert_eq!(tau, 4.0);
        assert_eq!(out, vec![3.0, -1.0, 4.0, -2.0]);

        let (tau, out) = percentile_clip(&[3.0, -1.0, 4.0, -2.0], 0.5);
        assert_eq!(tau, 2.0);
        assert_eq!(out, vec![2.0, -1.0, 2.0, -2.0]);

        let (tau, out) = percentile_clip(&[0.0; 5], 0.5);
        assert_eq!(tau, 0.0);
        assert_eq!(out, vec![0.0; 5]);

        let row: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(clip_threshold(&row, 0.96), 96.0);
        assert_eq!(clip_threshold(&row, 0.001), 1.0);
    }

    #[test]
    fn non_finite_rows_are_rejected() {
        let c = cfg(2, 2);
        assert!(quantize_row(&[1.0, f64::INFINITY], &c).is_err());
    }

    #[test]
    fn clip_and_quantize_records_tau() {
        let c = cfg(2, 4).with_clip(0.5);
        let q = clip_and_quantize(&[3.0, -1.0, 4.0, -2.0], &c).unwrap();
        assert_eq!(q.tau, 2.0);
        let deq = dequantize_row(&q, &c).unwrap();
        assert!(deq.iter().all(|v| v.abs() <= 2.0 + 1e-12));
    }

    #[test]
    fn bf16_metadata_changes_little() {
        let row: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let c = cfg(2, 4);
        let exact = fake_quantize(&row, &c).unwrap();
        let coarse = fake_quantize(&row, &c.with_bf16_meta(true)).unwrap();
        for (a, b) in exact.iter().zip(&coarse) {
            assert!((a - b).abs() < 0.05 * 3.0);
        }
        assert_eq!(bf16_truncate(1.0), 1.0);
        assert_eq!(bf16_truncate(1.0 + 1.0 / 256.0), 1.0);
    }
}
