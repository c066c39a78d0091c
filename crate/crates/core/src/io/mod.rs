//! Reading and writing activation dumps, rotation bundles and packed rows as containers.

mod container;

use serde::{Deserialize, Serialize};

pub use container::{TensorArray, TensorContainer, TensorData, FORMAT_VERSION, MAGIC};

use crate::calibration::{ActivationDump, HeadActivations, Provenance, RotationBundle, RotationSlot, SharingMode, SlotSide};
use crate::error::{OscarError, Result};
use crate::linalg::{orthonormalize_columns, RealMatrix};
use crate::quant::{packed_len, QuantizedCacheRow};

const META: &str = "meta";

fn to_f32(m: &RealMatrix) -> Vec<f32> {
    m.as_slice().iter().map(|&x| x as f32).collect()
}

fn matrix(data: &[f32], rows: usize, cols: usize) -> Result<RealMatrix> {
    RealMatrix::from_vec(rows, cols, data.iter().map(|&x| x as f64).collect())
}

fn put_meta<T: Serialize>(c: &mut TensorContainer, meta: &T) -> Result<()> {
    let json = serde_json::to_vec(meta).map_err(|e| OscarError::format(e.to_string()))?;
    c.insert(TensorArray::u8(META, vec![json.len() as u64], json)?)
}

fn get_meta<T: for<'de> Deserialize<'de>>(c: &TensorContainer) -> Result<T> {
    serde_json::from_slice(c.require(META)?.as_u8()?).map_err(|e| OscarError::format(format!("metadata: {e}")))
}

fn expect_dims(a: &TensorArray, dims: &[usize]) -> Result<()> {
    let want: Vec<u64> = dims.iter().map(|&d| d as u64).collect();
    if a.dims != want {
        return Err(OscarError::format(format!(
            "array {:?} has dims {:?}, expected {want:?}",
            a.name, a.dims
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpMeta {
    kind: String,
    layers: usize,
    kv_heads: usize,
    gqa_ratio: usize,
    head_dim: usize,
    tokens: usize,
}

const DUMP_KIND: &str = "activation-dump";
const BUNDLE_KIND: &str = "rotation-bundle";

/// Arrays `L{l}.H{h}.q` `[g, T, d]`, `L{l}.H{h}.k` and `.v` `[T, d]`, plus JSON metadata.
pub fn dump_to_container(dump: &ActivationDump) -> Result<TensorContainer> {
    let (t, d, g) = (dump.tokens() as u64, dump.head_dim() as u64, dump.gqa_ratio() as u64);
    let mut c = TensorContainer::new();
    put_meta(
        &mut c,
        &DumpMeta {
            kind: DUMP_KIND.into(),
            layers: dump.layers(),
            kv_heads: dump.kv_heads(),
            gqa_ratio: dump.gqa_ratio(),
            head_dim: dump.head_dim(),
            tokens: dump.tokens(),
        },
    )?;
    for l in 0..dump.layers() {
        for h in 0..dump.kv_heads() {
            let head = dump.head(l, h)?;
            let q: Vec<f32> = head.queries.iter().flat_map(to_f32).collect();
            c.insert(TensorArray::f32(format!("L{l}.H{h}.q"), vec![g, t, d], q)?)?;
            c.insert(TensorArray::f32(format!("L{l}.H{h}.k"), vec![t, d], to_f32(&head.keys))?)?;
            c.insert(TensorArray::f32(format!("L{l}.H{h}.v"), vec![t, d], to_f32(&head.values))?)?;
        }
    }
    Ok(c)
}

pub fn dump_from_container(c: &TensorContainer) -> Result<ActivationDump> {
    let meta: DumpMeta = get_meta(c)?;
    if meta.kind != DUMP_KIND {
        return Err(OscarError::format(format!("expected an activation dump, found {:?}", meta.kind)));
    }
    let (t, d, g) = (meta.tokens, meta.head_dim, meta.gqa_ratio);
    let mut heads = Vec::with_capacity(meta.layers * meta.kv_heads);
    for l in 0..meta.layers {
        for h in 0..meta.kv_heads {
            let q = c.require(&format!("L{l}.H{h}.q"))?;
            expect_dims(q, &[g, t, d])?;
            let k = c.require(&format!("L{l}.H{h}.k"))?;
            expect_dims(k, &[t, d])?;
            let v = c.require(&format!("L{l}.H{h}.v"))?;
            expect_dims(v, &[t, d])?;
            let qd = q.as_f32()?;
            let queries = (0..g)
                .map(|i| matrix(&qd[i * t * d..(i + 1) * t * d], t, d))
                .collect::<Result<_>>()?;
            heads.push(HeadActivations {
                queries,
                keys: matrix(k.as_f32()?, t, d)?,
                values: matrix(v.as_f32()?, t, d)?,
            });
        }
    }
    ActivationDump::new(meta.layers, meta.kv_heads, g, d, heads)
}

#[derive(Debug, Serialize, Deserialize)]
struct SlotMeta {
    layer: usize,
    head: Option<usize>,
    clip_k: f64,
    clip_v: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleMeta {
    kind: String,
    head_dim: usize,
    layers: usize,
    kv_heads: usize,
    sharing: SharingMode,
    bits: u8,
    key_group: usize,
    value_group: usize,
    slots: Vec<SlotMeta>,
    provenance: Provenance,
}

/// Arrays `r_k`, `r_v`, `u_k`, `u_v` `[slots, d, d]` and `lambda_k`, `lambda_v` `[slots, d]`.
pub fn bundle_to_container(bundle: &RotationBundle) -> Result<TensorContainer> {
    let d = bundle.head_dim;
    let n = bundle.slots.len() as u64;
    let mut c = TensorContainer::new();
    put_meta(
        &mut c,
        &BundleMeta {
            kind: BUNDLE_KIND.into(),
            head_dim: d,
            layers: bundle.layers,
            kv_heads: bundle.kv_heads,
            sharing: bundle.sharing,
            bits: bundle.bits,
            key_group: bundle.key_group,
            value_group: bundle.value_group,
            slots: bundle
                .slots
                .iter()
                .map(|s| SlotMeta {
                    layer: s.layer,
                    head: s.head,
                    clip_k: s.key.clip_ratio,
                    clip_v: s.value.clip_ratio,
                })
                .collect(),
            provenance: bundle.provenance.clone(),
        },
    )?;
    let square = vec![n, d as u64, d as u64];
    let stack = |f: fn(&RotationSlot) -> &RealMatrix| bundle.slots.iter().flat_map(|s| to_f32(f(s))).collect();
    let spectrum = |f: fn(&RotationSlot) -> &[f64]| {
        bundle
            .slots
            .iter()
            .flat_map(|s| f(s).iter().map(|&x| x as f32))
            .collect()
    };
    c.insert(TensorArray::f32("r_k", square.clone(), stack(|s| &s.key.rotation))?)?;
    c.insert(TensorArray::f32("r_v", square.clone(), stack(|s| &s.value.rotation))?)?;
    c.insert(TensorArray::f32("u_k", square.clone(), stack(|s| &s.key.basis))?)?;
    c.insert(TensorArray::f32("u_v", square, stack(|s| &s.value.basis))?)?;
    c.insert(TensorArray::f32("lambda_k", vec![n, d as u64], spectrum(|s| &s.key.spectrum))?)?;
    c.insert(TensorArray::f32("lambda_v", vec![n, d as u64], spectrum(|s| &s.value.spectrum))?)?;
    Ok(c)
}

pub fn bundle_from_container(c: &TensorContainer) -> Result<RotationBundle> {
    let meta: BundleMeta = get_meta(c)?;
    if meta.kind != BUNDLE_KIND {
        return Err(OscarError::format(format!("expected a rotation bundle, found {:?}", meta.kind)));
    }
    let d = meta.head_dim;
    let n = meta.slots.len();
    let arrays: Vec<&[f32]> = ["r_k", "r_v", "u_k", "u_v"]
        .iter()
        .map(|name| {
            let a = c.require(name)?;
            expect_dims(a, &[n, d, d])?;
            a.as_f32()
        })
        .collect::<Result<_>>()?;
    let spectra: Vec<&[f32]> = ["lambda_k", "lambda_v"]
        .iter()
        .map(|name| {
            let a = c.require(name)?;
            expect_dims(a, &[n, d])?;
            a.as_f32()
        })
        .collect::<Result<_>>()?;
    let sq = d * d;
    let slots = meta
        .slots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let side = |r: &[f32], u: &[f32], lam: &[f32], clip: f64| -> Result<SlotSide> {
                // f32 storage leaves an orthogonality defect near 1e-7; restore it.
                Ok(SlotSide {
                    rotation: orthonormalize_columns(&matrix(&r[i * sq..(i + 1) * sq], d, d)?)?,
                    basis: orthonormalize_columns(&matrix(&u[i * sq..(i + 1) * sq], d, d)?)?,
                    spectrum: lam[i * d..(i + 1) * d].iter().map(|&x| x as f64).collect(),
                    clip_ratio: clip,
                })
            };
            Ok(RotationSlot {
                layer: s.layer,
                head: s.head,
                key: side(arrays[0], arrays[2], spectra[0], s.clip_k)?,
                value: side(arrays[1], arrays[3], spectra[1], s.clip_v)?,
            })
        })
        .collect::<Result<_>>()?;
    let bundle = RotationBundle {
        head_dim: d,
        layers: meta.layers,
        kv_heads: meta.kv_heads,
        sharing: meta.sharing,
        bits: meta.bits,
        key_group: meta.key_group,
        value_group: meta.value_group,
        slots,
        provenance: meta.provenance,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[derive(Debug, Serialize, Deserialize)]
struct PackedMeta {
    kind: String,
    len: usize,
    bits: u8,
}

/// Packed rows of equal length: `codes` u8 `[n, bytes]`, `scales`/`zeros` f32 `[n, groups]`, `tau` f32 `[n]`.
///
/// Scales and zeros are narrowed to `f32` on disk.
pub fn packed_rows_to_container(rows: &[QuantizedCacheRow]) -> Result<TensorContainer> {
    let first = rows.first().ok_or_else(|| OscarError::input("no rows to serialize"))?;
    let (len, bits, groups) = (first.len, first.bits, first.scales.len());
    if rows
        .iter()
        .any(|r| r.len != len || r.bits != bits || r.scales.len() != groups || r.zeros.len() != groups)
    {
        return Err(OscarError::input("packed rows differ in layout"));
    }
    let n = rows.len() as u64;
    let bytes = packed_len(len, bits);
    let mut c = TensorContainer::new();
    put_meta(&mut c, &PackedMeta { kind: "packed-rows".into(), len, bits })?;
    c.insert(TensorArray::u8("codes", vec![n, bytes as u64], rows.iter().flat_map(|r| r.packed.clone()).collect())?)?;
    let narrow = |f: fn(&QuantizedCacheRow) -> &[f64]| rows.iter().flat_map(|r| f(r).iter().map(|&x| x as f32)).collect();
    c.insert(TensorArray::f32("scales", vec![n, groups as u64], narrow(|r| &r.scales))?)?;
    c.insert(TensorArray::f32("zeros", vec![n, groups as u64], narrow(|r| &r.zeros))?)?;
    c.insert(TensorArray::f32("tau", vec![n], rows.iter().map(|r| r.tau as f32).collect())?)?;
    Ok(c)
}

pub fn packed_rows_from_container(c: &TensorContainer) -> Result<Vec<QuantizedCacheRow>> {
    let meta: PackedMeta = get_meta(c)?;
    let codes = c.require("codes")?;
    let scales = c.require("scales")?;
    let zeros = c.require("zeros")?;
    let tau = c.require("tau")?;
    let n = tau.dims.first().copied().unwrap_or(0) as usize;
    let bytes = packed_len(meta.len, meta.bits);
    let groups = scales.dims.get(1).copied().unwrap_or(0) as usize;
    expect_dims(codes, &[n, bytes])?;
    expect_dims(scales, &[n, groups])?;
    expect_dims(zeros, &[n, groups])?;
    let (cd, sd, zd, td) = (codes.as_u8()?, scales.as_f32()?, zeros.as_f32()?, tau.as_f32()?);
    Ok((0..n)
        .map(|i| QuantizedCacheRow {
            packed: cd[i * bytes..(i + 1) * bytes].to_vec(),
            scales: sd[i * groups..(i + 1) * groups].iter().map(|&x| x as f64).collect(),
            zeros: zd[i * groups..(i + 1) * groups].iter().map(|&x| x as f64).collect(),
            tau: td[i] as f64,
            len: meta.len,
            bits: meta.bits,
        })
        .collect())
}

pub fn save_dump(dump: &ActivationDump, path: impl AsRef<std::path::Path>) -> Result<()> {
    dump_to_container(dump)?.save(path)
}

pub fn load_dump(path: impl AsRef<std::path::Path>) -> Result<ActivationDump> {
    dump_from_container(&TensorContainer::load(path)?)
}

pub fn save_bundle(bundle: &RotationBundle, path: impl AsRef<std::path::Path>) -> Result<()> {
    bundle_to_container(bundle)?.save(path)
}

pub fn load_bundle(path: impl AsRef<std::path::Path>) -> Result<RotationBundle> {
    bundle_from_container(&TensorContainer::load(path)?)
}
