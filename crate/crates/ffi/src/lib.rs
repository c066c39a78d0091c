//! C ABI over `oscar-kv`.
//!
//! Every fallible call returns an [`OscarStatus`]; on failure a message is kept per
//! thread and can be read with [`oscar_last_error`]. Handles are opaque and must be
//! released with their `_free` function. Activations cross the boundary as row-major
//! `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use oscar_kv::cache::{CacheCodec, CacheLayout, KvCacheState};
use oscar_kv::calibration::RotationBundle;
use oscar_kv::io::load_bundle;
use oscar_kv::linalg::RealMatrix;
use oscar_kv::quant::{self, QuantConfig, QuantizedCacheRow};
use oscar_kv::OscarError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OscarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    NonFinite = 4,
    Convergence = 5,
    Format = 6,
    Io = 7,
    Consistency = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A calibrated rotation bundle.
pub struct OscarBundle {
    inner: RotationBundle,
}

/// Cache state for one kv-head of one request.
pub struct OscarCache {
    inner: KvCacheState,
}

struct Failure(OscarStatus, String);

impl From<OscarError> for Failure {
    fn from(e: OscarError) -> Self {
        let status = match &e {
            OscarError::Dimension(_) | OscarError::ShapeMismatch(_) => OscarStatus::Dimension,
            OscarError::Input(_) | OscarError::EmptyDump(_) | OscarError::EmptyGrid => OscarStatus::InvalidArgument,
            OscarError::NonFinite(_) | OscarError::FullyMasked => OscarStatus::NonFinite,
            OscarError::Convergence { .. } => OscarStatus::Convergence,
            OscarError::Format(_) => OscarStatus::Format,
            OscarError::Io(_) => OscarStatus::Io,
            OscarError::Consistency(_) => OscarStatus::Consistency,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult = Result<(), Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> OscarStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OscarStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            OscarStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(OscarStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn write<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn quant_config(bits: u8, group_size: usize, clip_ratio: f64, bf16_meta: bool) -> Result<QuantConfig, Failure> {
    Ok(QuantConfig::new(bits, group_size, clip_ratio)?.with_bf16_meta(bf16_meta))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn oscar_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn oscar_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Bytes needed to pack `len` codes of `bits` bits.
#[no_mangle]
pub extern "C" fn oscar_packed_len(len: usize, bits: u8) -> usize {
    quant::packed_len(len, bits)
}

/// Effective bits per element with `protected` full-precision tokens out of `context`.
///
/// # Safety
/// `out_bpe` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn oscar_effective_bpe(
    bits: u8,
    group_size: usize,
    meta_bits: u32,
    protected_tokens: usize,
    context: usize,
    out_bpe: *mut f64,
) -> OscarStatus {
    guard(|| {
        let o = out(out_bpe, "out_bpe")?;
        *o = quant::effective_bpe(bits, group_size, meta_bits, protected_tokens, context)?;
        Ok(())
    })
}

/// Clips and quantizes one row of `len` values.
///
/// Writes `oscar_packed_len(len, bits)` bytes to `packed` and `len / group_size`
/// scales and zero points. `tau` receives the clip threshold and may be null.
///
/// # Safety
/// All non-null pointers must reference buffers of the stated capacities.
#[no_mangle]
pub unsafe extern "C" fn oscar_quantize_row(
    row: *const f64,
    len: usize,
    bits: u8,
    group_size: usize,
    clip_ratio: f64,
    bf16_meta: bool,
    packed: *mut u8,
    packed_capacity: usize,
    scales: *mut f64,
    zeros: *mut f64,
    groups_capacity: usize,
    tau: *mut f64,
) -> OscarStatus {
    guard(|| {
        let cfg = quant_config(bits, group_size, clip_ratio, bf16_meta)?;
        let row = read(row, len, "row")?;
        let q = quant::clip_and_quantize(row, &cfg)?;
        if packed_capacity < q.packed.len() || groups_capacity < q.scales.len() {
            return Err(Failure(
                OscarStatus::BufferTooSmall,
                format!(
                    "need {} packed bytes and {} groups, got {packed_capacity} and {groups_capacity}",
                    q.packed.len(),
                    q.scales.len()
                ),
            ));
        }
        write(packed, q.packed.len(), "packed")?.copy_from_slice(&q.packed);
        write(scales, q.scales.len(), "scales")?.copy_from_slice(&q.scales);
        write(zeros, q.zeros.len(), "zeros")?.copy_from_slice(&q.zeros);
        if let Some(t) = tau.as_mut() {
            *t = q.tau;
        }
        Ok(())
    })
}

/// Reconstructs `len` values from packed codes and per-group scales and zero points.
///
/// # Safety
/// `packed` must hold `oscar_packed_len(len, bits)` bytes, `scales` and `zeros`
/// `len / group_size` values each, and `out` room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn oscar_dequantize_row(
    packed: *const u8,
    len: usize,
    bits: u8,
    group_size: usize,
    scales: *const f64,
    zeros: *const f64,
    out_row: *mut f64,
) -> OscarStatus {
    guard(|| {
        let cfg = quant_config(bits, group_size, 1.0, false)?;
        cfg.validate_for(len)?;
        let groups = cfg.groups(len);
        let q = QuantizedCacheRow {
            packed: read(packed, quant::packed_len(len, bits), "packed")?.to_vec(),
            scales: read(scales, groups, "scales")?.to_vec(),
            zeros: read(zeros, groups, "zeros")?.to_vec(),
            tau: f64::NAN,
            len,
            bits,
        };
        let row = quant::dequantize_row(&q, &cfg)?;
        write(out_row, len, "out_row")?.copy_from_slice(&row);
        Ok(())
    })
}

/// Loads a rotation bundle written by `oscar calibrate`.
///
/// # Safety
/// `path` must be a nul-terminated UTF-8 string and `out_bundle` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn oscar_bundle_load(path: *const c_char, out_bundle: *mut *mut OscarBundle) -> OscarStatus {
    guard(|| {
        let o = out(out_bundle, "out_bundle")?;
        *o = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(OscarStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
        let inner = load_bundle(Path::new(path))?;
        *o = Box::into_raw(Box::new(OscarBundle { inner }));
        Ok(())
    })
}

/// Releases a bundle; null is ignored.
///
/// # Safety
/// `bundle` must come from `oscar_bundle_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn oscar_bundle_free(bundle: *mut OscarBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// # Safety
/// `bundle` must be a live handle and `out_dim` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn oscar_bundle_head_dim(bundle: *const OscarBundle, out_dim: *mut usize) -> OscarStatus {
    guard(|| {
        let b = bundle.as_ref().ok_or_else(|| null("bundle"))?;
        *out(out_dim, "out_dim")? = b.inner.head_dim;
        Ok(())
    })
}

/// Calibrated key and value clip ratios for one kv-head.
///
/// # Safety
/// `bundle` must be a live handle; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn oscar_bundle_clip_ratios(
    bundle: *const OscarBundle,
    layer: usize,
    head: usize,
    out_key: *mut f64,
    out_value: *mut f64,
) -> OscarStatus {
    guard(|| {
        let b = bundle.as_ref().ok_or_else(|| null("bundle"))?;
        let slot = b.inner.slot(layer, head)?;
        *out(out_key, "out_key")? = slot.key.clip_ratio;
        *out(out_value, "out_value")? = slot.value.clip_ratio;
        Ok(())
    })
}

/// Creates an empty cache for one kv-head using the bundle's rotations and quantizers.
///
/// # Safety
/// `bundle` must be a live handle and `out_cache` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn oscar_cache_new(
    bundle: *const OscarBundle,
    layer: usize,
    head: usize,
    sink: usize,
    recent: usize,
    out_cache: *mut *mut OscarCache,
) -> OscarStatus {
    guard(|| {
        let o = out(out_cache, "out_cache")?;
        *o = ptr::null_mut();
        let b = &bundle.as_ref().ok_or_else(|| null("bundle"))?.inner;
        let slot = b.slot(layer, head)?;
        let codec = CacheCodec::Affine {
            key: b.key_config(slot),
            value: b.value_config(slot),
        };
        let inner = KvCacheState::new(
            CacheLayout::new(sink, recent),
            codec,
            slot.key.rotation.clone(),
            slot.value.rotation.clone(),
        )?;
        *o = Box::into_raw(Box::new(OscarCache { inner }));
        Ok(())
    })
}

/// Releases a cache; null is ignored.
///
/// # Safety
/// `cache` must come from `oscar_cache_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn oscar_cache_free(cache: *mut OscarCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

unsafe fn cache_mut<'a>(cache: *mut OscarCache) -> Result<&'a mut KvCacheState, Failure> {
    Ok(&mut cache.as_mut().ok_or_else(|| null("cache"))?.inner)
}

unsafe fn cache_ref<'a>(cache: *const OscarCache) -> Result<&'a KvCacheState, Failure> {
    Ok(&cache.as_ref().ok_or_else(|| null("cache"))?.inner)
}

/// Writes `rows` prompt tokens at once.
///
/// # Safety
/// `keys` and `values` must each hold `rows × head_dim` values.
#[no_mangle]
pub unsafe extern "C" fn oscar_cache_prefill(
    cache: *mut OscarCache,
    keys: *const f64,
    values: *const f64,
    rows: usize,
) -> OscarStatus {
    guard(|| {
        let c = cache_mut(cache)?;
        let d = c.head_dim();
        let k = RealMatrix::from_vec(rows, d, read(keys, rows * d, "keys")?.to_vec())?;
        let v = RealMatrix::from_vec(rows, d, read(values, rows * d, "values")?.to_vec())?;
        c.prefill(&k, &v)?;
        Ok(())
    })
}

/// Appends one token, then attends `query` over the whole cache.
///
/// # Safety
/// `query`, `key`, `value` and `out_attn` must each hold `head_dim` values.
#[no_mangle]
pub unsafe extern "C" fn oscar_cache_decode(
    cache: *mut OscarCache,
    query: *const f64,
    key: *const f64,
    value: *const f64,
    out_attn: *mut f64,
) -> OscarStatus {
    guard(|| {
        let c = cache_mut(cache)?;
        let d = c.head_dim();
        let o = c.decode_step(read(query, d, "query")?, read(key, d, "key")?, read(value, d, "value")?)?;
        write(out_attn, d, "out_attn")?.copy_from_slice(&o);
        Ok(())
    })
}

/// Attends `query` over the current cache without appending.
///
/// # Safety
/// `query` and `out_attn` must each hold `head_dim` values.
#[no_mangle]
pub unsafe extern "C" fn oscar_cache_attend(
    cache: *const OscarCache,
    query: *const f64,
    out_attn: *mut f64,
) -> OscarStatus {
    guard(|| {
        let c = cache_ref(cache)?;
        let d = c.head_dim();
        let o = c.attend(read(query, d, "query")?)?;
        write(out_attn, d, "out_attn")?.copy_from_slice(&o);
        Ok(())
    })
}

/// Token counts of the sink, quantized history and recent segments.
///
/// # Safety
/// `cache` must be a live handle; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn oscar_cache_lengths(
    cache: *const OscarCache,
    out_sink: *mut usize,
    out_history: *mut usize,
    out_recent: *mut usize,
) -> OscarStatus {
    guard(|| {
        let c = cache_ref(cache)?;
        *out(out_sink, "out_sink")? = c.sink_len();
        *out(out_history, "out_history")? = c.history_len();
        *out(out_recent, "out_recent")? = c.recent_len();
        Ok(())
    })
}
