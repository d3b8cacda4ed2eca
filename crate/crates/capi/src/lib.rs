//! C ABI over the deployment surface: checkpoint loading, encoding,
//! truncation, cosine, and the vector index with exhaustive and
//! coarse-to-fine search.
//!
//! Conventions: objects are opaque handles created and destroyed by this
//! library; every fallible call returns an [`NeStatus`] and writes results
//! through out-pointers; null pointers are rejected with
//! `NE_STATUS_NULL_ARGUMENT`.

use std::ffi::{c_char, CStr};
use std::path::Path;
use std::ptr;

use notemb::encoder::{encode_features, truncate, Embedding, EncoderParams};
use notemb::error::Error;
use notemb::model::Modality;
use notemb::serving::{build_index, coarse_fine_search, search, VectorIndex};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NeStatus {
    Ok = 0,
    Validation = 1,
    Numeric = 2,
    Io = 3,
    NullArgument = 4,
    Utf8 = 5,
}

fn status_of(e: &Error) -> NeStatus {
    match e {
        Error::Validation(_) => NeStatus::Validation,
        Error::Numeric(_) => NeStatus::Numeric,
        Error::Io(_) | Error::Json(_) => NeStatus::Io,
    }
}

/// Item modality tags accepted by [`ne_encode`].
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NeModality {
    Image = 0,
    Text = 1,
    Ocr = 2,
}

/// Opaque encoder handle.
pub struct NeEncoder {
    params: EncoderParams,
}

/// Opaque vector-index handle.
pub struct NeIndex {
    index: VectorIndex,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ne_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn path_from(ptr_: *const c_char) -> Result<std::path::PathBuf, NeStatus> {
    if ptr_.is_null() {
        return Err(NeStatus::NullArgument);
    }
    let s = unsafe { CStr::from_ptr(ptr_) }
        .to_str()
        .map_err(|_| NeStatus::Utf8)?;
    Ok(Path::new(s).to_path_buf())
}

/// Loads an encoder checkpoint (`UNE1` format).
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer. On success `*out` owns the encoder and must be released with
/// [`ne_encoder_free`].
#[no_mangle]
pub unsafe extern "C" fn ne_encoder_load(path: *const c_char, out: *mut *mut NeEncoder) -> NeStatus {
    if out.is_null() {
        return NeStatus::NullArgument;
    }
    let path = match unsafe { path_from(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match EncoderParams::load(&path) {
        Ok(params) => {
            unsafe { *out = Box::into_raw(Box::new(NeEncoder { params })) };
            NeStatus::Ok
        }
        Err(e) => {
            unsafe { *out = ptr::null_mut() };
            status_of(&e)
        }
    }
}

/// Releases an encoder handle. Null is a no-op.
///
/// # Safety
/// `enc` must have come from [`ne_encoder_load`] and not been freed already.
#[no_mangle]
pub unsafe extern "C" fn ne_encoder_free(enc: *mut NeEncoder) {
    if !enc.is_null() {
        drop(unsafe { Box::from_raw(enc) });
    }
}

/// Raw feature dimension the encoder expects per item.
///
/// # Safety
/// `enc` must be a live encoder handle.
#[no_mangle]
pub unsafe extern "C" fn ne_encoder_raw_dim(enc: *const NeEncoder) -> u32 {
    if enc.is_null() {
        return 0;
    }
    unsafe { &*enc }.params.d_raw as u32
}

/// Full output embedding dimension D.
///
/// # Safety
/// `enc` must be a live encoder handle.
#[no_mangle]
pub unsafe extern "C" fn ne_encoder_out_dim(enc: *const NeEncoder) -> u32 {
    if enc.is_null() {
        return 0;
    }
    unsafe { &*enc }.params.d_out() as u32
}

/// Writes the nested dims into `out` (up to `cap` entries) and returns how
/// many exist in total.
///
/// # Safety
/// `enc` must be live; `out` must point to at least `cap` writable u32s.
#[no_mangle]
pub unsafe extern "C" fn ne_encoder_nested_dims(
    enc: *const NeEncoder,
    out: *mut u32,
    cap: usize,
) -> usize {
    if enc.is_null() {
        return 0;
    }
    let dims = unsafe { &*enc }.params.dims.as_slice();
    if !out.is_null() {
        for (i, &d) in dims.iter().take(cap).enumerate() {
            unsafe { *out.add(i) = d as u32 };
        }
    }
    dims.len()
}

/// Encodes a flattened composite of `n_items` items into a unit-norm
/// embedding of the full dimension. `features` holds `n_items * raw_dim`
/// f32 values row-major; `modalities` holds one tag per item.
///
/// # Safety
/// `enc` must be live; `features` must point to `n_items * raw_dim` floats;
/// `modalities` to `n_items` tags; `out` to `out_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn ne_encode(
    enc: *const NeEncoder,
    features: *const f32,
    modalities: *const NeModality,
    n_items: usize,
    out: *mut f64,
) -> NeStatus {
    if enc.is_null() || features.is_null() || modalities.is_null() || out.is_null() {
        return NeStatus::NullArgument;
    }
    let enc = unsafe { &*enc };
    let d_raw = enc.params.d_raw;
    let feats = unsafe { std::slice::from_raw_parts(features, n_items * d_raw) };
    let mods = unsafe { std::slice::from_raw_parts(modalities, n_items) };
    let items = (0..n_items).map(|i| {
        let m = match mods[i] {
            NeModality::Image => Modality::Image,
            NeModality::Text => Modality::Text,
            NeModality::Ocr => Modality::Ocr,
        };
        (m, &feats[i * d_raw..(i + 1) * d_raw])
    });
    match encode_features(&enc.params, items) {
        Ok(e) => {
            let dst = unsafe { std::slice::from_raw_parts_mut(out, e.dim()) };
            dst.copy_from_slice(e.values());
            NeStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Re-normalized prefix truncation to nested dim `k`; writes `k` doubles.
///
/// # Safety
/// `enc` must be live; `emb` must point to `dim` doubles; `out` to `k`.
#[no_mangle]
pub unsafe extern "C" fn ne_truncate(
    enc: *const NeEncoder,
    emb: *const f64,
    dim: usize,
    k: u32,
    out: *mut f64,
) -> NeStatus {
    if enc.is_null() || emb.is_null() || out.is_null() {
        return NeStatus::NullArgument;
    }
    let enc = unsafe { &*enc };
    let v = unsafe { std::slice::from_raw_parts(emb, dim) };
    match truncate(&Embedding(v.to_vec()), k as usize, &enc.params.dims) {
        Ok(t) => {
            let dst = unsafe { std::slice::from_raw_parts_mut(out, t.dim()) };
            dst.copy_from_slice(t.values());
            NeStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Cosine of two unit vectors of equal length, clamped to [-1, 1].
///
/// # Safety
/// `a` and `b` must point to `dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ne_cosine(a: *const f64, b: *const f64, dim: usize, out: *mut f64) -> NeStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        return NeStatus::NullArgument;
    }
    let av = unsafe { std::slice::from_raw_parts(a, dim) };
    let bv = unsafe { std::slice::from_raw_parts(b, dim) };
    match notemb::encoder::cosine(&Embedding(av.to_vec()), &Embedding(bv.to_vec())) {
        Ok(c) => {
            unsafe { *out = c };
            NeStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Creates an empty index of dimension `dim`; `k_coarse` of 0 disables the
/// coarse store.
///
/// # Safety
/// `out` must be a valid pointer; the handle must be freed with
/// [`ne_index_free`].
#[no_mangle]
pub unsafe extern "C" fn ne_index_new(dim: u32, k_coarse: u32, out: *mut *mut NeIndex) -> NeStatus {
    if out.is_null() {
        return NeStatus::NullArgument;
    }
    let kc = (k_coarse > 0).then_some(k_coarse as usize);
    if let Some(k) = kc {
        if k > dim as usize {
            return NeStatus::Validation;
        }
    }
    // Build an empty index via the constructor to share validation.
    match build_index(&[], kc, None) {
        Ok(mut index) => {
            index.dim = dim as usize;
            unsafe { *out = Box::into_raw(Box::new(NeIndex { index })) };
            NeStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Loads an index file (`UNIX1` format).
///
/// # Safety
/// `path` must be NUL-terminated; `out` valid; free with [`ne_index_free`].
#[no_mangle]
pub unsafe extern "C" fn ne_index_open(path: *const c_char, out: *mut *mut NeIndex) -> NeStatus {
    if out.is_null() {
        return NeStatus::NullArgument;
    }
    let path = match unsafe { path_from(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match VectorIndex::load(&path) {
        Ok(index) => {
            unsafe { *out = Box::into_raw(Box::new(NeIndex { index })) };
            NeStatus::Ok
        }
        Err(e) => {
            unsafe { *out = ptr::null_mut() };
            status_of(&e)
        }
    }
}

/// Releases an index handle. Null is a no-op.
///
/// # Safety
/// `idx` must have come from this library and not been freed already.
#[no_mangle]
pub unsafe extern "C" fn ne_index_free(idx: *mut NeIndex) {
    if !idx.is_null() {
        drop(unsafe { Box::from_raw(idx) });
    }
}

/// Number of stored vectors.
///
/// # Safety
/// `idx` must be a live index handle.
#[no_mangle]
pub unsafe extern "C" fn ne_index_len(idx: *const NeIndex) -> usize {
    if idx.is_null() {
        return 0;
    }
    unsafe { &*idx }.index.len()
}

/// Appends a unit-norm vector under `id`.
///
/// # Safety
/// `idx` must be live and uniquely borrowed; `emb` must point to `dim`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn ne_index_add(
    idx: *mut NeIndex,
    id: u64,
    emb: *const f64,
    dim: usize,
) -> NeStatus {
    if idx.is_null() || emb.is_null() {
        return NeStatus::NullArgument;
    }
    let idx = unsafe { &mut *idx };
    let v = unsafe { std::slice::from_raw_parts(emb, dim) };
    match idx.index.append(id, &Embedding(v.to_vec())) {
        Ok(()) => NeStatus::Ok,
        Err(e) => status_of(&e),
    }
}

/// Saves the index to a file.
///
/// # Safety
/// `idx` must be live; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ne_index_save(idx: *const NeIndex, path: *const c_char) -> NeStatus {
    if idx.is_null() {
        return NeStatus::NullArgument;
    }
    let path = match unsafe { path_from(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match unsafe { &*idx }.index.save(&path) {
        Ok(()) => NeStatus::Ok,
        Err(e) => status_of(&e),
    }
}

unsafe fn write_hits(
    hits: Vec<(u64, f64)>,
    out_ids: *mut u64,
    out_sims: *mut f64,
    out_len: *mut usize,
) -> NeStatus {
    unsafe {
        *out_len = hits.len();
        for (i, (id, sim)) in hits.into_iter().enumerate() {
            *out_ids.add(i) = id;
            *out_sims.add(i) = sim;
        }
    }
    NeStatus::Ok
}

/// Exhaustive exact top-k search. Writes up to `k` results and the found
/// count into `out_len`.
///
/// # Safety
/// `idx` live; `query` points to `dim` doubles; `out_ids`/`out_sims` hold at
/// least `k` entries; `out_len` is writable.
#[no_mangle]
pub unsafe extern "C" fn ne_index_search(
    idx: *const NeIndex,
    query: *const f64,
    dim: usize,
    k: usize,
    out_ids: *mut u64,
    out_sims: *mut f64,
    out_len: *mut usize,
) -> NeStatus {
    if idx.is_null() || query.is_null() || out_ids.is_null() || out_sims.is_null() || out_len.is_null() {
        return NeStatus::NullArgument;
    }
    let q = unsafe { std::slice::from_raw_parts(query, dim) };
    match search(&unsafe { &*idx }.index, &Embedding(q.to_vec()), k) {
        Ok(hits) => unsafe { write_hits(hits, out_ids, out_sims, out_len) },
        Err(e) => status_of(&e),
    }
}

/// Coarse-to-fine top-k search: shortlist by the truncated cosine, re-rank
/// the shortlist at full dimension.
///
/// # Safety
/// As [`ne_index_search`]; the index must have a coarse store.
#[no_mangle]
pub unsafe extern "C" fn ne_index_search_coarse_fine(
    idx: *const NeIndex,
    query: *const f64,
    dim: usize,
    k: usize,
    shortlist: usize,
    out_ids: *mut u64,
    out_sims: *mut f64,
    out_len: *mut usize,
) -> NeStatus {
    if idx.is_null() || query.is_null() || out_ids.is_null() || out_sims.is_null() || out_len.is_null() {
        return NeStatus::NullArgument;
    }
    let q = unsafe { std::slice::from_raw_parts(query, dim) };
    match coarse_fine_search(&unsafe { &*idx }.index, &Embedding(q.to_vec()), k, shortlist) {
        Ok(hits) => unsafe { write_hits(hits, out_ids, out_sims, out_len) },
        Err(e) => status_of(&e),
    }
}
