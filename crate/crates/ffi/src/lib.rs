//! C interface to the pscbm library.
//!
//! Every fallible call returns a [`PscbmStatus`]; on failure a message is
//! kept per thread and can be read with [`pscbm_last_error`]. Handles are
//! opaque and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::c_char;

use pscbm::data::{load_embeddings, EmbeddingMatrix};
use pscbm::error::{Error, ErrorKind};
use pscbm::pscs::{greedy_merge, CorrelationMatrix};
use pscbm::training::TrainedModel;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PscbmStatus {
    Ok = 0,
    /// Bad arguments or configuration.
    Invalid = 1,
    /// A computation failed on valid input.
    Runtime = 2,
    /// Missing, unreadable or malformed file.
    Io = 3,
    /// A required pointer was NULL.
    NullPointer = 4,
    /// Internal panic; the library state is unchanged.
    Panic = 5,
}

/// Row-major matrix of embeddings.
pub struct PscbmEmbeddings {
    inner: EmbeddingMatrix,
}

/// Trained bottleneck, normalization and final layer.
pub struct PscbmModel {
    inner: TrainedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> PscbmStatus {
    match err.kind() {
        ErrorKind::Validation => PscbmStatus::Invalid,
        ErrorKind::Runtime => PscbmStatus::Runtime,
        ErrorKind::Io => PscbmStatus::Io,
    }
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PscbmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PscbmStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("{name} is NULL"));
            PscbmStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic".into());
            PscbmStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass pointers obtained from this library or valid C objects.
    unsafe { p.as_ref() }.ok_or(Failure::Null(name))
}

fn out_ptr<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    // SAFETY: as above; the caller owns the output slot.
    unsafe { p.as_mut() }.ok_or(Failure::Null(name))
}

fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    // SAFETY: non-null and NUL-terminated per the C contract.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Error::Invalid("path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

fn slice_arg<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    // SAFETY: the caller guarantees `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_out<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    // SAFETY: the caller guarantees `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn checked_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got != want {
        return Err(Error::Invalid(format!("{what}: buffer holds {got}, need {want}")).into());
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pscbm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pscbm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn pscbm_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Loads an EMB1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pscbm_embeddings_load(
    path: *const c_char,
    out: *mut *mut PscbmEmbeddings,
) -> PscbmStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let inner = load_embeddings(path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(PscbmEmbeddings { inner }));
        Ok(())
    })
}

/// Copies `rows * cols` row-major values into a new handle.
///
/// # Safety
/// `data` must hold `rows * cols` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pscbm_embeddings_from_data(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut PscbmEmbeddings,
) -> PscbmStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Invalid("rows * cols overflows".into()))?;
        let values = slice_arg(data, len, "data")?.to_vec();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("data[{i}] is not finite")).into());
        }
        let inner = EmbeddingMatrix::new(rows, cols, values)?;
        *slot = Box::into_raw(Box::new(PscbmEmbeddings { inner }));
        Ok(())
    })
}

/// Writes the matrix to an EMB1 file.
///
/// # Safety
/// `emb` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pscbm_embeddings_save(
    emb: *const PscbmEmbeddings,
    path: *const c_char,
) -> PscbmStatus {
    guard(|| {
        let emb = non_null(emb, "emb")?;
        pscbm::data::save_embeddings(&emb.inner, path_arg(path)?)?;
        Ok(())
    })
}

/// New handle with every row scaled to unit L2 norm.
///
/// # Safety
/// `emb` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pscbm_embeddings_normalize(
    emb: *const PscbmEmbeddings,
    out: *mut *mut PscbmEmbeddings,
) -> PscbmStatus {
    guard(|| {
        let emb = non_null(emb, "emb")?;
        let slot = out_ptr(out, "out")?;
        let inner = emb.inner.normalize_rows()?;
        *slot = Box::into_raw(Box::new(PscbmEmbeddings { inner }));
        Ok(())
    })
}

/// Row count, or 0 for NULL.
///
/// # Safety
/// `emb` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pscbm_embeddings_rows(emb: *const PscbmEmbeddings) -> usize {
    emb.as_ref().map_or(0, |e| e.inner.rows())
}

/// Column count, or 0 for NULL.
///
/// # Safety
/// `emb` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pscbm_embeddings_cols(emb: *const PscbmEmbeddings) -> usize {
    emb.as_ref().map_or(0, |e| e.inner.cols())
}

/// Copies row `row` into `out`, which must hold exactly `cols` values.
///
/// # Safety
/// `emb` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pscbm_embeddings_row(
    emb: *const PscbmEmbeddings,
    row: usize,
    out: *mut f64,
    len: usize,
) -> PscbmStatus {
    guard(|| {
        let emb = non_null(emb, "emb")?;
        if row >= emb.inner.rows() {
            return Err(Error::Invalid(format!(
                "row {row} out of range ({} rows)",
                emb.inner.rows()
            ))
            .into());
        }
        checked_len(len, emb.inner.cols(), "row")?;
        slice_out(out, len, "out")?.copy_from_slice(emb.inner.row(row));
        Ok(())
    })
}

/// # Safety
/// `emb` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pscbm_embeddings_free(emb: *mut PscbmEmbeddings) {
    if !emb.is_null() {
        drop(Box::from_raw(emb));
    }
}

/// Loads a `model.json` written by the training stages.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pscbm_model_load(
    path: *const c_char,
    out: *mut *mut PscbmModel,
) -> PscbmStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let inner = TrainedModel::load(path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(PscbmModel { inner }));
        Ok(())
    })
}

/// Embedding width, concept count and class count. Any output may be NULL.
///
/// # Safety
/// `model` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn pscbm_model_dims(
    model: *const PscbmModel,
    embedding_dim: *mut usize,
    num_concepts: *mut usize,
    num_classes: *mut usize,
) -> PscbmStatus {
    guard(|| {
        let dims = non_null(model, "model")?.inner.dims();
        for (p, v) in [
            (embedding_dim, dims.embedding_dim),
            (num_concepts, dims.num_concepts),
            (num_classes, dims.num_classes),
        ] {
            if let Some(slot) = p.as_mut() {
                *slot = v;
            }
        }
        Ok(())
    })
}

/// Predicted class per row of `emb`; `out` must hold one entry per row.
///
/// # Safety
/// Handles must be live; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn pscbm_model_predict(
    model: *const PscbmModel,
    emb: *const PscbmEmbeddings,
    out: *mut u32,
    len: usize,
) -> PscbmStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let emb = non_null(emb, "emb")?;
        checked_len(len, emb.inner.rows(), "predictions")?;
        let out = slice_out(out, len, "out")?;
        let preds = model.inner.predict(&emb.inner)?;
        for (o, &p) in out.iter_mut().zip(preds.as_slice()) {
            *o = p as u32;
        }
        Ok(())
    })
}

/// Normalized concept activations for one embedding of width
/// `embedding_dim`; `out` must hold `num_concepts` values.
///
/// # Safety
/// `model` must be live; buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pscbm_model_activations(
    model: *const PscbmModel,
    z: *const f64,
    z_len: usize,
    out: *mut f64,
    out_len: usize,
) -> PscbmStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let dims = model.inner.dims();
        checked_len(z_len, dims.embedding_dim, "embedding")?;
        checked_len(out_len, dims.num_concepts, "activations")?;
        let z = slice_arg(z, z_len, "z")?;
        let out = slice_out(out, out_len, "out")?;
        out.copy_from_slice(&model.inner.activations(z));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pscbm_model_free(model: *mut PscbmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Concept-efficient accuracy of a model with `num_concepts` concepts over
/// `num_classes` classes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pscbm_cea(
    acc: f64,
    num_concepts: usize,
    num_classes: usize,
    beta: f64,
    out: *mut f64,
) -> PscbmStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        *slot = pscbm::metrics::cea(acc, num_concepts, num_classes, beta)?;
        Ok(())
    })
}

/// Greedy merge over an `m x m` row-major correlation matrix. Writes the
/// representative of each concept to `merged_into` (survivors map to
/// themselves) and the survivor count to `num_survivors`.
///
/// # Safety
/// `q` must hold `m * m` doubles, `merged_into` `m` values; `num_survivors`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn pscbm_greedy_merge(
    q: *const f64,
    m: usize,
    tau_merge: f64,
    merged_into: *mut usize,
    num_survivors: *mut usize,
) -> PscbmStatus {
    guard(|| {
        let count = out_ptr(num_survivors, "num_survivors")?;
        let len = m
            .checked_mul(m)
            .ok_or_else(|| Error::Invalid("m * m overflows".into()))?;
        let data = slice_arg(q, len, "q")?.to_vec();
        let out = slice_out(merged_into, m, "merged_into")?;
        if tau_merge.is_nan() {
            return Err(Error::Invalid("tau_merge is NaN".into()).into());
        }
        let q = CorrelationMatrix::new(m, data)?;
        let (kept, map) = greedy_merge(&q, tau_merge);
        for (j, slot) in out.iter_mut().enumerate() {
            *slot = map.get(&j).copied().unwrap_or(j);
        }
        *count = kept.len();
        Ok(())
    })
}
