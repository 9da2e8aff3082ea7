//! C ABI for loading checkpoints, running predictions, and computing the
//! evaluation metrics.
//!
//! Every fallible function returns an [`HsStatus`]. On failure the message is
//! kept per thread and can be read with [`hs_last_error_message`]. Models are
//! handed out as opaque [`HsModel`] pointers that must be released with
//! [`hs_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use histospace::evaluation::{contingency, kmeans, pearson_r};
use histospace::models::{load_checkpoint, ModelBundle};
use histospace::tensor::Tensor;
use histospace::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Parse = 5,
    Checkpoint = 6,
    Internal = 7,
}

/// A loaded autoencoder or expression model.
pub struct HsModel {
    inner: ModelBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> HsStatus {
    match e {
        Error::Shape(_) => HsStatus::Shape,
        Error::InvalidArgument(_) | Error::OutOfBounds { .. } => HsStatus::InvalidArgument,
        Error::Parse { .. } | Error::Json { .. } | Error::Validation(_) => HsStatus::Parse,
        Error::Io { .. } | Error::Image { .. } => HsStatus::Io,
        Error::Checkpoint(_) => HsStatus::Checkpoint,
        Error::MissingGradient(_) => HsStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), (HsStatus, String)>) -> HsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HsStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HsStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (HsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null_err(name: &str) -> (HsStatus, String) {
    (HsStatus::NullPointer, format!("`{name}` is null"))
}

fn arg_err(msg: impl Into<String>) -> (HsStatus, String) {
    (HsStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], (HsStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null_err(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], (HsStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null_err(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn hs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory into `*out`.
///
/// # Safety
/// `dir` must be a NUL-terminated UTF-8 path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hs_model_load(dir: *const c_char, out: *mut *mut HsModel) -> HsStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null_err("dir"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(dir).to_str().map_err(|_| arg_err("path is not valid UTF-8"))?;
        let inner = load_checkpoint(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(HsModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`hs_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hs_model_free(model: *mut HsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Edge length of the square tiles the model expects, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hs_model_input_size(model: *const HsModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_size)
}

/// Number of predicted genes, or 0 for an autoencoder or null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hs_model_n_outputs(model: *const HsModel) -> usize {
    model.as_ref().and_then(|m| m.inner.n_outputs()).unwrap_or(0)
}

/// # Safety
/// `tiles` must hold `n_tiles * 3 * S * S` values.
unsafe fn tile_tensor(model: &HsModel, tiles: *const f64, n_tiles: usize) -> Result<Tensor, (HsStatus, String)> {
    let s = model.inner.input_size;
    let data = slice(tiles, n_tiles * 3 * s * s, "tiles")?;
    Tensor::new(&[n_tiles, 3, s, s], data.to_vec()).map_err(lib_err)
}

/// Predicts expression for `n_tiles` channel-planar tiles (`[N, 3, S, S]`,
/// values in [0, 1]) into `out`, which must hold `n_tiles * n_outputs` values.
///
/// # Safety
/// `model` must be a live handle; buffers must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn hs_model_predict(
    model: *const HsModel,
    tiles: *const f64,
    n_tiles: usize,
    out: *mut f64,
    out_len: usize,
) -> HsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null_err("model"))?;
        let genes = m.inner.n_outputs().ok_or_else(|| arg_err("model has no expression head"))?;
        if out_len != n_tiles * genes {
            return Err(arg_err(format!("out_len {out_len} != {n_tiles} tiles x {genes} genes")));
        }
        if n_tiles == 0 {
            return Ok(());
        }
        let input = tile_tensor(m, tiles, n_tiles)?;
        let pred = m.inner.predict_expression(&input).map_err(lib_err)?;
        slice_mut(out, out_len, "out")?.copy_from_slice(pred.data());
        Ok(())
    })
}

/// Reconstructs tiles through an autoencoder; `out` has the input's length.
///
/// # Safety
/// `model` must be a live handle; buffers must hold `n_tiles * 3 * S * S`
/// values.
#[no_mangle]
pub unsafe extern "C" fn hs_model_reconstruct(model: *const HsModel, tiles: *const f64, n_tiles: usize, out: *mut f64) -> HsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null_err("model"))?;
        if n_tiles == 0 {
            return Ok(());
        }
        let input = tile_tensor(m, tiles, n_tiles)?;
        let rec = m.inner.reconstruct(&input).map_err(lib_err)?;
        slice_mut(out, rec.data().len(), "out")?.copy_from_slice(rec.data());
        Ok(())
    })
}

/// Pearson correlation of two length-`n` vectors. A zero-variance input
/// yields NaN with status `Ok`.
///
/// # Safety
/// `x` and `y` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hs_pearson_r(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> HsStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null_err("out"))?;
        let r = pearson_r(slice(x, n, "x")?, slice(y, n, "y")?).map_err(lib_err)?;
        *out = r;
        Ok(())
    })
}

/// Seeded k-means on `n × d` row-major points; writes one label per point.
///
/// # Safety
/// `points` must hold `n * d` values and `labels_out` `n` slots.
#[no_mangle]
pub unsafe extern "C" fn hs_kmeans(
    points: *const f64,
    n: usize,
    d: usize,
    k: usize,
    seed: u64,
    max_iter: usize,
    labels_out: *mut u32,
) -> HsStatus {
    guard(|| {
        let pts = slice(points, n * d, "points")?;
        let res = kmeans(pts, d, k, seed, max_iter).map_err(lib_err)?;
        let out = slice_mut(labels_out, n, "labels_out")?;
        for (o, &l) in out.iter_mut().zip(&res.labels) {
            *o = l as u32;
        }
        Ok(())
    })
}

/// Best-permutation agreement between cluster ids and class ids. Classes
/// are non-negative integers; a negative class marks an unlabeled item that
/// is left out. Writes the matched and scored counts.
///
/// # Safety
/// `clusters` and `classes` must hold `n` values; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn hs_contingency(
    clusters: *const u32,
    classes: *const i32,
    n: usize,
    matched_out: *mut usize,
    total_out: *mut usize,
) -> HsStatus {
    guard(|| {
        let matched_out = matched_out.as_mut().ok_or_else(|| null_err("matched_out"))?;
        let total_out = total_out.as_mut().ok_or_else(|| null_err("total_out"))?;
        let pred: Vec<usize> = slice(clusters, n, "clusters")?.iter().map(|&c| c as usize).collect();
        // Zero-padded names keep the class order numeric.
        let truth: Vec<Option<String>> =
            slice(classes, n, "classes")?.iter().map(|&c| (c >= 0).then(|| format!("{c:010}"))).collect();
        let c = contingency(&pred, &truth).map_err(lib_err)?;
        *matched_out = c.matched;
        *total_out = c.total;
        Ok(())
    })
}
