//! C interface to `atlascrf`.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `ac_*_free`. Every fallible call returns an
//! [`AcStatus`]; on failure the message is kept per thread and can be read
//! with [`ac_last_error`]. Panics are caught and reported as
//! [`AcStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use atlascrf::atlas::{align_translation, read_atlas};
use atlascrf::checkpoint::Checkpoint;
use atlascrf::metrics::dsc;
use atlascrf::train::predict;
use atlascrf::unary::logits_from_probabilities;
use atlascrf::vol1::{read_labels, read_prob, read_scalar, write_vol1, Volume};
use atlascrf::{argmax_labels, mean_field_infer, CamInput, CamParams, Dims, Error, LabelMap, ProbVolume, ScalarVolume};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A path was not valid UTF-8, or a scalar argument was out of range.
    InvalidArgument = 2,
    Io = 3,
    /// Malformed or inconsistent file contents.
    Format = 4,
    /// Volumes with incompatible shapes or class counts.
    Shape = 5,
    /// A NaN or infinity reached a computation.
    NonFinite = 6,
    /// A checkpoint failed its digest or consistency checks.
    Integrity = 7,
    /// Caller buffer too small; the error message states the required length.
    BufferTooSmall = 8,
    Internal = 9,
}

impl From<&Error> for AcStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => AcStatus::Io,
            Error::Shape(_) | Error::KindMismatch { .. } => AcStatus::Shape,
            Error::NonFinite { .. } => AcStatus::NonFinite,
            Error::CheckpointIntegrity(_) | Error::TapeIntegrity(_) => AcStatus::Integrity,
            Error::InvalidParam(_) | Error::Config(_) => AcStatus::InvalidArgument,
            Error::GradcheckFailed(_) | Error::Undefined(_) => AcStatus::Internal,
            _ => AcStatus::Format,
        }
    }
}

/// Scalar intensity volume.
pub struct AcScalar(ScalarVolume);
/// K-channel probability or logit volume.
pub struct AcProb(ProbVolume);
/// Integer label map.
pub struct AcLabels(LabelMap);
/// Atlas scan and label probabilities.
pub struct AcAtlas(atlascrf::AtlasPair);
/// Trained CRF parameters and unary model.
pub struct AcModel(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(AcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(AcStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            AcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AcStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(AcStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(AcStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Fail> {
    h.as_ref().ok_or_else(|| null(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(h: *mut T) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

unsafe fn copy_out<T: Copy>(src: &[T], buf: *mut T, len: usize) -> Result<(), Fail> {
    if len < src.len() {
        return Err(Fail(AcStatus::BufferTooSmall, format!("buffer holds {len} values, need {}", src.len())));
    }
    if buf.is_null() {
        return Err(null("buf"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `d*h*w` intensities (x fastest) into a new volume.
///
/// # Safety
/// `data` must point to `d*h*w` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_scalar_new(d: usize, h: usize, w: usize, data: *const f64, out: *mut *mut AcScalar) -> AcStatus {
    guard(|| {
        let dims = Dims::new(d, h, w);
        if data.is_null() && !dims.is_empty() {
            return Err(null("data"));
        }
        let v = if dims.is_empty() { Vec::new() } else { std::slice::from_raw_parts(data, dims.len()).to_vec() };
        emit(out, AcScalar(ScalarVolume::new(dims, v)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_scalar_read(path: *const c_char, out: *mut *mut AcScalar) -> AcStatus {
    guard(|| emit(out, AcScalar(read_scalar(path_arg(path)?)?)))
}

/// # Safety
/// `v` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ac_scalar_free(v: *mut AcScalar) {
    free(v)
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_prob_read(path: *const c_char, out: *mut *mut AcProb) -> AcStatus {
    guard(|| emit(out, AcProb(read_prob(path_arg(path)?)?)))
}

/// Shape of a probability volume. Any output pointer may be null.
///
/// # Safety
/// `v` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_prob_shape(v: *const AcProb, k: *mut usize, d: *mut usize, h: *mut usize, w: *mut usize) -> AcStatus {
    guard(|| {
        let v = &handle(v, "volume")?.0;
        let dims = v.dims();
        for (p, x) in [(k, v.k()), (d, dims.d), (h, dims.h), (w, dims.w)] {
            if !p.is_null() {
                *p = x;
            }
        }
        Ok(())
    })
}

/// Copies the `k*d*h*w` values, channel-major, into `buf`.
///
/// # Safety
/// `v` must be a live handle; `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ac_prob_copy(v: *const AcProb, buf: *mut f64, len: usize) -> AcStatus {
    guard(|| copy_out(handle(v, "volume")?.0.data(), buf, len))
}

/// # Safety
/// `v` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ac_prob_free(v: *mut AcProb) {
    free(v)
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_labels_read(path: *const c_char, out: *mut *mut AcLabels) -> AcStatus {
    guard(|| emit(out, AcLabels(read_labels(path_arg(path)?)?)))
}

/// # Safety
/// `v` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ac_labels_write(v: *const AcLabels, path: *const c_char) -> AcStatus {
    guard(|| Ok(write_vol1(path_arg(path)?, &Volume::Label(handle(v, "labels")?.0.clone()))?))
}

/// Copies the `d*h*w` labels into `buf`.
///
/// # Safety
/// `v` must be a live handle; `buf` must hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ac_labels_copy(v: *const AcLabels, buf: *mut u16, len: usize) -> AcStatus {
    guard(|| copy_out(handle(v, "labels")?.0.data(), buf, len))
}

/// Per-voxel argmax of a probability volume.
///
/// # Safety
/// `q` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_argmax(q: *const AcProb, out: *mut *mut AcLabels) -> AcStatus {
    guard(|| emit(out, AcLabels(argmax_labels(&handle(q, "volume")?.0))))
}

/// Dice overlap of one class.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_dice(pred: *const AcLabels, gt: *const AcLabels, class: usize, out: *mut f64) -> AcStatus {
    guard(|| {
        let v = dsc(&handle(pred, "pred")?.0, &handle(gt, "gt")?.0, class)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = v;
        Ok(())
    })
}

/// # Safety
/// `v` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ac_labels_free(v: *mut AcLabels) {
    free(v)
}

/// Loads an atlas from its JSON sidecar.
///
/// # Safety
/// `sidecar` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_atlas_read(sidecar: *const c_char, out: *mut *mut AcAtlas) -> AcStatus {
    guard(|| emit(out, AcAtlas(read_atlas(&path_arg(sidecar)?)?.0)))
}

/// # Safety
/// `v` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ac_atlas_free(v: *mut AcAtlas) {
    free(v)
}

/// Loads and verifies a checkpoint directory or its manifest.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_model_load(path: *const c_char, out: *mut *mut AcModel) -> AcStatus {
    guard(|| emit(out, AcModel(Checkpoint::load(&path_arg(path)?)?)))
}

/// Number of classes the model predicts.
///
/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ac_model_classes(m: *const AcModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.model.k())
}

/// # Safety
/// `v` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ac_model_free(v: *mut AcModel) {
    free(v)
}

/// Inference settings for [`ac_infer_unary`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AcInferOptions {
    pub iters: usize,
    pub enable_prior: bool,
    pub enable_smooth: bool,
    /// Translation search radius in voxels; 0 uses the atlas as given.
    pub align_translation: usize,
}

/// Library defaults for [`AcInferOptions`].
#[no_mangle]
pub extern "C" fn ac_infer_options_default() -> AcInferOptions {
    let p = CamParams::new(2, Dims::cube(1));
    AcInferOptions { iters: p.iters, enable_prior: p.enable_prior, enable_smooth: p.enable_smooth, align_translation: 0 }
}

fn aligned(atlas: &AcAtlas, target: &ScalarVolume, shift: usize) -> atlascrf::Result<atlascrf::AtlasPair> {
    if shift == 0 {
        return Ok(atlas.0.clone());
    }
    Ok(align_translation(&atlas.0, target, shift)?.0)
}

/// Mean-field inference with a trained model. Writes the final marginals.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_infer(
    model: *const AcModel,
    target: *const AcScalar,
    atlas: *const AcAtlas,
    align_shift: usize,
    out: *mut *mut AcProb,
) -> AcStatus {
    guard(|| {
        let ck = &handle(model, "model")?.0;
        let target = &handle(target, "target")?.0;
        let atlas = aligned(handle(atlas, "atlas")?, target, align_shift)?;
        emit(out, AcProb(predict(&ck.params, &ck.model, target, &atlas)?))
    })
}

/// Mean-field inference on precomputed unaries with default CRF weights.
/// Normalized unaries are read as probabilities, anything else as logits.
///
/// # Safety
/// Handles must be live; `opts` may be null for defaults; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_infer_unary(
    target: *const AcScalar,
    unary: *const AcProb,
    atlas: *const AcAtlas,
    opts: *const AcInferOptions,
    out: *mut *mut AcProb,
) -> AcStatus {
    guard(|| {
        let target = &handle(target, "target")?.0;
        let unary = &handle(unary, "unary")?.0;
        let atlas = handle(atlas, "atlas")?;
        let o = opts.as_ref().copied().unwrap_or_else(|| ac_infer_options_default());
        let mut params = CamParams::new(unary.k(), target.dims());
        params.iters = o.iters;
        params.enable_prior = o.enable_prior;
        params.enable_smooth = o.enable_smooth;
        let logits = if unary.is_normalized() { logits_from_probabilities(unary) } else { unary.clone() };
        let input = CamInput::new(target.clone(), logits, aligned(atlas, target, o.align_translation)?)?;
        emit(out, AcProb(mean_field_infer(&input, &params)?))
    })
}
