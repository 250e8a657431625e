//! C ABI over the trained encoder.
//!
//! Every fallible call returns a [`VaeveStatus`]; on failure the message is
//! kept per thread and read back with [`vaeve_last_error`]. Models are
//! opaque heap handles released with [`vaeve_model_free`]. Panics never
//! cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vaeve::config::RunConfig;
use vaeve::training::{train_fingerprint, Checkpoint};
use vaeve::vaeve::{encode, encode_mean, VaeveConfig, VaeveParams};
use vaeve::{autodiff::Tensor, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VaeveStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Config = 6,
    Fingerprint = 7,
    Numerical = 8,
    Panic = 9,
}

impl From<&Error> for VaeveStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } | Error::MissingFile { .. } => VaeveStatus::Io,
            Error::Format { .. } => VaeveStatus::Format,
            Error::Shape { .. } | Error::Dimension { .. } => VaeveStatus::Dimension,
            Error::Config(_) => VaeveStatus::Config,
            Error::Fingerprint { .. } => VaeveStatus::Fingerprint,
            Error::Numerical(_) | Error::NonDeterministic { .. } => VaeveStatus::Numerical,
            _ => VaeveStatus::InvalidArgument,
        }
    }
}

/// A loaded encoder. Opaque to C.
pub struct VaeveModel {
    cfg: VaeveConfig,
    params: VaeveParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(VaeveStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(VaeveStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VaeveStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VaeveStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VaeveStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(VaeveStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            VaeveStatus::InvalidArgument,
            format!("`{what}` is not valid UTF-8"),
        )
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn model_arg<'a>(m: *const VaeveModel) -> Result<&'a VaeveModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn features_arg(
    model: &VaeveModel,
    features: *const f64,
    frames: usize,
    feature_dim: usize,
) -> Result<Tensor, Failure> {
    if features.is_null() {
        return Err(null("features"));
    }
    if feature_dim != model.cfg.feature_dim {
        return Err(Failure(
            VaeveStatus::Dimension,
            format!(
                "feature_dim: expected {}, got {feature_dim}",
                model.cfg.feature_dim
            ),
        ));
    }
    if frames == 0 {
        return Err(Failure(
            VaeveStatus::InvalidArgument,
            "frames must be positive".into(),
        ));
    }
    let n = frames.checked_mul(feature_dim).ok_or_else(|| {
        Failure(
            VaeveStatus::InvalidArgument,
            "frames × feature_dim overflows".into(),
        )
    })?;
    let data = std::slice::from_raw_parts(features, n).to_vec();
    Ok(Tensor::matrix(frames, feature_dim, data)?)
}

unsafe fn out_arg<'a>(
    out: *mut f64,
    out_len: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [f64], Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    if out_len < need {
        return Err(Failure(
            VaeveStatus::Dimension,
            format!("`{what}` holds {out_len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(out, need))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vaeve_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn vaeve_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads the encoder described by the `[vaeve]` and `[train]` sections of
/// a run configuration from a training checkpoint. The checkpoint
/// fingerprint must match the configuration.
///
/// # Safety
/// `config_path` and `ckpt_path` must be NUL-terminated strings; `out`
/// must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn vaeve_model_load(
    config_path: *const c_char,
    ckpt_path: *const c_char,
    out: *mut *mut VaeveModel,
) -> VaeveStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = RunConfig::load(&path_arg(config_path, "config_path")?)?;
        let expected = train_fingerprint(&cfg.vaeve, &cfg.train);
        let ckpt = Checkpoint::load(&path_arg(ckpt_path, "ckpt_path")?, Some(&expected))?;
        let params = VaeveParams::from_set(&cfg.vaeve, ckpt.params)?;
        *out = Box::into_raw(Box::new(VaeveModel {
            cfg: cfg.vaeve,
            params,
        }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`vaeve_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vaeve_model_free(model: *mut VaeveModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature, latent and phoneme dimensions. Any output pointer may be NULL.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn vaeve_model_dims(
    model: *const VaeveModel,
    feature_dim: *mut usize,
    latent_dim: *mut usize,
    phoneme_count: *mut usize,
) -> VaeveStatus {
    guard(|| {
        let m = model_arg(model)?;
        for (p, v) in [
            (feature_dim, m.cfg.feature_dim),
            (latent_dim, m.cfg.latent_dim),
            (phoneme_count, m.cfg.phoneme_count),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Posterior means for one utterance. `features` is row-major
/// `frames × feature_dim`; `out` receives row-major `frames × latent_dim`.
///
/// # Safety
/// `features` must hold `frames * feature_dim` values and `out` at least
/// `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn vaeve_model_encode_mean(
    model: *const VaeveModel,
    features: *const f64,
    frames: usize,
    feature_dim: usize,
    out: *mut f64,
    out_len: usize,
) -> VaeveStatus {
    guard(|| {
        let m = model_arg(model)?;
        let x = features_arg(m, features, frames, feature_dim)?;
        let dst = out_arg(out, out_len, frames * m.cfg.latent_dim, "out")?;
        let mu = encode_mean(&x, &m.cfg, &m.params)?;
        dst.copy_from_slice(mu.data());
        Ok(())
    })
}

/// Posterior means and standard deviations, both `frames × latent_dim`.
///
/// # Safety
/// As [`vaeve_model_encode_mean`], for both `mean` and `sd`.
#[no_mangle]
pub unsafe extern "C" fn vaeve_model_encode(
    model: *const VaeveModel,
    features: *const f64,
    frames: usize,
    feature_dim: usize,
    mean: *mut f64,
    sd: *mut f64,
    out_len: usize,
) -> VaeveStatus {
    guard(|| {
        let m = model_arg(model)?;
        let x = features_arg(m, features, frames, feature_dim)?;
        let need = frames * m.cfg.latent_dim;
        let mean = out_arg(mean, out_len, need, "mean")?;
        let sd = out_arg(sd, out_len, need, "sd")?;
        let post = encode(&x, &m.cfg, &m.params)?;
        mean.copy_from_slice(post.mu.data());
        sd.copy_from_slice(post.sd.data());
        Ok(())
    })
}
