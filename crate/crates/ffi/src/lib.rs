//! C ABI over `sparse_frontend`.
//!
//! Every function returns an [`SfStatus`]; on failure the message is kept per
//! thread and read with [`sf_last_error`]. Handles are opaque and owned by the
//! caller, who releases them with the matching `_free` function. Images are
//! `N·N·3` floats in `[0, 1]`, row-major HWC.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sparse_frontend::attacks::{pgd_attack, AttackConfig, AttackTarget};
use sparse_frontend::dictlearn::{read_dictionary, sparse_code, Dictionary};
use sparse_frontend::error::Error;
use sparse_frontend::model::{load_pipeline, Pipeline};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    Numerical = 7,
    Panic = 8,
}

/// A patch dictionary loaded from an `SCFD` file.
pub struct SfDictionary(Dictionary);

/// A trained pipeline loaded from an `SCFW` checkpoint.
pub struct SfPipeline(Pipeline<f32>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(SfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ShapeMismatch { .. } => SfStatus::ShapeMismatch,
            Error::InvalidArgument(_) | Error::NonScalarLoss(_) | Error::UnknownSurrogate(_) => SfStatus::InvalidArgument,
            Error::LassoNotConverged { .. } | Error::DegenerateData(_) | Error::Diverged { .. } => SfStatus::Numerical,
            Error::Format { .. } | Error::Json(_) | Error::Csv(_) => SfStatus::Format,
            Error::Config(_) => SfStatus::Config,
            Error::Io(_) => SfStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: SfStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            SfStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, Failure> {
    if path.is_null() {
        return Err(fail(SfStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(SfStatus::InvalidArgument, "path is not UTF-8"))
}

unsafe fn slice_arg<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if data.is_null() {
        return Err(fail(SfStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn out_slice<'a, T>(data: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if data.is_null() {
        return Err(fail(SfStatus::NullPointer, format!("{what} is null")));
    }
    if len < need {
        return Err(fail(SfStatus::ShapeMismatch, format!("{what} holds {len} values, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(data, need))
}

unsafe fn handle<'a, T>(h: *const T) -> Result<&'a T, Failure> {
    h.as_ref().ok_or_else(|| fail(SfStatus::NullPointer, "handle is null"))
}

fn image_arg(p: &Pipeline<f32>, pixels: &[f32]) -> Result<Vec<f64>, Failure> {
    if pixels.len() != p.input_len() {
        return Err(fail(
            SfStatus::ShapeMismatch,
            format!("image has {} values, pipeline expects {}", pixels.len(), p.input_len()),
        ));
    }
    if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(fail(SfStatus::InvalidArgument, "pixels must lie in [0, 1]"));
    }
    Ok(pixels.iter().map(|&v| v as f64).collect())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an `SCFD` dictionary into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_dictionary_load(path: *const c_char, out: *mut *mut SfDictionary) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(SfStatus::NullPointer, "out is null"));
        }
        let file = std::fs::File::open(path_arg(path)?).map_err(Error::from)?;
        let dict = read_dictionary(std::io::BufReader::new(file))?;
        *out = Box::into_raw(Box::new(SfDictionary(dict)));
        Ok(())
    })
}

/// Releases a dictionary; null is ignored.
///
/// # Safety
/// `dict` must come from [`sf_dictionary_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sf_dictionary_free(dict: *mut SfDictionary) {
    if !dict.is_null() {
        drop(Box::from_raw(dict));
    }
}

/// Writes the patch dimension `n̄` and the atom count `L`.
///
/// # Safety
/// `dict` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sf_dictionary_shape(
    dict: *const SfDictionary,
    patch_dim: *mut usize,
    atoms: *mut usize,
) -> SfStatus {
    guard(|| {
        let d = &handle(dict)?.0;
        if patch_dim.is_null() || atoms.is_null() {
            return Err(fail(SfStatus::NullPointer, "out pointer is null"));
        }
        *patch_dim = d.patch_dim();
        *atoms = d.num_atoms();
        Ok(())
    })
}

/// Sparse code of one patch (lasso with weight `lambda`) into `code[0..L]`.
///
/// # Safety
/// `patch` must hold `patch_len` floats and `code` `code_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sf_dictionary_sparse_code(
    dict: *const SfDictionary,
    patch: *const f64,
    patch_len: usize,
    lambda: f64,
    code: *mut f64,
    code_len: usize,
) -> SfStatus {
    guard(|| {
        let d = &handle(dict)?.0;
        let patch = slice_arg(patch, patch_len, "patch")?;
        let out = out_slice(code, code_len, d.num_atoms(), "code")?;
        out.copy_from_slice(&sparse_code(patch, d, lambda, 1e-6)?);
        Ok(())
    })
}

/// Loads an `SCFW` checkpoint (and the dictionary it references) into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_pipeline_load(path: *const c_char, out: *mut *mut SfPipeline) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(SfStatus::NullPointer, "out is null"));
        }
        let p = load_pipeline::<f32>(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SfPipeline(p)));
        Ok(())
    })
}

/// Releases a pipeline; null is ignored.
///
/// # Safety
/// `pipeline` must come from [`sf_pipeline_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sf_pipeline_free(pipeline: *mut SfPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Writes the image side `N`, the class count and whether a frontend is
/// present (1) or not (0).
///
/// # Safety
/// `pipeline` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sf_pipeline_info(
    pipeline: *const SfPipeline,
    image_size: *mut usize,
    num_classes: *mut usize,
    defended: *mut i32,
) -> SfStatus {
    guard(|| {
        let p = &handle(pipeline)?.0;
        if image_size.is_null() || num_classes.is_null() || defended.is_null() {
            return Err(fail(SfStatus::NullPointer, "out pointer is null"));
        }
        *image_size = p.image_size();
        *num_classes = p.num_classes();
        *defended = p.frontend().is_some() as i32;
        Ok(())
    })
}

/// Class logits of one image into `logits[0..K]`.
///
/// # Safety
/// `pixels` must hold `pixels_len` floats and `logits` `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn sf_pipeline_logits(
    pipeline: *const SfPipeline,
    pixels: *const f32,
    pixels_len: usize,
    logits: *mut f32,
    logits_len: usize,
) -> SfStatus {
    guard(|| {
        let p = &handle(pipeline)?.0;
        let x = image_arg(p, slice_arg(pixels, pixels_len, "pixels")?)?;
        let out = out_slice(logits, logits_len, p.num_classes(), "logits")?;
        for (o, z) in out.iter_mut().zip(AttackTarget::logits(p, &x)?) {
            *o = z as f32;
        }
        Ok(())
    })
}

/// Predicted class of one image.
///
/// # Safety
/// `pixels` must hold `pixels_len` floats; `class_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sf_pipeline_predict(
    pipeline: *const SfPipeline,
    pixels: *const f32,
    pixels_len: usize,
    class_out: *mut usize,
) -> SfStatus {
    guard(|| {
        let p = &handle(pipeline)?.0;
        let x = image_arg(p, slice_arg(pixels, pixels_len, "pixels")?)?;
        if class_out.is_null() {
            return Err(fail(SfStatus::NullPointer, "class_out is null"));
        }
        *class_out = AttackTarget::predict(p, &x)?;
        Ok(())
    })
}

/// PGD attack on one image. `config_toml` is an attack configuration in the
/// TOML format of the CLI, or null for the defaults. The perturbation goes to
/// `perturbation[0..N·N·3]`, and `*success` is 1 if the attacked image is
/// misclassified (including images misclassified to begin with).
///
/// # Safety
/// Buffers must hold the stated lengths; `config_toml` is null or a
/// NUL-terminated string; `success` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sf_pipeline_attack(
    pipeline: *const SfPipeline,
    pixels: *const f32,
    pixels_len: usize,
    label: usize,
    config_toml: *const c_char,
    perturbation: *mut f32,
    perturbation_len: usize,
    success: *mut i32,
) -> SfStatus {
    guard(|| {
        let p = &handle(pipeline)?.0;
        let x = image_arg(p, slice_arg(pixels, pixels_len, "pixels")?)?;
        if label >= p.num_classes() {
            return Err(fail(SfStatus::InvalidArgument, format!("label {label} out of range")));
        }
        let config = if config_toml.is_null() {
            AttackConfig::default()
        } else {
            let text = CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|_| fail(SfStatus::InvalidArgument, "config is not UTF-8"))?;
            toml::from_str(text).map_err(|e| fail(SfStatus::Config, e.to_string()))?
        };
        if success.is_null() {
            return Err(fail(SfStatus::NullPointer, "success is null"));
        }
        let out = out_slice(perturbation, perturbation_len, x.len(), "perturbation")?;
        let outcome = pgd_attack(p, &x, label, &config)?;
        for (o, e) in out.iter_mut().zip(&outcome.perturbation) {
            *o = *e as f32;
        }
        *success = outcome.success as i32;
        Ok(())
    })
}
