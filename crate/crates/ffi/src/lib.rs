//! C ABI over `kflaplace`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`KflStatus`]; on failure [`kfl_last_error`] describes the
//! problem for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kflaplace::checkpoint;
use kflaplace::curvature::{estimate, CurvatureMethod, CurvatureSet, LabelSampling};
use kflaplace::dataset::{load_idx, LabeledSet};
use kflaplace::experiment::{run_experiment, ExperimentConfig};
use kflaplace::network::{accuracy, Activation, MlpParams};
use kflaplace::numerics::{Matrix, Rng};
use kflaplace::posterior::{init_posterior, PosteriorState, Variant};
use kflaplace::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KflStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Contract = 3,
    Format = 4,
    Io = 5,
    Divergence = 6,
    Config = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KflCurvature {
    Diagonal = 0,
    KroneckerFisher = 1,
    KroneckerGaussNewton = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KflVariant {
    Online = 0,
    PerTask = 1,
    Approximate = 2,
}

/// Network parameters.
pub struct KflParams(MlpParams);
/// Labeled images with pixels in [0, 1].
pub struct KflDataset(LabeledSet);
/// Per-layer curvature estimate.
pub struct KflCurvatureSet(CurvatureSet);
/// Gaussian posterior carried between tasks.
pub struct KflPosterior(PosteriorState);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> KflStatus {
    match err {
        Error::Contract(_) => KflStatus::Contract,
        Error::Format { .. } => KflStatus::Format,
        Error::Divergence { .. } => KflStatus::Divergence,
        Error::Config(_) => KflStatus::Config,
        Error::Io { .. } => KflStatus::Io,
        Error::Json(_) | Error::Csv(_) => KflStatus::Format,
    }
}

struct Fail(KflStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(KflStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(KflStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KflStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            KflStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message for the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kfl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// He-initialized ReLU network with layer widths `sizes[0..n_sizes]`
/// (input first, classes last).
///
/// # Safety
/// `sizes` must point to `n_sizes` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kfl_params_init(sizes: *const usize, n_sizes: usize, seed: u64, out: *mut *mut KflParams) -> KflStatus {
    guard(|| {
        if sizes.is_null() {
            return Err(null("sizes"));
        }
        let sizes = std::slice::from_raw_parts(sizes, n_sizes);
        if sizes.contains(&0) {
            return Err(invalid("layer sizes must be positive"));
        }
        let p = MlpParams::init(sizes, Activation::Relu, &mut Rng::new(seed))?;
        emit(out, KflParams(p))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kfl_params_load(path: *const c_char, out: *mut *mut KflParams) -> KflStatus {
    guard(|| {
        let p = checkpoint::load_params(&path_arg(path, "path")?)?;
        emit(out, KflParams(p))
    })
}

/// # Safety
/// `params` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kfl_params_save(params: *const KflParams, path: *const c_char) -> KflStatus {
    guard(|| {
        let p = borrow(params, "params")?;
        checkpoint::save_params(&p.0, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Total number of scalars, biases included; 0 for a null handle.
///
/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kfl_params_len(params: *const KflParams) -> usize {
    params.as_ref().map_or(0, |p| p.0.num_params())
}

/// Copies all parameters, layer by layer, each layer's `n_out × (n_in+1)`
/// weight matrix column-stacked with the bias as the last column.
///
/// # Safety
/// `buf` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn kfl_params_get(params: *const KflParams, buf: *mut f64, len: usize) -> KflStatus {
    guard(|| {
        let p = borrow(params, "params")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let flat = p.0.flatten();
        if len != flat.len() {
            return Err(invalid(format!("buffer holds {len} values, network has {}", flat.len())));
        }
        ptr::copy_nonoverlapping(flat.as_ptr(), buf, len);
        Ok(())
    })
}

/// Inverse of [`kfl_params_get`].
///
/// # Safety
/// `params` must be a live handle and `buf` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn kfl_params_set(params: *mut KflParams, buf: *const f64, len: usize) -> KflStatus {
    guard(|| {
        let p = params.as_mut().ok_or_else(|| null("params"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len != p.0.num_params() {
            return Err(invalid(format!("buffer holds {len} values, network has {}", p.0.num_params())));
        }
        let values = std::slice::from_raw_parts(buf, len);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("parameters must be finite"));
        }
        p.0 = p.0.unflatten(values)?;
        Ok(())
    })
}

/// # Safety
/// `params` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kfl_params_free(params: *mut KflParams) {
    free(params)
}

/// Reads an IDX image file and its label file.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kfl_dataset_load_idx(images: *const c_char, labels: *const c_char, out: *mut *mut KflDataset) -> KflStatus {
    guard(|| {
        let set = load_idx(&path_arg(images, "images")?, &path_arg(labels, "labels")?)?;
        emit(out, KflDataset(set))
    })
}

/// Dataset from `n` row-major images of `dim` pixels in [0, 1] and labels in 0..10.
///
/// # Safety
/// `pixels` must hold `n·dim` doubles and `labels` `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn kfl_dataset_from_arrays(
    pixels: *const f64,
    labels: *const u8,
    n: usize,
    dim: usize,
    out: *mut *mut KflDataset,
) -> KflStatus {
    guard(|| {
        if pixels.is_null() || labels.is_null() {
            return Err(null("pixels or labels"));
        }
        let total = n.checked_mul(dim).ok_or_else(|| invalid("n·dim overflows"))?;
        let images = Matrix::from_vec(n, dim, std::slice::from_raw_parts(pixels, total).to_vec())?;
        let set = LabeledSet::new(images, std::slice::from_raw_parts(labels, n).to_vec())?;
        emit(out, KflDataset(set))
    })
}

/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kfl_dataset_len(set: *const KflDataset) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `set` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kfl_dataset_free(set: *mut KflDataset) {
    free(set)
}

/// Fraction of examples classified correctly.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kfl_accuracy(params: *const KflParams, set: *const KflDataset, out: *mut f64) -> KflStatus {
    guard(|| {
        let acc = accuracy(&borrow(params, "params")?.0, &borrow(set, "dataset")?.0)?;
        *out.as_mut().ok_or_else(|| null("out"))? = acc;
        Ok(())
    })
}

/// Curvature of the NLL on `set` at `params`. `samples` model labels are
/// drawn per example for the Fisher methods; 0 takes the exact expectation.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kfl_curvature_estimate(
    params: *const KflParams,
    set: *const KflDataset,
    method: KflCurvature,
    samples: u32,
    seed: u64,
    out: *mut *mut KflCurvatureSet,
) -> KflStatus {
    guard(|| {
        let method = match method {
            KflCurvature::Diagonal => CurvatureMethod::DiagFisher,
            KflCurvature::KroneckerFisher => CurvatureMethod::KfFisher,
            KflCurvature::KroneckerGaussNewton => CurvatureMethod::KfGn,
        };
        let sampling = match samples {
            0 => LabelSampling::Exact,
            s => LabelSampling::MonteCarlo { samples: s as usize },
        };
        let c = estimate(method, &borrow(params, "params")?.0, &borrow(set, "dataset")?.0, sampling, &mut Rng::new(seed))?;
        emit(out, KflCurvatureSet(c))
    })
}

/// # Safety
/// `c` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kfl_curvature_save(c: *const KflCurvatureSet, path: *const c_char) -> KflStatus {
    guard(|| {
        checkpoint::save_curvature(&borrow(c, "curvature")?.0, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `c` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kfl_curvature_free(c: *mut KflCurvatureSet) {
    free(c)
}

/// Empty posterior (isotropic prior of precision `prior_precision`) shaped
/// like `params`.
///
/// # Safety
/// `params` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kfl_posterior_new(
    variant: KflVariant,
    prior_precision: f64,
    params: *const KflParams,
    out: *mut *mut KflPosterior,
) -> KflStatus {
    guard(|| {
        let variant = match variant {
            KflVariant::Online => Variant::Online,
            KflVariant::PerTask => Variant::PerTask,
            KflVariant::Approximate => Variant::Approximate,
        };
        let post = init_posterior(variant, prior_precision, &borrow(params, "params")?.0.shapes())?;
        emit(out, KflPosterior(post))
    })
}

/// Incorporates a finished task whose mode is `mode`. Online and per-task
/// posteriors take one curvature set; approximate posteriors take one per
/// task seen so far, all evaluated at `mode`.
///
/// # Safety
/// `curvatures` must point to `n_curvatures` live handles.
#[no_mangle]
pub unsafe extern "C" fn kfl_posterior_update(
    post: *mut KflPosterior,
    mode: *const KflParams,
    curvatures: *const *const KflCurvatureSet,
    n_curvatures: usize,
    lambda: f64,
) -> KflStatus {
    guard(|| {
        let p = post.as_mut().ok_or_else(|| null("posterior"))?;
        let mode = borrow(mode, "mode")?;
        if curvatures.is_null() {
            return Err(null("curvatures"));
        }
        let sets = std::slice::from_raw_parts(curvatures, n_curvatures)
            .iter()
            .map(|&c| borrow(c, "curvature").map(|c| c.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        p.0 = p.0.update(&mode.0.layers, sets, lambda)?;
        Ok(())
    })
}

/// Penalty `½(θ−μ)ᵀΛ(θ−μ)` at `params`. When `grad` is non-null it receives
/// the gradient in the [`kfl_params_get`] layout (`grad_len` values).
///
/// # Safety
/// Handles must be live; `value` writable; `grad` null or `grad_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn kfl_posterior_penalty(
    post: *const KflPosterior,
    params: *const KflParams,
    value: *mut f64,
    grad: *mut f64,
    grad_len: usize,
) -> KflStatus {
    guard(|| {
        let p = borrow(post, "posterior")?;
        let theta = borrow(params, "params")?;
        let (v, g) = p.0.penalty_and_grad(&theta.0.layers)?;
        *value.as_mut().ok_or_else(|| null("value"))? = v;
        if !grad.is_null() {
            let flat: Vec<f64> = g.iter().flat_map(Matrix::vec_columns).collect();
            if grad_len != flat.len() {
                return Err(invalid(format!("gradient buffer holds {grad_len} values, need {}", flat.len())));
            }
            ptr::copy_nonoverlapping(flat.as_ptr(), grad, grad_len);
        }
        Ok(())
    })
}

/// # Safety
/// `post` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kfl_posterior_save(post: *const KflPosterior, path: *const c_char) -> KflStatus {
    guard(|| {
        checkpoint::save_posterior(&borrow(post, "posterior")?.0, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kfl_posterior_load(path: *const c_char, out: *mut *mut KflPosterior) -> KflStatus {
    guard(|| {
        let p = checkpoint::load_posterior(&path_arg(path, "path")?)?;
        emit(out, KflPosterior(p))
    })
}

/// # Safety
/// `post` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kfl_posterior_free(post: *mut KflPosterior) {
    free(post)
}

/// Runs a whole experiment described by a TOML or JSON config file and
/// writes its results to the config's output directory.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kfl_run_experiment(config_path: *const c_char) -> KflStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_file(&path_arg(config_path, "config_path")?)?;
        run_experiment(&cfg)?;
        Ok(())
    })
}
