//! C interface to the laboratory.
//!
//! Every fallible function returns an [`LlStatus`]; on failure the
//! message is available from [`ll_last_error`] on the same thread until
//! the next failing call. Handles are created by `*_new` functions and
//! must be released with the matching `*_free`. Matrices cross the
//! boundary row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use losslab::hessian::{self, Curvature};
use losslab::mlp::{self, Activation, Dataset, LossKind, MlpSpec, ParamVector};
use losslab::quadsim::{self, QuadScenario};
use losslab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NonFinite = 4,
    CapacityExceeded = 5,
    Config = 6,
    Runtime = 7,
    Panic = 8,
    /// The quadratic theorem suite ran but some check failed.
    CheckFailed = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlActivation {
    Relu = 0,
    Linear = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlLoss {
    CrossEntropy = 0,
    Mse = 1,
}

/// Network spec and parameter vector.
pub struct LlModel {
    spec: MlpSpec,
    params: ParamVector,
}

/// Labelled samples.
pub struct LlDataset {
    data: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LlStatus {
    match e {
        Error::DimensionMismatch { .. } => LlStatus::DimensionMismatch,
        Error::NonFinite(_) | Error::Diverged { .. } => LlStatus::NonFinite,
        Error::CapacityExceeded { .. } => LlStatus::CapacityExceeded,
        Error::Config(_) | Error::InvalidConfig(_) | Error::Json(_) => LlStatus::Config,
        Error::InvalidSpec(_)
        | Error::InvalidArgument(_)
        | Error::InvalidDataset(_)
        | Error::EmptyDataset
        | Error::NotPsd { .. } => LlStatus::InvalidArgument,
        _ => LlStatus::Runtime,
    }
}

struct Fail(LlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LlStatus::NullPointer, format!("{what} is null"))
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> LlStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => LlStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            LlStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn model<'a>(m: *const LlModel) -> Result<&'a LlModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn dataset<'a>(d: *const LlDataset) -> Result<&'a LlDataset, Fail> {
    d.as_ref().ok_or_else(|| null("dataset"))
}

fn check_len(what: &str, expected: usize, actual: usize) -> Result<(), Fail> {
    if expected != actual {
        return Err(Fail(
            LlStatus::DimensionMismatch,
            format!("{what}: expected length {expected}, got {actual}"),
        ));
    }
    Ok(())
}

/// Message of the last failure on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ll_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a network with He-initialized weights and zero biases.
///
/// # Safety
/// `widths` must point to `n_widths` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ll_model_new(
    widths: *const usize,
    n_widths: usize,
    activation: LlActivation,
    use_bias: bool,
    loss: LlLoss,
    seed: u64,
    out: *mut *mut LlModel,
) -> LlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let w = slice(widths, n_widths, "widths")?.to_vec();
        let act = match activation {
            LlActivation::Relu => Activation::Relu,
            LlActivation::Linear => Activation::Linear,
        };
        let lk = match loss {
            LlLoss::CrossEntropy => LossKind::CrossEntropy,
            LlLoss::Mse => LossKind::Mse,
        };
        let spec = MlpSpec::new(w, act, use_bias, lk)?;
        let params = spec.init_params(seed);
        *out = Box::into_raw(Box::new(LlModel { spec, params }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`ll_model_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ll_model_free(m: *mut LlModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Parameter count `P`, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn ll_model_param_count(m: *const LlModel) -> usize {
    m.as_ref().map_or(0, |m| m.params.len())
}

/// # Safety
/// `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ll_model_get_params(m: *const LlModel, out: *mut f64, len: usize) -> LlStatus {
    guard(|| {
        let m = model(m)?;
        check_len("parameter buffer", m.params.len(), len)?;
        slice_mut(out, len, "out")?.copy_from_slice(m.params.values());
        Ok(())
    })
}

/// # Safety
/// `values` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ll_model_set_params(m: *mut LlModel, values: *const f64, len: usize) -> LlStatus {
    guard(|| {
        let m = m.as_mut().ok_or_else(|| null("model"))?;
        check_len("parameter buffer", m.params.len(), len)?;
        let v = slice(values, len, "values")?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Fail(LlStatus::NonFinite, "parameters must be finite".into()));
        }
        m.params = ParamVector::from_values(&m.spec, v.to_vec())?;
        Ok(())
    })
}

/// Dataset from `n` samples of dimension `d`, row-major `n × d`.
///
/// # Safety
/// `inputs` must hold `n·d` values and `labels` `n` values.
#[no_mangle]
pub unsafe extern "C" fn ll_dataset_new(
    inputs: *const f64,
    n: usize,
    d: usize,
    labels: *const usize,
    out: *mut *mut LlDataset,
) -> LlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let x = slice(inputs, n * d, "inputs")?;
        let y = slice(labels, n, "labels")?;
        let rows: Vec<Vec<f64>> = x.chunks(d.max(1)).take(n).map(|r| r.to_vec()).collect();
        let data = Dataset::from_rows(&rows, y.to_vec(), 0)?;
        *out = Box::into_raw(Box::new(LlDataset { data }));
        Ok(())
    })
}

/// # Safety
/// `d` must come from [`ll_dataset_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ll_dataset_free(d: *mut LlDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Mean loss over the dataset.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ll_loss(m: *const LlModel, d: *const LlDataset, out: *mut f64) -> LlStatus {
    guard(|| {
        let (m, d) = (model(m)?, dataset(d)?);
        let v = mlp::mean_loss(&m.spec, &m.params, &d.data)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Mean gradient, `len = P`.
///
/// # Safety
/// Handles must be live; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ll_grad(m: *const LlModel, d: *const LlDataset, out: *mut f64, len: usize) -> LlStatus {
    guard(|| {
        let (m, d) = (model(m)?, dataset(d)?);
        check_len("gradient buffer", m.params.len(), len)?;
        let g = mlp::mean_grad(&m.spec, &m.params, &d.data)?;
        slice_mut(out, len, "out")?.copy_from_slice(g.values());
        Ok(())
    })
}

/// Hessian-vector product `H v`, `len = P`.
///
/// # Safety
/// Handles must be live; `v` and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ll_hvp(
    m: *const LlModel,
    d: *const LlDataset,
    v: *const f64,
    out: *mut f64,
    len: usize,
) -> LlStatus {
    guard(|| {
        let (m, d) = (model(m)?, dataset(d)?);
        check_len("vector", m.params.len(), len)?;
        let v = slice(v, len, "v")?;
        let hv = Curvature::new(&m.spec, &m.params, &d.data)?.hvp(v);
        slice_mut(out, len, "out")?.copy_from_slice(&hv);
        Ok(())
    })
}

/// Dense Hessian, row-major `P × P`, `len = P²`. Fails with
/// `CapacityExceeded` above `cap` parameters.
///
/// # Safety
/// Handles must be live; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ll_hessian(
    m: *const LlModel,
    d: *const LlDataset,
    cap: usize,
    out: *mut f64,
    len: usize,
) -> LlStatus {
    guard(|| {
        let (m, d) = (model(m)?, dataset(d)?);
        let p = m.params.len();
        if p > cap {
            return Err(Error::CapacityExceeded { params: p, cap }.into());
        }
        check_len("Hessian buffer", p * p, len)?;
        let h = hessian::exact_hessian_capped(&m.spec, &m.params, &d.data, cap)?;
        // Symmetric, so column-major storage reads the same row-major.
        slice_mut(out, len, "out")?.copy_from_slice(h.matrix().as_slice());
        Ok(())
    })
}

/// Leading `k` eigenpairs by deflated power iteration. `values` holds
/// `k` entries, `vectors` is row-major `k × P` (one eigenvector per
/// row), `converged` holds `k` flags.
///
/// # Safety
/// Handles must be live; buffers must have the stated sizes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ll_top_k_eigs(
    m: *const LlModel,
    d: *const LlDataset,
    k: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
    values: *mut f64,
    vectors: *mut f64,
    converged: *mut bool,
) -> LlStatus {
    guard(|| {
        let (m, d) = (model(m)?, dataset(d)?);
        let p = m.params.len();
        let curv = Curvature::new(&m.spec, &m.params, &d.data)?;
        let eig = hessian::top_k_eigs(|v| curv.hvp(v), p, k, tol, max_iter, seed)?;
        let vals = slice_mut(values, k, "values")?;
        let vecs = slice_mut(vectors, k * p, "vectors")?;
        let conv = slice_mut(converged, k, "converged")?;
        for i in 0..eig.len() {
            vals[i] = eig.values[i];
            vecs[i * p..(i + 1) * p].copy_from_slice(&eig.vector(i));
            conv[i] = eig.converged[i];
        }
        Ok(())
    })
}

/// Runs the quadratic theorem suite on a JSON scenario (null for the
/// built-in one). Writes the number of checks and of failures; returns
/// `CheckFailed` when any check fails.
///
/// # Safety
/// `scenario_json` must be null or a NUL-terminated string; the outputs
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ll_quadsim_suite(
    scenario_json: *const c_char,
    n_checks: *mut usize,
    n_failed: *mut usize,
) -> LlStatus {
    let mut failed = 0;
    let status = guard(|| {
        let sc = if scenario_json.is_null() {
            QuadScenario::default()
        } else {
            let text = CStr::from_ptr(scenario_json)
                .to_str()
                .map_err(|_| Fail(LlStatus::InvalidArgument, "scenario is not UTF-8".into()))?;
            serde_json::from_str(text).map_err(|e| Fail(LlStatus::Config, e.to_string()))?
        };
        let checks = quadsim::theorem_suite(&sc)?;
        failed = checks.iter().filter(|c| !c.passed).count();
        *n_checks.as_mut().ok_or_else(|| null("n_checks"))? = checks.len();
        *n_failed.as_mut().ok_or_else(|| null("n_failed"))? = failed;
        if failed > 0 {
            let names: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            return Err(Fail(LlStatus::CheckFailed, format!("failed checks: {}", names.join(", "))));
        }
        Ok(())
    });
    status
}
