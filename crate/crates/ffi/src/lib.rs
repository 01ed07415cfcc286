//! C ABI over `mpbcq`.
//!
//! Every function returns an [`MpbcqStatus`]; on failure a message for the
//! calling thread is available from [`mpbcq_last_error`]. Matrices and models
//! are opaque handles owned by the caller and released with the matching
//! `*_free`. Panics never cross the boundary; they surface as
//! `MPBCQ_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mpbcq::calib::{refine_scales, Solver};
use mpbcq::gemv::{gemv, ExecOptions, GemvPath};
use mpbcq::model_format;
use mpbcq::progressive::build_multiprecision;
use mpbcq::tensor_io::{load_matrix, random_gaussian, save_matrix};
use mpbcq::{Error, Matrix, Mode, MultiPrecisionModel, QuantConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpbcqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    PrecisionOutOfRange = 4,
    Io = 5,
    BadMagic = 6,
    UnsupportedVersion = 7,
    Truncated = 8,
    Checksum = 9,
    Format = 10,
    NonFinite = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpbcqPath {
    Lut = 0,
    Naive = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpbcqSolver {
    Exact = 0,
    GradientDescent = 1,
}

/// Dense row-major `f32` matrix.
pub struct MpbcqMatrix(Matrix);

/// Shared bit-planes plus one scale set per supported precision.
pub struct MpbcqModel(MultiPrecisionModel);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MpbcqModelInfo {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub asymmetric: bool,
    pub cycles: usize,
    pub p_low: usize,
    pub p_high: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MpbcqGemvStats {
    pub plane_bytes_fetched: u64,
    pub scale_bytes_fetched: u64,
    pub lut_build_count: u64,
    pub elapsed_ns: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MpbcqFootprint {
    pub shared_binary_bytes: u64,
    pub shared_scale_bytes: u64,
    pub shared_total_bytes: u64,
    pub multi_model_binary_bytes: u64,
    pub multi_model_scale_bytes: u64,
    pub multi_model_total_bytes: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: MpbcqStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => MpbcqStatus::Io,
            Error::BadMagic { .. } => MpbcqStatus::BadMagic,
            Error::UnsupportedVersion(_) | Error::UnsupportedDtype(_) => MpbcqStatus::UnsupportedVersion,
            Error::Truncated { .. } => MpbcqStatus::Truncated,
            Error::Checksum { .. } => MpbcqStatus::Checksum,
            Error::Format(_) => MpbcqStatus::Format,
            Error::NonFinite(_) => MpbcqStatus::NonFinite,
            Error::Shape(_) => MpbcqStatus::Shape,
            Error::PrecisionOutOfRange { .. } => MpbcqStatus::PrecisionOutOfRange,
            Error::InvalidArgument(_) => MpbcqStatus::InvalidArgument,
        };
        Failure { status, message: e.to_string() }
    }
}

fn fail(status: MpbcqStatus, message: impl Into<String>) -> Failure {
    Failure { status, message: message.into() }
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MpbcqStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpbcqStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(failure.message);
            failure.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal panic: {msg}"));
            MpbcqStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(MpbcqStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(fail(MpbcqStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(fail(MpbcqStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(MpbcqStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(MpbcqStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(MpbcqStatus::NullPointer, "output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn copy_into(src: &[f32], dst: &mut [f32]) -> Result<(), Failure> {
    if dst.len() != src.len() {
        return Err(fail(MpbcqStatus::Shape, format!("output buffer holds {} values, need {}", dst.len(), src.len())));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message for the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next `mpbcq_*` call on the same thread.
#[no_mangle]
pub extern "C" fn mpbcq_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mpbcq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `data` must point to `rows * cols` readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_matrix_from_data(
    rows: usize,
    cols: usize,
    data: *const f32,
    out: *mut *mut MpbcqMatrix,
) -> MpbcqStatus {
    guard(|| {
        let len = rows.checked_mul(cols).ok_or_else(|| fail(MpbcqStatus::Shape, "rows * cols overflows"))?;
        let values = slice(data, len, "data")?.to_vec();
        emit(out, MpbcqMatrix(Matrix::new(rows, cols, values)?))
    })
}

/// Seeded standard-normal matrix.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_matrix_random(
    rows: usize,
    cols: usize,
    seed: u64,
    out: *mut *mut MpbcqMatrix,
) -> MpbcqStatus {
    guard(|| emit(out, MpbcqMatrix(random_gaussian(rows, cols, seed)?)))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_matrix_load(path: *const c_char, out: *mut *mut MpbcqMatrix) -> MpbcqStatus {
    guard(|| emit(out, MpbcqMatrix(load_matrix(path_arg(path)?)?)))
}

/// # Safety
/// `m` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_matrix_save(m: *const MpbcqMatrix, path: *const c_char) -> MpbcqStatus {
    guard(|| Ok(save_matrix(&as_ref(m, "matrix")?.0, path_arg(path)?)?))
}

/// # Safety
/// `m` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_matrix_free(m: *mut MpbcqMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle; `rows`/`cols` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_matrix_shape(m: *const MpbcqMatrix, rows: *mut usize, cols: *mut usize) -> MpbcqStatus {
    guard(|| {
        let m = &as_ref(m, "matrix")?.0;
        if !rows.is_null() {
            *rows = m.rows();
        }
        if !cols.is_null() {
            *cols = m.cols();
        }
        Ok(())
    })
}

/// Copies the row-major values into `out`, which must hold exactly `len = rows * cols` floats.
///
/// # Safety
/// `m` must be a live handle; `out` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_matrix_copy(m: *const MpbcqMatrix, out: *mut f32, len: usize) -> MpbcqStatus {
    guard(|| copy_into(as_ref(m, "matrix")?.0.data(), slice_mut(out, len, "out")?))
}

/// Fits shared planes for precisions `p_low..=p_high`. `group_size` 0 means
/// one group per row.
///
/// # Safety
/// `weights` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_model_build(
    weights: *const MpbcqMatrix,
    p_low: usize,
    p_high: usize,
    group_size: usize,
    asymmetric: bool,
    cycles: usize,
    out: *mut *mut MpbcqModel,
) -> MpbcqStatus {
    guard(|| {
        let w = &as_ref(weights, "weights")?.0;
        let g = if group_size == 0 { w.cols() } else { group_size };
        let mode = if asymmetric { Mode::Asymmetric } else { Mode::Symmetric };
        let cfg = QuantConfig::new(g, mode, cycles);
        emit(out, MpbcqModel(build_multiprecision(w, p_low, p_high, &cfg)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_model_load(path: *const c_char, out: *mut *mut MpbcqModel) -> MpbcqStatus {
    guard(|| emit(out, MpbcqModel(model_format::deserialize(path_arg(path)?)?)))
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_model_save(model: *const MpbcqModel, path: *const c_char) -> MpbcqStatus {
    guard(|| Ok(model_format::serialize(&as_ref(model, "model")?.0, path_arg(path)?)?))
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_model_free(model: *mut MpbcqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_model_info(model: *const MpbcqModel, out: *mut MpbcqModelInfo) -> MpbcqStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        if out.is_null() {
            return Err(fail(MpbcqStatus::NullPointer, "out is null"));
        }
        let cfg = m.config();
        *out = MpbcqModelInfo {
            rows: m.rows(),
            cols: m.cols(),
            group_size: cfg.group_size,
            asymmetric: cfg.mode == Mode::Asymmetric,
            cycles: cfg.cycles,
            p_low: m.p_low(),
            p_high: m.p_high(),
        };
        Ok(())
    })
}

/// `‖W − Ŵ_p‖² / ‖W‖²`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_model_relative_error(
    model: *const MpbcqModel,
    weights: *const MpbcqMatrix,
    p: usize,
    out: *mut f64,
) -> MpbcqStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let w = &as_ref(weights, "weights")?.0;
        if out.is_null() {
            return Err(fail(MpbcqStatus::NullPointer, "out is null"));
        }
        *out = m.view(p)?.relative_error(w)?;
        Ok(())
    })
}

/// Writes `Ŵ_p` row-major into `out` (`len` must equal rows * cols).
///
/// # Safety
/// `model` must be a live handle; `out` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_model_dequantize(
    model: *const MpbcqModel,
    p: usize,
    out: *mut f32,
    len: usize,
) -> MpbcqStatus {
    guard(|| {
        let w_hat = as_ref(model, "model")?.0.view(p)?.dequantize();
        copy_into(w_hat.data(), slice_mut(out, len, "out")?)
    })
}

/// Replaces the scales of precision `p` with ones refitted to calibration
/// activations `x` (samples × cols). `loss_before`/`loss_after` may be NULL.
///
/// # Safety
/// Handles must be live; the loss pointers must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_model_refine(
    model: *mut MpbcqModel,
    weights: *const MpbcqMatrix,
    x: *const MpbcqMatrix,
    p: usize,
    solver: MpbcqSolver,
    loss_before: *mut f64,
    loss_after: *mut f64,
) -> MpbcqStatus {
    guard(|| {
        let m = &mut model.as_mut().ok_or_else(|| fail(MpbcqStatus::NullPointer, "model is null"))?.0;
        let w = &as_ref(weights, "weights")?.0;
        let x = &as_ref(x, "x")?.0;
        let solver = match solver {
            MpbcqSolver::Exact => Solver::Exact,
            MpbcqSolver::GradientDescent => Solver::gradient_default(),
        };
        let outcome = refine_scales(w, m, x, p, solver)?;
        m.replace_scale_set(p, outcome.scales)?;
        if !loss_before.is_null() {
            *loss_before = outcome.loss_before;
        }
        if !loss_after.is_null() {
            *loss_after = outcome.loss_after;
        }
        Ok(())
    })
}

/// `y = Ŵ_p · x` on the packed planes. `x` holds `cols` floats and `y` holds
/// `rows` floats. `stats` may be NULL.
///
/// # Safety
/// `model` must be a live handle; `x`/`y` must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_gemv(
    model: *const MpbcqModel,
    p: usize,
    path: MpbcqPath,
    x: *const f32,
    x_len: usize,
    y: *mut f32,
    y_len: usize,
    stats: *mut MpbcqGemvStats,
) -> MpbcqStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let x = slice(x, x_len, "x")?;
        let y = slice_mut(y, y_len, "y")?;
        let path = match path {
            MpbcqPath::Lut => GemvPath::Lut,
            MpbcqPath::Naive => GemvPath::Naive,
        };
        let (out, s) = gemv(m, p, x, path, ExecOptions::default())?;
        copy_into(&out, y)?;
        if !stats.is_null() {
            *stats = MpbcqGemvStats {
                plane_bytes_fetched: s.plane_bytes_fetched,
                scale_bytes_fetched: s.scale_bytes_fetched,
                lut_build_count: s.lut_build_count,
                elapsed_ns: s.elapsed.as_nanos().min(u64::MAX as u128) as u64,
            };
        }
        Ok(())
    })
}

/// Footprint of a shared-plane model versus separate per-precision models.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpbcq_footprint(
    rows: u64,
    cols: u64,
    group_size: u64,
    p_low: usize,
    p_high: usize,
    asymmetric: bool,
    scale_width: u64,
    out: *mut MpbcqFootprint,
) -> MpbcqStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MpbcqStatus::NullPointer, "out is null"));
        }
        let mode = if asymmetric { Mode::Asymmetric } else { Mode::Symmetric };
        let r = model_format::footprint(rows, cols, group_size, p_low, p_high, mode, scale_width)?;
        *out = MpbcqFootprint {
            shared_binary_bytes: r.shared.binary_bytes,
            shared_scale_bytes: r.shared.scale_bytes,
            shared_total_bytes: r.shared.total_bytes,
            multi_model_binary_bytes: r.multi_model.binary_bytes,
            multi_model_scale_bytes: r.multi_model.scale_bytes,
            multi_model_total_bytes: r.multi_model.total_bytes,
        };
        Ok(())
    })
}
