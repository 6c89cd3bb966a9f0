//! C ABI over the `openviewer` library.
//!
//! Every fallible function returns an [`OvStatus`]; on failure the message is
//! kept per thread and can be read with [`ov_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use openviewer::admm::{self, AdmmConfig};
use openviewer::dataset::MultiViewDataset;
use openviewer::eval::{ccr_at_fpr, oscr_curve, ScoredPrediction};
use openviewer::tensor::{soft_threshold_values, Matrix};
use openviewer::trainer::Checkpoint;
use openviewer::unfold::{predict, Fusion};
use openviewer::OvError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Dimension = 5,
    Numeric = 6,
    /// Any other library error; see the message.
    Failed = 7,
    Panic = 8,
}

/// A loaded multi-view dataset.
pub struct OvDataset {
    inner: MultiViewDataset,
}

/// A trained checkpoint.
pub struct OvModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &OvError) -> OvStatus {
    match e {
        OvError::Io { .. } => OvStatus::Io,
        OvError::Parse { .. } | OvError::Checkpoint(_) => OvStatus::Parse,
        OvError::Dimension { .. } | OvError::RowMismatch { .. } => OvStatus::Dimension,
        OvError::Numeric(_) | OvError::NonFinite { .. } => OvStatus::Numeric,
        OvError::Domain(_) | OvError::Config(_) => OvStatus::InvalidArgument,
        _ => OvStatus::Failed,
    }
}

enum Failure {
    Status(OvStatus, String),
    Lib(OvError),
}

impl From<OvError> for Failure {
    fn from(e: OvError) -> Self {
        Failure::Lib(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(OvStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Status(OvStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OvStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OvStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            OvStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Version string with the checkpoint schema; valid for the process lifetime.
#[no_mangle]
pub extern "C" fn ov_version() -> *const c_char {
    static VERSION: std::sync::OnceLock<CString> = std::sync::OnceLock::new();
    VERSION
        .get_or_init(|| CString::new(openviewer::version_info()).expect("no NUL in version"))
        .as_ptr()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length plus one,
/// or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ov_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// # Safety
/// `manifest_path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ov_dataset_load(
    manifest_path: *const c_char,
    out: *mut *mut OvDataset,
) -> OvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(manifest_path, "manifest_path")?;
        let inner = MultiViewDataset::load(&path)?;
        *out = Box::into_raw(Box::new(OvDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from `ov_dataset_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ov_dataset_free(ds: *mut OvDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ov_dataset_len(ds: *const OvDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ov_dataset_view_count(ds: *const OvDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.view_count())
}

/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ov_dataset_class_count(ds: *const OvDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.class_count)
}

/// # Safety
/// `ds` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ov_dataset_view_dim(
    ds: *const OvDataset,
    view: usize,
    out: *mut usize,
) -> OvStatus {
    guard(|| {
        let d = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let out = out_arg(out, "out")?;
        *out = *d
            .inner
            .view_dims()
            .get(view)
            .ok_or_else(|| invalid(format!("view {view} out of range")))?;
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ov_dataset_label(
    ds: *const OvDataset,
    index: usize,
    out: *mut usize,
) -> OvStatus {
    guard(|| {
        let d = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let out = out_arg(out, "out")?;
        *out = *d
            .inner
            .labels
            .get(index)
            .ok_or_else(|| invalid(format!("sample {index} out of range")))?;
        Ok(())
    })
}

/// # Safety
/// `checkpoint_path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ov_model_load(
    checkpoint_path: *const c_char,
    out: *mut *mut OvModel,
) -> OvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(checkpoint_path, "checkpoint_path")?;
        let inner = Checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(OvModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `ov_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ov_model_free(model: *mut OvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ov_model_known_class_count(model: *const OvModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.known_classes.len())
}

/// Scores every sample of `ds`. Writes the predicted original class label
/// and the max-softmax confidence per sample; `n` must equal the dataset
/// length.
///
/// # Safety
/// Handles must be live; `labels` and `confidence` must hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn ov_model_predict(
    model: *const OvModel,
    ds: *const OvDataset,
    labels: *mut usize,
    confidence: *mut f64,
    n: usize,
) -> OvStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let d = &ds.as_ref().ok_or_else(|| null("dataset"))?.inner;
        if n != d.len() {
            return Err(invalid(format!(
                "output length {n} != dataset length {}",
                d.len()
            )));
        }
        let labels = slice_mut_arg(labels, n, "labels")?;
        let confidence = slice_mut_arg(confidence, n, "confidence")?;
        let data = m.prepare(d)?;
        let idx: Vec<usize> = (0..n).collect();
        let z = openviewer::trainer::infer_chunked(
            &m.params,
            &data.views,
            &idx,
            m.config.forward_rows(),
            m.config.forward_options(),
            Fusion::Snapshot,
        )?;
        for (i, (k, p)) in predict(&z).into_iter().enumerate() {
            labels[i] = m.known_classes[k];
            confidence[i] = p;
        }
        Ok(())
    })
}

/// Elementwise `sign(x) · max(|x| − θ, 0)`. `input` and `output` may alias.
///
/// # Safety
/// Both pointers must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ov_soft_threshold(
    input: *const f64,
    output: *mut f64,
    n: usize,
    theta: f64,
) -> OvStatus {
    guard(|| {
        if !(theta >= 0.0 && theta.is_finite()) {
            return Err(invalid(format!(
                "theta must be finite and non-negative, got {theta}"
            )));
        }
        let x = Matrix::from_vec(1, n, slice_arg(input, n, "input")?.to_vec())?;
        let y = soft_threshold_values(&x, theta);
        slice_mut_arg(output, n, "output")?.copy_from_slice(y.as_slice());
        Ok(())
    })
}

/// CCR at a false-positive-rate budget from per-sample confidences. Known
/// samples have `is_unknown[i] == 0`; `correct[i]` is ignored for unknowns.
///
/// # Safety
/// Array pointers must hold `n` entries and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ov_oscr_ccr_at_fpr(
    confidence: *const f64,
    correct: *const u8,
    is_unknown: *const u8,
    n: usize,
    target_fpr: f64,
    out: *mut f64,
) -> OvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let conf = slice_arg(confidence, n, "confidence")?;
        let correct = slice_arg(correct, n, "correct")?;
        let unknown = slice_arg(is_unknown, n, "is_unknown")?;
        let preds: Vec<ScoredPrediction> = (0..n)
            .map(|i| {
                let truth = (unknown[i] == 0).then_some(0);
                ScoredPrediction {
                    index: i,
                    predicted: if correct[i] != 0 { 0 } else { 1 },
                    confidence: conf[i],
                    label: 0,
                    truth,
                }
            })
            .collect();
        *out = ccr_at_fpr(&oscr_curve(&preds)?, target_fpr)?;
        Ok(())
    })
}

/// Runs the ADMM solver on one row-major view `x` (`rows × cols`). Writes the
/// relative reconstruction error and the iteration count.
///
/// # Safety
/// `x` must hold `rows * cols` doubles; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ov_admm_solve(
    x: *const f64,
    rows: usize,
    cols: usize,
    atoms: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
    max_iter: usize,
    seed: u64,
    rel_error: *mut f64,
    iterations: *mut usize,
) -> OvStatus {
    guard(|| {
        let rel_error = out_arg(rel_error, "rel_error")?;
        let iterations = out_arg(iterations, "iterations")?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| invalid("rows * cols overflows"))?;
        if len == 0 || atoms == 0 {
            return Err(invalid("empty data or zero atoms"));
        }
        let xs = [Matrix::from_vec(
            rows,
            cols,
            slice_arg(x, len, "x")?.to_vec(),
        )?];
        let cfg = AdmmConfig {
            alpha,
            beta,
            gamma,
            max_iter,
            seed,
            ..AdmmConfig::default()
        };
        let state = admm::solve(&xs, atoms, &cfg)?;
        *rel_error = admm::relative_reconstruction_error(&state, &xs)?;
        *iterations = state.iterations;
        Ok(())
    })
}
