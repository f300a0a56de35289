//! C ABI over the `pairwise-cl` engine.
//!
//! Every function returns a [`PclStatus`]; on failure the message is
//! available from [`pcl_last_error`] on the same thread. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Arrays are row-major and borrowed for the call only.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use pairwise_cl::analysis::{mann_whitney_u, pwcca, MwuMethod};
use pairwise_cl::contrastive::{pair_loss_value, pairwise_multiview_loss, ProjectedBatch};
use pairwise_cl::dsp::{mel_spectrogram, MelConfig, Waveform};
use pairwise_cl::encoders::{load_checkpoint, ModelCheckpoint, ViewClassifier};
use pairwise_cl::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    Degenerate = 6,
    Unsupported = 7,
    Panic = 8,
}

impl From<&Error> for PclStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => PclStatus::Shape,
            Error::Contract(_) | Error::InputTooShort { .. } => PclStatus::InvalidArgument,
            Error::Format { .. } | Error::Schema(_) => PclStatus::Format,
            Error::Io { .. } | Error::MissingView { .. } => PclStatus::Io,
            Error::DegenerateInput(_) | Error::EmptyClass(_) | Error::EmptyDataset(_) => PclStatus::Degenerate,
            Error::Unsupported(_) => PclStatus::Unsupported,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(PclStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(PclStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PclStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PclStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PclStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            PclStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn view<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: caller guarantees a writable location when non-null.
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

fn checked_len(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| invalid("array size overflows"))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Tensor<f64>, Failure> {
    let data = view(p, checked_len(&[rows, cols])?, what)?;
    Ok(Tensor::new(vec![rows, cols], data.to_vec())?)
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn pcl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Two-view contrastive loss of `n x d` embeddings `zi`, `zj` (row k of
/// each is a positive pair): NT-Xent in both directions, summed, averaged
/// over rows.
///
/// # Safety
/// `zi` and `zj` must each hold `n * d` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pcl_pair_loss(
    zi: *const f64,
    zj: *const f64,
    n: usize,
    d: usize,
    tau: f64,
    out_loss: *mut f64,
) -> PclStatus {
    guard(|| {
        let a = matrix(zi, n, d, "zi")?;
        let b = matrix(zj, n, d, "zj")?;
        *out(out_loss, "out_loss")? = pair_loss_value(&a, &b, tau)?;
        Ok(())
    })
}

/// Multi-view loss over `k` views packed as `[k, n, d]`: pair losses summed
/// over ordered view pairs, divided by the number of unordered pairs.
///
/// # Safety
/// `views` must hold `k * n * d` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pcl_multiview_loss(
    views: *const f64,
    k: usize,
    n: usize,
    d: usize,
    tau: f64,
    out_loss: *mut f64,
) -> PclStatus {
    guard(|| {
        let per = checked_len(&[n, d])?;
        let all = view(views, checked_len(&[k, per])?, "views")?;
        let tensors = (0..k)
            .map(|v| Tensor::new(vec![n, d], all[v * per..(v + 1) * per].to_vec()))
            .collect::<pairwise_cl::Result<Vec<_>>>()?;
        let batch = ProjectedBatch::new(tensors)?;
        *out(out_loss, "out_loss")? = pairwise_multiview_loss(&batch, tau)?;
        Ok(())
    })
}

/// Projection-weighted CCA between `x` (`n x dx`, the weighting side) and
/// `y` (`n x dy`).
///
/// # Safety
/// `x` and `y` must hold `n * dx` and `n * dy` doubles.
#[no_mangle]
pub unsafe extern "C" fn pcl_pwcca(
    x: *const f64,
    n: usize,
    dx: usize,
    y: *const f64,
    dy: usize,
    out_score: *mut f64,
) -> PclStatus {
    guard(|| {
        let a = matrix(x, n, dx, "x")?;
        let b = matrix(y, n, dy, "y")?;
        *out(out_score, "out_score")? = pwcca(&a, &b)?.score;
        Ok(())
    })
}

/// Two-sided Mann-Whitney U test. `out_exact` receives 1 when the exact
/// null distribution was used, 0 for the normal approximation.
///
/// # Safety
/// `a` and `b` must hold `na` and `nb` doubles; outputs may be null except `out_p`.
#[no_mangle]
pub unsafe extern "C" fn pcl_mann_whitney(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out_u: *mut f64,
    out_p: *mut f64,
    out_exact: *mut i32,
) -> PclStatus {
    guard(|| {
        let r = mann_whitney_u(view(a, na, "a")?, view(b, nb, "b")?)?;
        *out(out_p, "out_p")? = r.p_value;
        if let Some(u) = out_u.as_mut() {
            *u = r.u;
        }
        if let Some(e) = out_exact.as_mut() {
            *e = i32::from(r.method == MwuMethod::Exact);
        }
        Ok(())
    })
}

/// Owned row-major `f32` matrix returned by the library.
pub struct PclMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

fn boxed_matrix(t: Tensor<f32>) -> Result<*mut PclMatrix, Failure> {
    let (rows, cols) = t.dims2()?;
    Ok(Box::into_raw(Box::new(PclMatrix {
        rows,
        cols,
        data: t.data().to_vec(),
    })))
}

/// Natural-log mel spectrogram (`n_mels x frames`) of a mono waveform.
///
/// # Safety
/// `samples` must hold `len` floats; `out_matrix` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pcl_mel_spectrogram(
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    out_matrix: *mut *mut PclMatrix,
) -> PclStatus {
    guard(|| {
        let dst = out(out_matrix, "out_matrix")?;
        let wave = Waveform::new(view(samples, len, "samples")?.to_vec(), sample_rate)?;
        let cfg = MelConfig {
            sample_rate,
            ..MelConfig::default()
        };
        *dst = boxed_matrix(mel_spectrogram(&wave, &cfg)?.values)?;
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pcl_matrix_rows(m: *const PclMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.rows)
}

/// # Safety
/// `m` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pcl_matrix_cols(m: *const PclMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.cols)
}

/// Borrowed pointer to `rows * cols` values, valid until the matrix is freed.
///
/// # Safety
/// `m` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pcl_matrix_data(m: *const PclMatrix) -> *const f32 {
    m.as_ref().map_or(ptr::null(), |m| m.data.as_ptr())
}

/// # Safety
/// `m` must come from this library and not be freed twice. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pcl_matrix_free(m: *mut PclMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Loaded pre-training or classifier checkpoint.
pub struct PclCheckpoint {
    ckpt: ModelCheckpoint,
    view_names: Vec<CString>,
}

fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    // SAFETY: non-null, caller promises a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| invalid("path is not UTF-8"))?;
    Ok(Path::new(s))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_ckpt` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pcl_checkpoint_load(path: *const c_char, out_ckpt: *mut *mut PclCheckpoint) -> PclStatus {
    guard(|| {
        let dst = out(out_ckpt, "out_ckpt")?;
        let ckpt = load_checkpoint(path_arg(path)?)?;
        let view_names = ckpt
            .views()
            .into_iter()
            .map(|v| CString::new(v).map_err(|_| invalid("view name holds NUL")))
            .collect::<Result<_, _>>()?;
        *dst = Box::into_raw(Box::new(PclCheckpoint { ckpt, view_names }));
        Ok(())
    })
}

/// # Safety
/// `c` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pcl_checkpoint_view_count(c: *const PclCheckpoint) -> usize {
    c.as_ref().map_or(0, |c| c.view_names.len())
}

/// View name `i`, or null when out of range. Borrowed from the handle.
///
/// # Safety
/// `c` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pcl_checkpoint_view_name(c: *const PclCheckpoint, i: usize) -> *const c_char {
    c.as_ref()
        .and_then(|c| c.view_names.get(i))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// 1 for a fine-tuned classifier, 0 for a pre-training checkpoint.
///
/// # Safety
/// `c` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pcl_checkpoint_is_classifier(c: *const PclCheckpoint) -> i32 {
    c.as_ref().map_or(0, |c| i32::from(c.ckpt.is_classifier()))
}

/// Encoder representations (`rows x 128`) for `rows` inputs of view `view`,
/// each flattened to the view's declared input size.
///
/// # Safety
/// `c` must be a live handle, `view` NUL-terminated, `inputs` valid for
/// `rows * input_len` floats and `out_matrix` writable.
#[no_mangle]
pub unsafe extern "C" fn pcl_checkpoint_encode(
    c: *const PclCheckpoint,
    view_name: *const c_char,
    inputs: *const f32,
    rows: usize,
    input_len: usize,
    out_matrix: *mut *mut PclMatrix,
) -> PclStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("checkpoint"))?;
        let dst = out(out_matrix, "out_matrix")?;
        if view_name.is_null() {
            return Err(null("view"));
        }
        let name = CStr::from_ptr(view_name)
            .to_str()
            .map_err(|_| invalid("view is not UTF-8"))?;
        let spec = c.ckpt.spec_for(name)?;
        let expected = checked_len(&spec.input_dims)?;
        if input_len != expected {
            return Err(invalid(format!(
                "view `{name}` takes {expected} values per input ({:?}), got {input_len}",
                spec.input_dims
            )));
        }
        let model = if c.ckpt.is_classifier() {
            c.ckpt.to_classifier()?
        } else {
            ViewClassifier::from_checkpoint(&c.ckpt, &spec, 2, 0)?
        };
        let mut shape = vec![rows];
        shape.extend(&spec.input_dims);
        let x = Tensor::new(
            shape,
            view(inputs, checked_len(&[rows, input_len])?, "inputs")?.to_vec(),
        )?;
        *dst = boxed_matrix(model.representations(&x)?)?;
        Ok(())
    })
}

/// # Safety
/// `c` must come from [`pcl_checkpoint_load`] and not be freed twice. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pcl_checkpoint_free(c: *mut PclCheckpoint) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}
