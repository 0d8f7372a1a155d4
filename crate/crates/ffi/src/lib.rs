//! C ABI for loading jemlab checkpoints and running inference, sampling
//! and the scalar evaluation metrics.
//!
//! Conventions:
//! * every fallible function returns a [`JemStatus`]; on failure a message
//!   is available from [`jem_last_error`] on the same thread;
//! * models are opaque [`JemModel`] handles released with [`jem_model_free`];
//! * all numeric buffers are `double`, row-major, owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use jemlab::autodiff::DType;
use jemlab::checkpoint;
use jemlab::eval;
use jemlab::sampler::SgldConfig;
use jemlab::seeds::{self, SeedPlan};
use jemlab::trainer::{sample_fresh, Checkpoint};
use jemlab::{Error, Tensor};

/// Result codes shared by all entry points.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JemStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Divergence = 6,
    Panic = 7,
}

/// A trained model together with its SGLD init distribution and data range.
pub struct JemModel {
    inner: Checkpoint<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> JemStatus {
    match e {
        Error::Io { .. } => JemStatus::Io,
        Error::Format { .. } => JemStatus::Format,
        Error::Shape { .. } => JemStatus::Shape,
        Error::Divergence { .. } | Error::NonFinite(_) => JemStatus::Divergence,
        _ => JemStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), (JemStatus, String)>) -> JemStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => JemStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            JemStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (JemStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (JemStatus, String) {
    (JemStatus::NullPointer, format!("`{what}` is null"))
}

fn bad(msg: impl Into<String>) -> (JemStatus, String) {
    (JemStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (JemStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (JemStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `m` must be null or a live handle from [`jem_model_load`].
unsafe fn model<'a>(m: *const JemModel) -> Result<&'a JemModel, (JemStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn load_f64(path: &Path) -> jemlab::Result<Checkpoint<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let entries: Vec<(String, Tensor<f64>)> = match checkpoint::peek_dtype(&bytes)? {
        DType::F64 => checkpoint::decode::<f64>(&bytes)?,
        DType::F32 => checkpoint::decode::<f32>(&bytes)?
            .into_iter()
            .map(|(n, t)| (n, t.cast::<f64>()))
            .collect(),
    };
    Checkpoint::from_entries(&entries)
}

impl JemModel {
    fn batch(&self, x: &[f64], n: usize) -> Result<Tensor<f64>, (JemStatus, String)> {
        let mut shape = vec![n];
        shape.extend(self.inner.model.sample_shape());
        Tensor::new(shape, x.to_vec()).map_err(lib_err)
    }

    fn input_len(&self) -> usize {
        self.inner.model.sample_shape().iter().product()
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn jem_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn jem_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint (f32 or f64) into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn jem_model_load(path: *const c_char, out: *mut *mut JemModel) -> JemStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| bad("path is not UTF-8"))?;
        let inner = load_f64(Path::new(p)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(JemModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `m` must be null or a handle from [`jem_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn jem_model_free(m: *mut JemModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of values in one input sample (product of the sample shape).
///
/// # Safety
/// `m` must be null or a live handle; null yields 0.
#[no_mangle]
pub unsafe extern "C" fn jem_model_input_len(m: *const JemModel) -> usize {
    m.as_ref().map_or(0, |m| m.input_len())
}

/// Number of classes; 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn jem_model_classes(m: *const JemModel) -> usize {
    m.as_ref().map_or(0, |m| m.inner.model.classes())
}

/// Logits for `n` samples: reads `n·input_len` values, writes `n·classes`.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn jem_model_logits(m: *const JemModel, x: *const f64, n: usize, out: *mut f64) -> JemStatus {
    guard(|| {
        let m = model(m)?;
        let x = slice(x, n * m.input_len(), "x")?;
        let out = slice_mut(out, n * m.inner.model.classes(), "out")?;
        if n == 0 {
            return Ok(());
        }
        let logits = eval::batched_logits(&m.inner.model, &m.batch(x, n)?).map_err(lib_err)?;
        out.copy_from_slice(logits.data());
        Ok(())
    })
}

/// Energies `E(x) = -logsumexp f(x)` for `n` samples, written to `out[n]`.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn jem_model_energy(m: *const JemModel, x: *const f64, n: usize, out: *mut f64) -> JemStatus {
    guard(|| {
        let m = model(m)?;
        let x = slice(x, n * m.input_len(), "x")?;
        let out = slice_mut(out, n, "out")?;
        if n == 0 {
            return Ok(());
        }
        let e = eval::batched_energy(&m.inner.model, &m.batch(x, n)?).map_err(lib_err)?;
        out.copy_from_slice(e.data());
        Ok(())
    })
}

/// Draws `n` fresh SGLD samples into `out[n·input_len]`.
///
/// Chains start from the checkpoint's informative init and stay inside its
/// data range. `class < 0` samples from p(x), otherwise from p(x | class).
///
/// # Safety
/// `out` must be valid for `n·input_len` writes.
#[no_mangle]
pub unsafe extern "C" fn jem_model_sample(
    m: *const JemModel,
    n: usize,
    steps: usize,
    step_size: f64,
    noise: f64,
    class: i64,
    seed: u64,
    out: *mut f64,
) -> JemStatus {
    guard(|| {
        let m = model(m)?;
        let out = slice_mut(out, n * m.input_len(), "out")?;
        let class = match usize::try_from(class) {
            Ok(c) if c >= m.inner.model.classes() => return Err(bad(format!("class {c} out of range"))),
            Ok(c) => Some(c),
            Err(_) => None,
        };
        let cfg = SgldConfig {
            steps,
            step_size,
            noise,
            clamp: m.inner.clamp,
        };
        let mut rng = seeds::rng(SeedPlan::from_master(seed).sampler);
        let x = sample_fresh(&m.inner.model, &m.inner.init, n, &cfg, class, &mut rng).map_err(lib_err)?;
        out.copy_from_slice(x.data());
        Ok(())
    })
}

/// AUROC of in-distribution scores against OOD scores (higher = more in-distribution).
///
/// # Safety
/// Score buffers must be valid for their lengths; `result` for one write.
#[no_mangle]
pub unsafe extern "C" fn jem_auroc(scores_in: *const f64, n_in: usize, scores_out: *const f64, n_out: usize, result: *mut f64) -> JemStatus {
    guard(|| {
        let a = slice(scores_in, n_in, "scores_in")?;
        let b = slice(scores_out, n_out, "scores_out")?;
        let r = result.as_mut().ok_or_else(|| null("result"))?;
        *r = eval::auroc(a, b).map_err(lib_err)?;
        Ok(())
    })
}

/// Expected calibration error over `bins` equal-width confidence bins.
/// `correct[i]` is nonzero when prediction `i` was right.
///
/// # Safety
/// Input buffers must be valid for `n` reads; `result` for one write.
#[no_mangle]
pub unsafe extern "C" fn jem_ece(confidence: *const f64, correct: *const u8, n: usize, bins: usize, result: *mut f64) -> JemStatus {
    guard(|| {
        let c = slice(confidence, n, "confidence")?;
        let k: Vec<bool> = slice(correct, n, "correct")?.iter().map(|&v| v != 0).collect();
        let r = result.as_mut().ok_or_else(|| null("result"))?;
        *r = eval::ece(c, &k, bins).map_err(lib_err)?.ece;
        Ok(())
    })
}
