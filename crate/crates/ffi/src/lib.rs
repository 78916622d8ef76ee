//! C ABI over the `bnnq` engine.
//!
//! Every fallible call returns a [`BnnqStatus`]; on failure the message is
//! kept per thread and readable through [`bnnq_last_error`]. Models are
//! opaque [`BnnqModel`] handles released with [`bnnq_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use bnnq::fault::{corrupt_network, FaultConfig, FaultTarget};
use bnnq::graph::{image_input, NetworkGraph};
use bnnq::harness::footprint;
use bnnq::model_io::{load_model, save_model};
use bnnq::transform::{build_conventional, transform_network};
use bnnq::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnnqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed model bytes.
    Format = 4,
    /// Graph or tensor shapes that do not fit together.
    Shape = 5,
    /// No usable quantization grid.
    Quantization = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct BnnqModel {
    graph: NetworkGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BnnqStatus {
    match e {
        Error::Io(_) => BnnqStatus::Io,
        Error::BadMagic | Error::UnsupportedVersion(_) | Error::TruncatedFile { .. } | Error::PayloadLengthMismatch(_) => BnnqStatus::Format,
        Error::Shape(_) | Error::GraphShape(_) | Error::Overflow => BnnqStatus::Shape,
        Error::DegenerateScale | Error::DegenerateSigma { .. } | Error::NonFiniteInput(_) => BnnqStatus::Quantization,
        _ => BnnqStatus::InvalidArgument,
    }
}

struct Fail(BnnqStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BnnqStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BnnqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            BnnqStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BnnqStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or points to a live handle.
unsafe fn model<'a>(p: *const BnnqModel) -> Result<&'a BnnqModel, Fail> {
    p.as_ref().ok_or_else(|| null("model"))
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(BnnqStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

/// # Safety
/// `out` is null or valid for one write.
unsafe fn emit<T>(out: *mut T, what: &str, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn boxed(graph: NetworkGraph) -> *mut BnnqModel {
    Box::into_raw(Box::new(BnnqModel { graph }))
}

/// Message of the calling thread's most recent failure, or null after a
/// success. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn bnnq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a model file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bnnq_model_load(path: *const c_char, out: *mut *mut BnnqModel) -> BnnqStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        let bytes = std::fs::read(path).map_err(Error::from)?;
        let g = load_model(&bytes)?;
        emit(out, "out", boxed(g))
    })
}

/// Loads a model from `len` bytes at `data`.
///
/// # Safety
/// `data` is valid for `len` reads; `out` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bnnq_model_load_bytes(data: *const u8, len: usize, out: *mut *mut BnnqModel) -> BnnqStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let g = load_model(std::slice::from_raw_parts(data, len))?;
        emit(out, "out", boxed(g))
    })
}

/// Writes `m` to a model file.
///
/// # Safety
/// `m` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bnnq_model_save(m: *const BnnqModel, path: *const c_char) -> BnnqStatus {
    guard(|| {
        let m = model(m)?;
        let bytes = save_model(&m.graph)?;
        std::fs::write(text(path, "path")?, bytes).map_err(Error::from)?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `m` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bnnq_model_free(m: *mut BnnqModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Quantizes a float model at `bits` (2..=16) into a new handle: the
/// zero-overhead form, or the Q/D-wrapped form when `conventional != 0`.
///
/// # Safety
/// `m` is a live handle; `out` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bnnq_model_transform(m: *const BnnqModel, bits: u8, conventional: i32, out: *mut *mut BnnqModel) -> BnnqStatus {
    guard(|| {
        let m = model(m)?;
        let g = if conventional != 0 { build_conventional(&m.graph, bits)? } else { transform_network(&m.graph, bits)?.0 };
        emit(out, "out", boxed(g))
    })
}

/// Classifies one `height x width` grayscale image (`height * width`
/// bytes, row-major).
///
/// # Safety
/// `m` is a live handle; `pixels` is valid for `height * width` reads;
/// `out_class` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bnnq_model_predict(m: *const BnnqModel, pixels: *const u8, height: usize, width: usize, out_class: *mut usize) -> BnnqStatus {
    guard(|| {
        let m = model(m)?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let n = height.checked_mul(width).ok_or_else(|| Fail(BnnqStatus::InvalidArgument, "image size overflows".into()))?;
        let x = image_input(std::slice::from_raw_parts(pixels, n), height, width)?;
        emit(out_class, "out_class", m.graph.predict(&x)?)
    })
}

/// Total parameter memory in bits.
///
/// # Safety
/// `m` is a live handle; `out_bits` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bnnq_model_footprint(m: *const BnnqModel, out_bits: *mut u64) -> BnnqStatus {
    guard(|| emit(out_bits, "out_bits", footprint(&model(m)?.graph).total))
}

/// Number of graph nodes, Q/D nodes included.
///
/// # Safety
/// `m` is a live handle; `out` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bnnq_model_node_count(m: *const BnnqModel, out: *mut usize) -> BnnqStatus {
    guard(|| emit(out, "out", model(m)?.graph.node_count()))
}

/// Execution mode code: 0 float, 1 conventional, 2 zero-overhead.
///
/// # Safety
/// `m` is a live handle; `out` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bnnq_model_mode(m: *const BnnqModel, out: *mut u8) -> BnnqStatus {
    guard(|| emit(out, "out", model(m)?.graph.mode().code()))
}

/// A corrupted copy of `m`: trial `trial` of the bit-flip campaign seeded
/// by `seed` at per-bit rate `rate`. `target` is `all`, a layer name, or
/// `kind:<slug>`; null means `all`. `out_flips` may be null.
///
/// # Safety
/// `m` is a live handle; `target` is null or NUL-terminated; `out` is valid
/// for one write; `out_flips` is null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bnnq_model_inject(
    m: *const BnnqModel,
    rate: f64,
    seed: u64,
    trial: u64,
    target: *const c_char,
    out: *mut *mut BnnqModel,
    out_flips: *mut u64,
) -> BnnqStatus {
    guard(|| {
        let m = model(m)?;
        let target: FaultTarget = if target.is_null() { FaultTarget::All } else { text(target, "target")?.parse()? };
        let c = corrupt_network(&m.graph, &FaultConfig::new(rate, seed, trial, target)?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if !out_flips.is_null() {
            out_flips.write(c.flips);
        }
        emit(out, "out", boxed(c.graph))
    })
}
