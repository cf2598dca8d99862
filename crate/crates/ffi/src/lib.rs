//! C ABI over the paragon core.
//!
//! Every function returns a [`ParagonStatus`]; on failure the message is kept
//! per thread and read with [`paragon_last_error`]. Handles are opaque and
//! must be released with their `_free` function. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use paragon::evalkit::{alpha_ndcg_at_k, ndcg_at_k};
use paragon::objectives::TaskWeights;
use paragon::paramgen::Generator;
use paragon::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParagonStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Shape = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
    Internal = 8,
}

/// A trained parameter generator loaded from its artifact directory.
pub struct ParagonGenerator {
    inner: Generator,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> ParagonStatus {
    match e {
        Error::Argument(_) | Error::Config(_) => ParagonStatus::InvalidArgument,
        Error::Io { .. } | Error::Json(_) | Error::Dependency { .. } | Error::Schema(_) => ParagonStatus::Io,
        Error::Shape(_) => ParagonStatus::Shape,
        Error::Numeric(_) => ParagonStatus::Numeric,
        _ => ParagonStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (ParagonStatus, String)>) -> ParagonStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ParagonStatus::Ok
        }
        Ok(Err((s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("panic inside paragon");
            ParagonStatus::Panic
        }
    }
}

fn core(e: Error) -> (ParagonStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (ParagonStatus, String) {
    (ParagonStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (ParagonStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Copies the calling thread's last error message, NUL-terminated, into
/// `buf`. Returns the full message length excluding the terminator, so a
/// return value `>= cap` means the message was truncated.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn paragon_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn paragon_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a generator from the directory written by `paragon train-generator`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn paragon_generator_load(dir: *const c_char, out: *mut *mut ParagonGenerator) -> ParagonStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| (ParagonStatus::InvalidArgument, "dir is not UTF-8".to_string()))?;
        let inner = Generator::load(Path::new(dir)).map_err(core)?;
        *out = Box::into_raw(Box::new(ParagonGenerator { inner }));
        Ok(())
    })
}

/// Releases a generator. Null is a no-op.
///
/// # Safety
/// `g` must come from [`paragon_generator_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn paragon_generator_free(g: *mut ParagonGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Number of preference weights the generator is conditioned on.
///
/// # Safety
/// `g` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn paragon_generator_weight_len(g: *const ParagonGenerator) -> usize {
    g.as_ref().map_or(0, |g| g.inner.weight_len)
}

/// Length of a generated adapter's flattened parameter vector.
///
/// # Safety
/// `g` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn paragon_generator_param_len(g: *const ParagonGenerator) -> usize {
    g.as_ref().map_or(0, |g| g.inner.stats.mean.len())
}

/// Samples one adapter for `weights` with guidance scale `guidance` into
/// `out`, which must hold at least [`paragon_generator_param_len`] floats.
///
/// # Safety
/// `weights` must point to `n_weights` doubles and `out` to `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn paragon_generator_sample(
    g: *const ParagonGenerator,
    weights: *const f64,
    n_weights: usize,
    guidance: f64,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> ParagonStatus {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| null("generator"))?;
        let w = slice(weights, n_weights, "weights")?;
        let need = g.inner.stats.mean.len();
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < need {
            return Err((ParagonStatus::BufferTooSmall, format!("out holds {out_len} floats, need {need}")));
        }
        let w = TaskWeights::new(w.to_vec()).map_err(core)?;
        let t = g.inner.sample_adapter(&w, guidance, seed).map_err(core)?;
        std::ptr::copy_nonoverlapping(t.values.as_ptr(), out, need);
        Ok(())
    })
}

/// NDCG@k of one ranked list with a single relevant `target`.
///
/// # Safety
/// `ranked` must point to `n` item ids and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn paragon_ndcg_at_k(
    ranked: *const u32,
    n: usize,
    target: u32,
    k: usize,
    out: *mut f64,
) -> ParagonStatus {
    guard(|| {
        let ranked = slice(ranked, n, "ranked")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ndcg_at_k(ranked, target, k).map_err(core)?;
        Ok(())
    })
}

/// α-NDCG@k of `order` over a row-major `n × m` 0/1 category matrix.
///
/// # Safety
/// `labels` must point to `n * m` doubles, `order` to `order_len` indices and
/// `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn paragon_alpha_ndcg_at_k(
    labels: *const f64,
    n: usize,
    m: usize,
    order: *const usize,
    order_len: usize,
    alpha: f64,
    k: usize,
    out: *mut f64,
) -> ParagonStatus {
    guard(|| {
        let cells = n
            .checked_mul(m)
            .ok_or_else(|| (ParagonStatus::InvalidArgument, "n * m overflows".to_string()))?;
        let labels = slice(labels, cells, "labels")?;
        let order = slice(order, order_len, "order")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if let Some(&bad) = order.iter().find(|&&i| i >= n) {
            return Err((ParagonStatus::InvalidArgument, format!("order index {bad} out of range for {n} rows")));
        }
        let y = ndarray::Array2::from_shape_vec((n, m), labels.to_vec())
            .map_err(|e| (ParagonStatus::Shape, e.to_string()))?;
        *out = alpha_ndcg_at_k(&y, order, alpha, k).map_err(core)?;
        Ok(())
    })
}
