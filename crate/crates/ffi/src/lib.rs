//! C ABI over trained checkpoints and the scoring functions.
//!
//! Every fallible function returns a [`UchfrStatus`]; on failure a message is
//! available from [`uchfr_last_error`] on the same thread. Output pointers are
//! written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use uchfr_core::backbone::{Checkpoint, Network, Stage};
use uchfr_core::cmd::symmetric_score;
use uchfr_core::eval::{embd_score, fuse, rank1, roc, tpr_at_far};
use uchfr_core::{DType, Error, Real, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UchfrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Stage = 5,
    /// The requested quantity is not defined for this input.
    Undefined = 6,
    Panic = 7,
}

enum Net {
    F32(Network<f32>),
    F64(Network<f64>),
}

/// Opaque handle to a joint-stage network.
pub struct UchfrModel {
    net: Net,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(UchfrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => UchfrStatus::Io,
            Error::Format(_) | Error::Json(_) => UchfrStatus::Format,
            Error::Stage { .. } | Error::HeadMode(_) => UchfrStatus::Stage,
            _ => UchfrStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: UchfrStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UchfrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UchfrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            UchfrStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(UchfrStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be valid for `len` reads when non-null.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn model<'a>(m: *const UchfrModel) -> Result<&'a UchfrModel, Failure> {
    non_null(m, "model")?;
    // SAFETY: non-null handles come from `uchfr_model_load`.
    Ok(unsafe { &*m })
}

impl UchfrModel {
    fn input_dim(&self) -> usize {
        match &self.net {
            Net::F32(n) => n.config.input.flat_dim(),
            Net::F64(n) => n.config.input.flat_dim(),
        }
    }

    fn embedding_dim(&self) -> usize {
        match &self.net {
            Net::F32(n) => n.config.embedding_dim,
            Net::F64(n) => n.config.embedding_dim,
        }
    }

    fn has_cmd(&self) -> bool {
        match &self.net {
            Net::F32(n) => n.cmd.is_some(),
            Net::F64(n) => n.cmd.is_some(),
        }
    }
}

fn embed_with<T: Real>(net: &Network<T>, x: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>, Failure> {
    let t = Tensor::new(vec![rows, cols], x.iter().map(|&v| T::of_f64(v)).collect())?;
    Ok(net.embed(&t)?.to_f64_vec())
}

fn cmd_with<T: Real>(net: &Network<T>, e1: &[f64], e2: &[f64]) -> Result<f64, Failure> {
    if net.cmd.is_none() {
        return Err(fail(UchfrStatus::Undefined, "model was trained without the discriminator"));
    }
    let a: Vec<T> = e1.iter().map(|&v| T::of_f64(v)).collect();
    let b: Vec<T> = e2.iter().map(|&v| T::of_f64(v)).collect();
    Ok(symmetric_score(&a, &b, &net.params)?)
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn uchfr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a joint-stage checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uchfr_model_load(path: *const c_char, out: *mut *mut UchfrModel) -> UchfrStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(UchfrStatus::InvalidArgument, "path is not UTF-8"))?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        if ckpt.stage != Stage::Hfr {
            return Err(fail(
                UchfrStatus::Stage,
                format!("expected a {} checkpoint, found {}", Stage::Hfr, ckpt.stage),
            ));
        }
        let net = match ckpt.dtype() {
            Some(DType::F32) => Net::F32(Network::from_checkpoint(&ckpt)?),
            _ => Net::F64(Network::from_checkpoint(&ckpt)?),
        };
        *out = Box::into_raw(Box::new(UchfrModel { net }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`uchfr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn uchfr_model_free(model: *mut UchfrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn uchfr_model_input_dim(model: *const UchfrModel, out: *mut usize) -> UchfrStatus {
    guard(|| {
        let m = self::model(model)?;
        non_null(out, "out")?;
        *out = m.input_dim();
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn uchfr_model_embedding_dim(model: *const UchfrModel, out: *mut usize) -> UchfrStatus {
    guard(|| {
        let m = self::model(model)?;
        non_null(out, "out")?;
        *out = m.embedding_dim();
        Ok(())
    })
}

/// Writes 1 if the model carries the pair discriminator, else 0.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn uchfr_model_has_cmd(model: *const UchfrModel, out: *mut u8) -> UchfrStatus {
    guard(|| {
        let m = self::model(model)?;
        non_null(out, "out")?;
        *out = u8::from(m.has_cmd());
        Ok(())
    })
}

/// Embeds `rows` row-major inputs of width `cols` into `out`
/// (`rows * embedding_dim` values).
///
/// # Safety
/// `x` must hold `rows * cols` values and `out` have room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn uchfr_model_embed(
    model: *const UchfrModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> UchfrStatus {
    guard(|| {
        let m = self::model(model)?;
        if rows == 0 || cols != m.input_dim() {
            return Err(fail(
                UchfrStatus::InvalidArgument,
                format!("input is {rows}x{cols}, model expects width {}", m.input_dim()),
            ));
        }
        let need = rows * m.embedding_dim();
        if out_len < need {
            return Err(fail(
                UchfrStatus::InvalidArgument,
                format!("output holds {out_len} values, {need} needed"),
            ));
        }
        let xs = slice(x, rows * cols, "x")?;
        non_null(out, "out")?;
        let e = match &m.net {
            Net::F32(n) => embed_with(n, xs, rows, cols)?,
            Net::F64(n) => embed_with(n, xs, rows, cols)?,
        };
        ptr::copy_nonoverlapping(e.as_ptr(), out, e.len());
        Ok(())
    })
}

/// Order-independent discriminator probability that two embeddings share an
/// identity. Models trained without the discriminator return `Undefined`.
///
/// # Safety
/// `e1` and `e2` must each hold `dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uchfr_model_cmd_score(
    model: *const UchfrModel,
    e1: *const f64,
    e2: *const f64,
    dim: usize,
    out: *mut f64,
) -> UchfrStatus {
    guard(|| {
        let m = self::model(model)?;
        if dim != m.embedding_dim() {
            return Err(fail(
                UchfrStatus::InvalidArgument,
                format!("embedding width {dim}, model uses {}", m.embedding_dim()),
            ));
        }
        let (a, b) = (slice(e1, dim, "e1")?, slice(e2, dim, "e2")?);
        non_null(out, "out")?;
        *out = match &m.net {
            Net::F32(n) => cmd_with(n, a, b)?,
            Net::F64(n) => cmd_with(n, a, b)?,
        };
        Ok(())
    })
}

/// Maps a cosine similarity to `[0, 1]`.
#[no_mangle]
pub extern "C" fn uchfr_embd_score(cos: f64) -> f64 {
    embd_score(cos)
}

/// Averages an embedding score (already in `[0, 1]`) with a discriminator probability.
#[no_mangle]
pub extern "C" fn uchfr_fuse(embd: f64, cmd_prob: f64) -> f64 {
    fuse(embd, cmd_prob)
}

/// Rank-1 identification rate of a row-major `n_probes x n_gallery` score matrix.
///
/// # Safety
/// Arrays must hold the stated number of elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uchfr_rank1(
    scores: *const f64,
    n_probes: usize,
    n_gallery: usize,
    probe_classes: *const u32,
    gallery_classes: *const u32,
    out: *mut f64,
) -> UchfrStatus {
    guard(|| {
        let s = slice(scores, n_probes * n_gallery, "scores")?;
        let p = slice(probe_classes, n_probes, "probe_classes")?;
        let g = slice(gallery_classes, n_gallery, "gallery_classes")?;
        non_null(out, "out")?;
        *out = rank1(s, p, g)?;
        Ok(())
    })
}

/// True-positive rate at false-accept rate `target` over `n` scored pairs,
/// `genuine[i] != 0` marking same-identity pairs. Returns `Undefined` when
/// there are too few imposter pairs to resolve `target`.
///
/// # Safety
/// `scores` and `genuine` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uchfr_tpr_at_far(
    scores: *const f64,
    genuine: *const u8,
    n: usize,
    target: f64,
    out: *mut f64,
) -> UchfrStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let labels: Vec<bool> = slice(genuine, n, "genuine")?.iter().map(|&g| g != 0).collect();
        non_null(out, "out")?;
        if !(target > 0.0 && target <= 1.0) {
            return Err(fail(UchfrStatus::InvalidArgument, format!("target FAR {target} outside (0, 1]")));
        }
        let points = roc(s, &labels)?;
        *out = tpr_at_far(&points, target)
            .ok_or_else(|| fail(UchfrStatus::Undefined, format!("TPR at FAR {target} is undefined here")))?;
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uchfr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
