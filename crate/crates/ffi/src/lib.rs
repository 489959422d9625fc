//! C interface to the midway crate.
//!
//! Every function returns an [`MwStatus`]. On failure the message is kept
//! per thread and can be read with [`mw_last_error`]. Handles are opaque and
//! must be released with their `_free` function.
//!
//! Pointer arguments must be null or valid for the sizes stated on each
//! function. Null is reported as `NullArgument` and never dereferenced.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use midway::analysis::{perturb_forward, Model, PerturbationConfig};
use midway::harness::{Checkpoint, Preset, RunConfig};
use midway::raster::Image;
use midway::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MwStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Data = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn fail(status: MwStatus, msg: impl Into<String>) -> MwStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> MwStatus {
    let status = match &e {
        Error::Config(_) => MwStatus::Config,
        Error::Io { .. } => MwStatus::Io,
        Error::Format(_) | Error::ParamMismatch { .. } | Error::Image(_) => MwStatus::Format,
        Error::NonFinite(_) | Error::Divergent { .. } | Error::Degenerate(_) => MwStatus::Numeric,
        Error::Data(_) => MwStatus::Data,
        Error::Shape(_) => MwStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> MwStatus) -> MwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(MwStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, MwStatus> {
    if p.is_null() {
        return Err(fail(MwStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(MwStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Copies `s` with a trailing NUL into `buf`. `needed` receives the full size.
unsafe fn write_str(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> MwStatus {
    if !needed.is_null() {
        *needed = s.len() + 1;
    }
    if buf.is_null() || len < s.len() + 1 {
        return fail(MwStatus::BufferTooSmall, format!("need {} bytes", s.len() + 1));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    MwStatus::Ok
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Run configuration handle.
pub struct MwConfig {
    inner: RunConfig,
}

/// Creates a configuration from a preset name ("toy" or "paper").
#[no_mangle]
pub unsafe extern "C" fn mw_config_new(preset: *const c_char, out: *mut *mut MwConfig) -> MwStatus {
    guard(|| {
        if out.is_null() {
            return fail(MwStatus::NullArgument, "out is null");
        }
        let name = match str_arg(preset, "preset") {
            Ok(s) => s,
            Err(s) => return s,
        };
        match name.parse::<Preset>() {
            Ok(p) => {
                *out = Box::into_raw(Box::new(MwConfig { inner: RunConfig::preset(p) }));
                MwStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Sets one dotted key. The configuration is unchanged on failure.
#[no_mangle]
pub unsafe extern "C" fn mw_config_set(cfg: *mut MwConfig, key: *const c_char, value: *const c_char) -> MwStatus {
    guard(|| {
        let Some(cfg) = cfg.as_mut() else { return fail(MwStatus::NullArgument, "config is null") };
        let (k, v) = match (str_arg(key, "key"), str_arg(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match cfg.inner.parse_over(&format!("{k}={v}")) {
            Ok(c) => {
                cfg.inner = c;
                MwStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Writes the 16-character configuration hash.
#[no_mangle]
pub unsafe extern "C" fn mw_config_hash(cfg: *const MwConfig, buf: *mut c_char, len: usize, needed: *mut usize) -> MwStatus {
    guard(|| match cfg.as_ref() {
        Some(c) => write_str(&c.inner.hash(), buf, len, needed),
        None => fail(MwStatus::NullArgument, "config is null"),
    })
}

#[no_mangle]
pub unsafe extern "C" fn mw_config_free(cfg: *mut MwConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trained model loaded from a checkpoint.
pub struct MwModel {
    ck: Checkpoint,
}

#[no_mangle]
pub unsafe extern "C" fn mw_model_load(path: *const c_char, out: *mut *mut MwModel) -> MwStatus {
    guard(|| {
        if out.is_null() {
            return fail(MwStatus::NullArgument, "out is null");
        }
        let p = match str_arg(path, "path") {
            Ok(s) => s,
            Err(s) => return s,
        };
        match Checkpoint::load(Path::new(p)) {
            Ok(ck) => {
                *out = Box::into_raw(Box::new(MwModel { ck }));
                MwStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Input image side in pixels and patch grid side.
#[no_mangle]
pub unsafe extern "C" fn mw_model_dims(model: *const MwModel, image_size: *mut usize, grid: *mut usize) -> MwStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return fail(MwStatus::NullArgument, "model is null") };
        let enc = &m.ck.config.objective.encoder;
        if !image_size.is_null() {
            *image_size = enc.image_size;
        }
        if !grid.is_null() {
            *grid = enc.grid();
        }
        MwStatus::Ok
    })
}

/// Training step stored in the checkpoint.
#[no_mangle]
pub unsafe extern "C" fn mw_model_step(model: *const MwModel, step: *mut u64) -> MwStatus {
    guard(|| match (model.as_ref(), step.is_null()) {
        (Some(m), false) => {
            *step = m.ck.state.step;
            MwStatus::Ok
        }
        _ => fail(MwStatus::NullArgument, "model or step is null"),
    })
}

#[no_mangle]
pub unsafe extern "C" fn mw_model_free(model: *mut MwModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Perturbation heatmap of `source` (row-major token index) from frame `src`
/// into frame `tgt`. Frames are interleaved 8-bit RGB of `size`×`size`
/// pixels where `size` is the model image size. `scores` must hold
/// grid×grid values and receives cosine scores in row-major order.
#[no_mangle]
pub unsafe extern "C" fn mw_perturb(
    model: *const MwModel,
    src: *const u8,
    tgt: *const u8,
    size: usize,
    source: usize,
    k: usize,
    seed: u64,
    scores: *mut f64,
    scores_len: usize,
) -> MwStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return fail(MwStatus::NullArgument, "model is null") };
        if src.is_null() || tgt.is_null() || scores.is_null() {
            return fail(MwStatus::NullArgument, "frame or score buffer is null");
        }
        let enc = &m.ck.config.objective.encoder;
        if size != enc.image_size {
            return fail(MwStatus::InvalidArgument, format!("frames must be {0}x{0}, got {size}", enc.image_size));
        }
        let n = enc.grid() * enc.grid();
        if scores_len < n {
            return fail(MwStatus::BufferTooSmall, format!("need {n} scores"));
        }
        let bytes = size * size * 3;
        let load = |p: *const u8| Image::from_rgb8(size, size, std::slice::from_raw_parts(p, bytes)).map(|i| i.normalized());
        let (a, b) = match (load(src), load(tgt)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return from_error(e),
        };
        let model = Model { encoder: enc, dynamics: &m.ck.config.objective.dynamics, student: &m.ck.state.params.student, teacher: &m.ck.state.params.teacher };
        let cfg = PerturbationConfig { k, source_location: source, seed, ..Default::default() };
        match perturb_forward(&a, &b, &cfg, &model) {
            Ok(h) => {
                let out = std::slice::from_raw_parts_mut(scores, n);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = h.score(i);
                }
                MwStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
