//! C ABI over the `ddad` library.
//!
//! Handles are opaque pointers owned by the caller and released with the matching `_free`
//! function. Every fallible call returns a [`DdadStatus`]; on failure a description of the last
//! error on the calling thread is available from [`ddad_last_error`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ddad::data::ImageTensor;
use ddad::pipeline::{score_maps, Models};
use ddad::scoring::{image_score, ScoreKind, SigmaAgg};
use ddad::training::EnsembleCheckpoint;
use ddad::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdadStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Contract = 6,
    Divergence = 7,
    Panic = 8,
}

/// Score kinds, mirroring the library's.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdadScoreKind {
    ARec = 0,
    ARecEnsemble = 1,
    AIntra = 2,
    AInter = 3,
    RIntra = 4,
    RDual = 5,
}

impl From<DdadScoreKind> for ScoreKind {
    fn from(k: DdadScoreKind) -> Self {
        match k {
            DdadScoreKind::ARec => ScoreKind::ARec,
            DdadScoreKind::ARecEnsemble => ScoreKind::ARecEnsemble,
            DdadScoreKind::AIntra => ScoreKind::AIntra,
            DdadScoreKind::AInter => ScoreKind::AInter,
            DdadScoreKind::RIntra => ScoreKind::RIntra,
            DdadScoreKind::RDual => ScoreKind::RDual,
        }
    }
}

/// Opaque set of trained models loaded from a run directory.
pub struct DdadModels {
    models: Models,
}

/// Opaque stage-1 ensemble.
pub struct DdadEnsemble {
    ckpt: EnsembleCheckpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> DdadStatus {
    match err {
        Error::Io { .. } | Error::Image { .. } | Error::Serde(_) => DdadStatus::Io,
        Error::Parse { .. } => DdadStatus::Parse,
        Error::Validation(_) | Error::Capacity { .. } => DdadStatus::Validation,
        Error::Contract(_) => DdadStatus::Contract,
        Error::Divergence { .. } => DdadStatus::Divergence,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DdadStatus, String)>) -> DdadStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DdadStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DdadStatus::Panic
        }
    }
}

fn lib(err: Error) -> (DdadStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (DdadStatus, String) {
    (DdadStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (DdadStatus, String) {
    (DdadStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (DdadStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (DdadStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ddad_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the next call into the
/// library from the same thread.
#[no_mangle]
pub extern "C" fn ddad_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Load every model found under a run directory (the NDM is required).
#[no_mangle]
pub unsafe extern "C" fn ddad_models_load(run_dir: *const c_char, out: *mut *mut DdadModels) -> DdadStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = path_arg(run_dir)?;
        let models = Models::load(dir).map_err(lib)?;
        *out = Box::into_raw(Box::new(DdadModels { models }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ddad_models_free(models: *mut DdadModels) {
    if !models.is_null() {
        drop(Box::from_raw(models));
    }
}

/// Image side the models expect, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ddad_models_side(models: *const DdadModels) -> usize {
    models.as_ref().map_or(0, |m| m.models.ndm.side())
}

/// Whether the loaded models can produce `kind` (1) or not (0).
#[no_mangle]
pub unsafe extern "C" fn ddad_models_supports(models: *const DdadModels, kind: DdadScoreKind) -> i32 {
    let Some(m) = models.as_ref() else { return 0 };
    let ok = match ScoreKind::from(kind) {
        ScoreKind::AInter => m.models.udm.is_some(),
        ScoreKind::RDual => m.models.r_dual.is_some(),
        ScoreKind::RIntra => m.models.r_intra.is_some(),
        _ => true,
    };
    i32::from(ok)
}

unsafe fn score_map_impl(
    models: *const DdadModels,
    kind: DdadScoreKind,
    pixels: *const f32,
    n_pixels: usize,
) -> Result<ddad::scoring::ScoreMap, (DdadStatus, String)> {
    let m = models.as_ref().ok_or_else(|| null("models"))?;
    let px = slice_arg(pixels, n_pixels, "pixels")?;
    let side = m.models.ndm.side();
    if n_pixels != side * side {
        return Err(invalid(format!("expected {} pixels, got {n_pixels}", side * side)));
    }
    let img = ImageTensor::new(side, px.to_vec()).map_err(lib)?;
    let mut maps = score_maps(&m.models, &[img], &[kind.into()], SigmaAgg::VarMean).map_err(lib)?;
    Ok(maps.remove(0).remove(0))
}

/// Image-level score of a row-major `side × side` grayscale image with values in [0, 1].
#[no_mangle]
pub unsafe extern "C" fn ddad_score_image(
    models: *const DdadModels,
    kind: DdadScoreKind,
    pixels: *const f32,
    n_pixels: usize,
    out_score: *mut f64,
) -> DdadStatus {
    guard(|| {
        if out_score.is_null() {
            return Err(null("out_score"));
        }
        let map = score_map_impl(models, kind, pixels, n_pixels)?;
        *out_score = image_score(&map).map_err(lib)?;
        Ok(())
    })
}

/// Per-pixel score map written into `out_map` (capacity `n_pixels`).
#[no_mangle]
pub unsafe extern "C" fn ddad_score_map(
    models: *const DdadModels,
    kind: DdadScoreKind,
    pixels: *const f32,
    n_pixels: usize,
    out_map: *mut f32,
) -> DdadStatus {
    guard(|| {
        if out_map.is_null() {
            return Err(null("out_map"));
        }
        let map = score_map_impl(models, kind, pixels, n_pixels)?;
        std::slice::from_raw_parts_mut(out_map, n_pixels).copy_from_slice(&map.values);
        Ok(())
    })
}

/// Load a single stage-1 ensemble directory.
#[no_mangle]
pub unsafe extern "C" fn ddad_ensemble_load(dir: *const c_char, out: *mut *mut DdadEnsemble) -> DdadStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ckpt = EnsembleCheckpoint::load(path_arg(dir)?).map_err(lib)?;
        *out = Box::into_raw(Box::new(DdadEnsemble { ckpt }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ddad_ensemble_free(ensemble: *mut DdadEnsemble) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// Number of members, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ddad_ensemble_size(ensemble: *const DdadEnsemble) -> usize {
    ensemble.as_ref().map_or(0, |e| e.ckpt.members.len())
}

/// Reconstruct one image with every member; `out_recons` receives `K × n_pixels` values,
/// member-major.
#[no_mangle]
pub unsafe extern "C" fn ddad_ensemble_reconstruct(
    ensemble: *const DdadEnsemble,
    pixels: *const f32,
    n_pixels: usize,
    out_recons: *mut f32,
) -> DdadStatus {
    guard(|| {
        let e = ensemble.as_ref().ok_or_else(|| null("ensemble"))?;
        if out_recons.is_null() {
            return Err(null("out_recons"));
        }
        let px = slice_arg(pixels, n_pixels, "pixels")?;
        let side = e.ckpt.side();
        if n_pixels != side * side {
            return Err(invalid(format!("expected {} pixels, got {n_pixels}", side * side)));
        }
        let img = ImageTensor::new(side, px.to_vec()).map_err(lib)?;
        let fwd = ddad::scoring::ensemble_forward(&e.ckpt, &img, SigmaAgg::VarMean).map_err(lib)?;
        let out = std::slice::from_raw_parts_mut(out_recons, fwd.recons.len() * n_pixels);
        for (chunk, r) in out.chunks_exact_mut(n_pixels).zip(&fwd.recons) {
            chunk.copy_from_slice(r);
        }
        Ok(())
    })
}

fn scored_set(scores: &[f64], labels: &[u8]) -> ddad::eval::ScoredSet {
    ddad::eval::ScoredSet::from_parts((0..scores.len()).map(|i| format!("{i:020}")), scores, labels)
}

/// ROC AUC of `n` scores with binary labels (1 = abnormal).
#[no_mangle]
pub unsafe extern "C" fn ddad_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> DdadStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = slice_arg(scores, n, "scores")?;
        let l = slice_arg(labels, n, "labels")?;
        *out = ddad::eval::auc(&scored_set(s, l)).map_err(lib)?;
        Ok(())
    })
}

/// Average precision; equal scores are ranked by input position.
#[no_mangle]
pub unsafe extern "C" fn ddad_ap(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> DdadStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = slice_arg(scores, n, "scores")?;
        let l = slice_arg(labels, n, "labels")?;
        *out = ddad::eval::ap(&scored_set(s, l)).map_err(lib)?;
        Ok(())
    })
}

/// Mean focal loss of `n` probabilities against binary targets.
#[no_mangle]
pub unsafe extern "C" fn ddad_focal_loss(
    pred: *const f32,
    target: *const u8,
    n: usize,
    gamma: f64,
    out: *mut f64,
) -> DdadStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(gamma >= 0.0) {
            return Err(invalid("gamma must be non-negative"));
        }
        let p = slice_arg(pred, n, "pred")?;
        let t = slice_arg(target, n, "target")?;
        *out = ddad::asr::focal_loss(p, t, gamma).map_err(lib)?;
        Ok(())
    })
}
