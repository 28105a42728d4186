//! C interface to trained multi-grid models.
//!
//! Models are opaque handles created by [`mgcd_model_load`] and released
//! with [`mgcd_model_free`]. Every fallible call returns an [`MgcdStatus`];
//! on failure [`mgcd_last_error`] describes the problem. Image buffers are
//! dense `f32` arrays in `N x C x H x W` order with pixels in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mgcd::eval::scores;
use mgcd::inpaint::inpaint;
use mgcd::io::checkpoint::{load_checkpoint, save_checkpoint};
use mgcd::tensor::Shape;
use mgcd::{Error, Tensor, TrainState};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MgcdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Format = 4,
    Io = 5,
    Untrained = 6,
    Runtime = 7,
    Panic = 8,
}

/// Opaque trained model.
pub struct MgcdModel {
    state: TrainState,
}

/// Static facts about a model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MgcdModelInfo {
    /// Number of networks (one per grid, or one for single-model methods).
    pub models: usize,
    pub grids: usize,
    pub scale_factor: usize,
    pub channels: usize,
    /// Side of the full-resolution images.
    pub image_side: usize,
    /// Completed training iterations.
    pub iteration: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> MgcdStatus {
    match e {
        Error::Config(_) | Error::Spec(_) => MgcdStatus::Config,
        Error::Format(_) => MgcdStatus::Format,
        Error::Io(_) | Error::Image { .. } => MgcdStatus::Io,
        Error::Untrained => MgcdStatus::Untrained,
        Error::Dimension(_) | Error::Empty(_) | Error::IndexOutOfRange { .. } => MgcdStatus::InvalidArgument,
        _ => MgcdStatus::Runtime,
    }
}

/// Runs `f`, converting errors and panics into a status and message.
fn guard(f: impl FnOnce() -> Result<(), (MgcdStatus, String)>) -> MgcdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MgcdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MgcdStatus::Panic
        }
    }
}

fn lib<T>(r: mgcd::Result<T>) -> Result<T, (MgcdStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MgcdStatus, String) {
    (MgcdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(model: *const MgcdModel) -> Result<&'a MgcdModel, (MgcdStatus, String)> {
    model.as_ref().ok_or_else(|| null("model"))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, (MgcdStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| (MgcdStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
    Ok(Path::new(s))
}

/// Copies `n` images of the model's shape from `data`.
unsafe fn images_arg(state: &TrainState, data: *const f32, n: usize) -> Result<Tensor<f32>, (MgcdStatus, String)> {
    if data.is_null() {
        return Err(null("image buffer"));
    }
    if n == 0 {
        return Err((MgcdStatus::InvalidArgument, "n must be positive".into()));
    }
    let shape = state.config.image_shape().batch(n);
    let values = std::slice::from_raw_parts(data, shape.len()).to_vec();
    lib(Tensor::new(shape, values))
}

fn check_out(out: *mut f32) -> Result<(), (MgcdStatus, String)> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    Ok(())
}

unsafe fn write_out(t: &Tensor<f32>, out: *mut f32) -> Result<(), (MgcdStatus, String)> {
    check_out(out)?;
    ptr::copy_nonoverlapping(t.data().as_ptr(), out, t.len());
    Ok(())
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mgcd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mgcd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` owns a new model.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mgcd_model_load(path: *const c_char, out: *mut *mut MgcdModel) -> MgcdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let state = lib(load_checkpoint(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(MgcdModel { state }));
        Ok(())
    })
}

/// Writes the model as a checkpoint.
///
/// # Safety
/// `model` must come from [`mgcd_model_load`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mgcd_model_save(model: *const MgcdModel, path: *const c_char) -> MgcdStatus {
    guard(|| lib(save_checkpoint(&model_ref(model)?.state, path_arg(path)?)))
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`mgcd_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mgcd_model_free(model: *mut MgcdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mgcd_model_info(model: *const MgcdModel, info: *mut MgcdModelInfo) -> MgcdStatus {
    guard(|| {
        let s = &model_ref(model)?.state;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        *info = MgcdModelInfo {
            models: s.models.len(),
            grids: s.config.grids,
            scale_factor: s.config.scale_factor,
            channels: s.config.channels,
            image_side: s.config.image_side(),
            iteration: s.iteration,
        };
        Ok(())
    })
}

/// Scores `n` full-resolution images under every network. `out` receives
/// `models * n` values, network-major, coarsest grid first.
///
/// # Safety
/// `images` must hold `n * channels * side * side` floats and `out`
/// room for `models * n`.
#[no_mangle]
pub unsafe extern "C" fn mgcd_model_score(model: *const MgcdModel, images: *const f32, n: usize, out: *mut f32) -> MgcdStatus {
    guard(|| {
        let s = &model_ref(model)?.state;
        check_out(out)?;
        let y = images_arg(s, images, n)?;
        let all: Vec<f32> = lib(scores(s, &y))?.into_iter().flatten().collect();
        write_out(&lib(Tensor::new(Shape::new(all.len(), 1, 1, 1), all))?, out)
    })
}

/// Generates `n` images from scratch; `out` receives the finest grid,
/// `n * channels * side * side` floats.
///
/// # Safety
/// `model` must be a live handle and `out` large enough.
#[no_mangle]
pub unsafe extern "C" fn mgcd_model_sample(model: *const MgcdModel, n: usize, seed: u64, out: *mut f32) -> MgcdStatus {
    guard(|| {
        let s = &model_ref(model)?.state;
        check_out(out)?;
        if n == 0 {
            return Err((MgcdStatus::InvalidArgument, "n must be positive".into()));
        }
        let levels = lib(s.sample(n, seed))?;
        write_out(levels.last().expect("at least one level"), out)
    })
}

/// Fills the masked pixels of `n` images. `masks` holds one
/// `side * side` plane per image, 1 marking a missing pixel; unmasked
/// pixels are copied unchanged.
///
/// # Safety
/// `images` and `out` must hold `n * channels * side * side` floats,
/// `masks` `n * side * side`.
#[no_mangle]
pub unsafe extern "C" fn mgcd_model_inpaint(
    model: *const MgcdModel,
    images: *const f32,
    masks: *const f32,
    n: usize,
    seed: u64,
    out: *mut f32,
) -> MgcdStatus {
    guard(|| {
        let s = &model_ref(model)?.state;
        check_out(out)?;
        let y = images_arg(s, images, n)?;
        if masks.is_null() {
            return Err(null("mask buffer"));
        }
        let side = s.config.image_side();
        let mshape = Shape::new(n, 1, side, side);
        let m = lib(Tensor::new(mshape, std::slice::from_raw_parts(masks, mshape.len()).to_vec()))?;
        write_out(&lib(inpaint(s, &y, &m, seed))?, out)
    })
}
