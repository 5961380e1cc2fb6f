//! C ABI over a pretrained checkpoint.
//!
//! A model handle wraps the teacher backbone and the channel statistics of
//! a checkpoint. Images are passed as interleaved 8-bit pixels (gray or
//! RGB, row-major) and go through the same resize and standardization as
//! training images. Every fallible call returns an `LsvtStatus`; on failure
//! `lsvt_last_error` describes the problem. Errors are per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use lsvt_core::augment::{standardize_image, ChannelStats};
use lsvt_core::data::RawImage;
use lsvt_core::distill::checkpoint::Checkpoint;
use lsvt_core::image::Image;
use lsvt_core::probe::{extract_features, roc_auc_binary};
use lsvt_core::vit::{extract_attention_map, ViTModel};
use lsvt_core::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LsvtStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Sizes or values out of range, or an output buffer of the wrong length.
    InvalidArgument = 2,
    Io = 3,
    /// Malformed checkpoint or image data.
    Format = 4,
    /// A computation produced NaN or infinity.
    NonFinite = 5,
    /// Internal failure; the library caught a panic.
    Internal = 6,
}

/// Opaque model handle.
pub struct LsvtModel {
    teacher: ViTModel<f32>,
    stats: ChannelStats,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> LsvtStatus {
    match e {
        Error::Io { .. } => LsvtStatus::Io,
        Error::Format(_) | Error::UnsupportedFormat { .. } | Error::Json(_) => LsvtStatus::Format,
        Error::NonFinite(_) => LsvtStatus::NonFinite,
        _ => LsvtStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (LsvtStatus, String)>) -> LsvtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LsvtStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LsvtStatus::Internal
        }
    }
}

fn lift(e: Error) -> (LsvtStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (LsvtStatus, String) {
    (LsvtStatus::NullArgument, format!("{what} is null"))
}

fn invalid(msg: String) -> (LsvtStatus, String) {
    (LsvtStatus::InvalidArgument, msg)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lsvt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn lsvt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads the teacher of the checkpoint at `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lsvt_model_load(path: *const c_char, out: *mut *mut LsvtModel) -> LsvtStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8".into()))?;
        let ckpt = Checkpoint::read(Path::new(path)).map_err(lift)?;
        let model = LsvtModel {
            teacher: ckpt.model("teacher.").map_err(lift)?,
            stats: ckpt.stats().map_err(lift)?,
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `lsvt_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lsvt_model_free(model: *mut LsvtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input side length, channel count and embedding width of the model.
///
/// # Safety
/// All pointers must be valid; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lsvt_model_info(
    model: *const LsvtModel,
    image_size: *mut u32,
    channels: *mut u32,
    embed_dim: *mut u32,
) -> LsvtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if image_size.is_null() || channels.is_null() || embed_dim.is_null() {
            return Err(null("output"));
        }
        let c = m.teacher.config();
        *image_size = c.image_size as u32;
        *channels = c.channels as u32;
        *embed_dim = c.d_model as u32;
        Ok(())
    })
}

unsafe fn prepare(
    m: &LsvtModel,
    pixels: *const u8,
    height: u32,
    width: u32,
    channels: u32,
) -> Result<Image, (LsvtStatus, String)> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
        return Err(invalid(format!("bad image geometry {height}x{width}x{channels}")));
    }
    let n = height as usize * width as usize * channels as usize;
    let raw = RawImage {
        height: height as usize,
        width: width as usize,
        channels: channels as usize,
        pixels: std::slice::from_raw_parts(pixels, n).to_vec(),
    };
    standardize_image(&raw, m.teacher.config().image_size, &m.stats).map_err(lift)
}

unsafe fn output<'a, T>(out: *mut T, out_len: usize, want: usize) -> Result<&'a mut [T], (LsvtStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    if out_len != want {
        return Err(invalid(format!("output buffer holds {out_len} values, need {want}")));
    }
    Ok(std::slice::from_raw_parts_mut(out, want))
}

/// Class-token embedding of one image, `embed_dim` floats.
///
/// # Safety
/// `pixels` must hold `height * width * channels` bytes and `out` `out_len`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn lsvt_model_embed(
    model: *const LsvtModel,
    pixels: *const u8,
    height: u32,
    width: u32,
    channels: u32,
    out: *mut f32,
    out_len: usize,
) -> LsvtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let img = prepare(m, pixels, height, width, channels)?;
        let dst = output(out, out_len, m.teacher.config().d_model)?;
        let f = extract_features(&m.teacher, std::slice::from_ref(&img)).map_err(lift)?;
        dst.copy_from_slice(f.data());
        Ok(())
    })
}

/// Final-layer attention heatmap, `image_size * image_size` values in
/// `[0, 1]`, row-major.
///
/// # Safety
/// As for `lsvt_model_embed`, with `out` holding `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lsvt_model_attention_map(
    model: *const LsvtModel,
    pixels: *const u8,
    height: u32,
    width: u32,
    channels: u32,
    out: *mut f64,
    out_len: usize,
) -> LsvtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let img = prepare(m, pixels, height, width, channels)?;
        let size = m.teacher.config().image_size;
        let dst = output(out, out_len, size * size)?;
        let map = extract_attention_map(&m.teacher, &img).map_err(lift)?;
        dst.copy_from_slice(&map.values);
        Ok(())
    })
}

/// Rank-based ROC AUC of `scores` against 0/1 `labels` (nonzero means
/// positive). Both classes must be present.
///
/// # Safety
/// `scores` and `labels` must hold `n` values each.
#[no_mangle]
pub unsafe extern "C" fn lsvt_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> LsvtStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let l: Vec<bool> = std::slice::from_raw_parts(labels, n).iter().map(|&v| v != 0).collect();
        *out = roc_auc_binary(s, &l).map_err(lift)?;
        Ok(())
    })
}
