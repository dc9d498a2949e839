//! C interface to the region matcher.
//!
//! Models and results are opaque handles owned by the caller and released
//! with `rm_model_free` / `rm_result_free`. Every fallible call returns an
//! [`RmStatus`]; on failure, `rm_last_error_message` describes the error for
//! the calling thread. Images are tightly packed row-major RGB8, masks are
//! row-major bytes where any non-zero value is foreground.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use image::RgbImage;
use roimatcher::geometry::RasterMask;
use roimatcher::inference::{match_images, InferenceError, Prediction};
use roimatcher::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelError, RoiMatcher};
use roimatcher::postprocess::DecodeConfig;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Malformed argument: bad sizes, empty mask, non-UTF-8 path.
    InvalidArgument = 2,
    /// File could not be read, written or parsed.
    Io = 3,
    /// Invalid configuration or checkpoint version mismatch.
    Config = 4,
    /// The network produced non-finite values.
    Numeric = 5,
    /// Index outside the valid range.
    OutOfRange = 6,
    /// Unexpected internal failure.
    Internal = 7,
}

/// One matched instance in target-image pixel coordinates. The box is
/// inclusive: `x0 <= x <= x1`, `y0 <= y <= y1`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RmInstance {
    pub id: u32,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub area: u64,
    pub score: f64,
}

/// Opaque model handle.
pub struct RmModel {
    model: RoiMatcher,
    decode: DecodeConfig,
}

/// Opaque result handle.
pub struct RmResult {
    prediction: Prediction,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

struct Failure(RmStatus, String);

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Io(_) | ModelError::Checkpoint(_) => RmStatus::Io,
            ModelError::VersionMismatch { .. } | ModelError::Config(_) => RmStatus::Config,
            ModelError::Shape(_) => RmStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<InferenceError> for Failure {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Model(m) => m.into(),
            InferenceError::NonFinite => Failure(RmStatus::Numeric, e.to_string()),
            InferenceError::Decode(_) => Failure(RmStatus::Config, e.to_string()),
            _ => Failure(RmStatus::InvalidArgument, e.to_string()),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(RmStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status and last-error text.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RmStatus::Internal
        }
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return Err(Failure(RmStatus::NullArgument, concat!(stringify!($p), " is null").into()));
        })+
    };
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn rgb_arg(data: *const u8, height: u32, width: u32) -> Result<RgbImage, Failure> {
    if height == 0 || width == 0 {
        return Err(invalid("image dimensions must be positive"));
    }
    let len = height as usize * width as usize * 3;
    let bytes = std::slice::from_raw_parts(data, len).to_vec();
    RgbImage::from_raw(width, height, bytes).ok_or_else(|| invalid("image buffer size mismatch"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the last failure on this thread; empty after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn rm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a freshly initialised model with default settings except for the
/// input size, base channel width and seed.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn rm_model_new(
    input_height: u32,
    input_width: u32,
    base_channels: u32,
    seed: u64,
    out: *mut *mut RmModel,
) -> RmStatus {
    guard(|| {
        non_null!(out);
        let config = ModelConfig {
            input_size: (input_height as usize, input_width as usize),
            base_channels: base_channels as usize,
            ..ModelConfig::default()
        };
        let model = RoiMatcher::new(config, seed)?;
        *out = Box::into_raw(Box::new(RmModel { model, decode: DecodeConfig::default() }));
        Ok(())
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn rm_model_load(path: *const c_char, out: *mut *mut RmModel) -> RmStatus {
    guard(|| {
        non_null!(path, out);
        let model = load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(RmModel { model, decode: DecodeConfig::default() }));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rm_model_save(model: *const RmModel, path: *const c_char) -> RmStatus {
    guard(|| {
        non_null!(model, path);
        let model = &*model;
        save_checkpoint(&model.model, path_arg(path)?)?;
        Ok(())
    })
}

/// Network input size of the model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rm_model_input_size(model: *const RmModel, height: *mut u32, width: *mut u32) -> RmStatus {
    guard(|| {
        non_null!(model, height, width);
        let model = &*model;
        let (h, w) = model.model.config().input_size;
        *height = h as u32;
        *width = w as u32;
        Ok(())
    })
}

/// Sets the decoding thresholds used by `rm_match`.
///
/// # Safety
/// `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn rm_model_set_thresholds(
    model: *mut RmModel,
    region_threshold: f64,
    kernel_threshold: f64,
    min_area: u32,
) -> RmStatus {
    guard(|| {
        non_null!(model);
        let model = &mut *model;
        let decode = DecodeConfig {
            region_threshold,
            kernel_threshold,
            min_area_px: min_area as usize,
            ..model.decode.clone()
        };
        decode.validate().map_err(|e| Failure(RmStatus::Config, e.to_string()))?;
        model.decode = decode;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rm_model_free(model: *mut RmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Finds every region in the target image that matches the masked region of
/// the reference image. The reference mask has the reference image's size.
///
/// # Safety
/// Image buffers must hold `height * width * 3` bytes, the mask
/// `ref_height * ref_width` bytes; `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn rm_match(
    model: *const RmModel,
    ref_rgb: *const u8,
    ref_height: u32,
    ref_width: u32,
    ref_mask: *const u8,
    tgt_rgb: *const u8,
    tgt_height: u32,
    tgt_width: u32,
    out: *mut *mut RmResult,
) -> RmStatus {
    guard(|| {
        non_null!(model, ref_rgb, ref_mask, tgt_rgb, out);
        let reference = rgb_arg(ref_rgb, ref_height, ref_width)?;
        let target = rgb_arg(tgt_rgb, tgt_height, tgt_width)?;
        let n = ref_height as usize * ref_width as usize;
        let bits: Vec<bool> = std::slice::from_raw_parts(ref_mask, n).iter().map(|&b| b != 0).collect();
        if !bits.iter().any(|&b| b) {
            return Err(invalid("reference mask is empty"));
        }
        let mask = RasterMask::from_bools(ref_height as usize, ref_width as usize, &bits)
            .map_err(|e| invalid(e.to_string()))?;
        let m = &*model;
        let prediction = match_images(&m.model, &m.decode, &reference, &mask, &target)?;
        *out = Box::into_raw(Box::new(RmResult { prediction }));
        Ok(())
    })
}

/// Number of matched instances; 0 for a null handle.
///
/// # Safety
/// `result` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn rm_result_count(result: *const RmResult) -> usize {
    if result.is_null() {
        return 0;
    }
    let result = &*result;
    result.prediction.instances.len()
}

/// Copies instance `index` into `out`.
///
/// # Safety
/// `result` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_result_instance(result: *const RmResult, index: usize, out: *mut RmInstance) -> RmStatus {
    guard(|| {
        non_null!(result, out);
        let result = &*result;
        let inst = result
            .prediction
            .instances
            .get(index)
            .ok_or_else(|| Failure(RmStatus::OutOfRange, format!("instance {index} out of range")))?;
        let [x0, y0, x1, y1] = inst.bbox;
        *out = RmInstance {
            id: inst.id,
            x0: x0 as u32,
            y0: y0 as u32,
            x1: x1 as u32,
            y1: y1 as u32,
            area: inst.area as u64,
            score: inst.score,
        };
        Ok(())
    })
}

/// Copies the merged match mask at target resolution into `buffer` as 0/255
/// bytes. `len` must be at least `tgt_height * tgt_width`.
///
/// # Safety
/// `buffer` must hold `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rm_result_mask(result: *const RmResult, buffer: *mut u8, len: usize) -> RmStatus {
    guard(|| {
        non_null!(result, buffer);
        let result = &*result;
        let mask = &result.prediction.mask;
        let (h, w) = mask.dims();
        if len < h * w {
            return Err(Failure(RmStatus::OutOfRange, format!("buffer holds {len} bytes, need {}", h * w)));
        }
        let dst = std::slice::from_raw_parts_mut(buffer, h * w);
        for (d, &v) in dst.iter_mut().zip(mask.data()) {
            *d = if v != 0 { 255 } else { 0 };
        }
        Ok(())
    })
}

/// Releases a result. Null is ignored.
///
/// # Safety
/// `result` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rm_result_free(result: *mut RmResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}
