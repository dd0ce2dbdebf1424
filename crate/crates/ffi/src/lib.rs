//! C interface to `tsr-core`.
//!
//! Objects are opaque handles created by `tsr_*_read`/`_load`/`_from_*`
//! functions and released with the matching `_free`. Every fallible call
//! returns a [`TsrStatus`]; on failure, `tsr_last_error_message` yields a
//! description for the calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use tsr_core::model::{Classifier, MiniNet, ModelError, PatchRef};
use tsr_core::pipeline::{self, PipelineError, RunConfig};
use tsr_core::raster::{self, RasterError, Rect, RgbImage};
use tsr_core::scoring;
use tsr_core::stain::{self, ReferenceProfile};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Decode = 4,
    /// Degenerate input, e.g. a single-level histogram.
    Degenerate = 5,
    /// No tumor or stroma found.
    Unscorable = 6,
    /// Stain estimation failed.
    Stain = 7,
    Model = 8,
    Panic = 9,
}

/// Decoded RGB image.
pub struct TsrImage(RgbImage);

/// MiniNet classifier.
pub struct TsrNet(MiniNet);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: TsrStatus, msg: impl Into<String>) -> TsrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> TsrStatus) -> TsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TsrStatus::Panic, "internal panic"),
    }
}

fn raster_status(e: &RasterError) -> TsrStatus {
    match e {
        RasterError::Io(_) => TsrStatus::Io,
        RasterError::DegenerateHistogram => TsrStatus::Degenerate,
        RasterError::InvalidDimensions { .. } | RasterError::RectOutOfBounds { .. } => TsrStatus::InvalidArgument,
        _ => TsrStatus::Decode,
    }
}

fn pipeline_status(e: &PipelineError) -> TsrStatus {
    match e {
        PipelineError::Unscorable(_) => TsrStatus::Unscorable,
        PipelineError::Raster(r) => raster_status(r),
        PipelineError::Stain(_) => TsrStatus::Stain,
        PipelineError::Model(_) => TsrStatus::Model,
        PipelineError::Io(_) => TsrStatus::Io,
        _ => TsrStatus::InvalidArgument,
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, TsrStatus> {
    if path.is_null() {
        return Err(fail(TsrStatus::NullArgument, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(TsrStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tsr_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Reads a binary PPM (and its optional `.meta.json` sidecar).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsr_image_read(path: *const c_char, out: *mut *mut TsrImage) -> TsrStatus {
    guard(|| {
        if out.is_null() {
            return fail(TsrStatus::NullArgument, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match raster::read_image(&path) {
            Ok(img) => {
                *out = Box::into_raw(Box::new(TsrImage(img)));
                TsrStatus::Ok
            }
            Err(e) => fail(raster_status(&e), e.to_string()),
        }
    })
}

/// Copies `width * height * 3` interleaved RGB bytes into a new image.
///
/// # Safety
/// `data` must point to `width * height * 3` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn tsr_image_from_rgb(
    data: *const u8,
    width: usize,
    height: usize,
    out: *mut *mut TsrImage,
) -> TsrStatus {
    guard(|| {
        if data.is_null() || out.is_null() {
            return fail(TsrStatus::NullArgument, "data or out is null");
        }
        let Some(n) = width.checked_mul(height).and_then(|p| p.checked_mul(3)) else {
            return fail(TsrStatus::InvalidArgument, "image too large");
        };
        let bytes = std::slice::from_raw_parts(data, n).to_vec();
        match RgbImage::new(width, height, bytes) {
            Ok(img) => {
                *out = Box::into_raw(Box::new(TsrImage(img)));
                TsrStatus::Ok
            }
            Err(e) => fail(raster_status(&e), e.to_string()),
        }
    })
}

/// Releases an image; null is ignored.
///
/// # Safety
/// `img` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tsr_image_free(img: *mut TsrImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tsr_image_dims(img: *const TsrImage, width: *mut usize, height: *mut usize) -> TsrStatus {
    if img.is_null() || width.is_null() || height.is_null() {
        return fail(TsrStatus::NullArgument, "null argument");
    }
    *width = (*img).0.width();
    *height = (*img).0.height();
    TsrStatus::Ok
}

/// Copies the pixels into `buf` (`width * height * 3` bytes).
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tsr_image_pixels(img: *const TsrImage, buf: *mut u8, len: usize) -> TsrStatus {
    if img.is_null() || buf.is_null() {
        return fail(TsrStatus::NullArgument, "null argument");
    }
    let data = (*img).0.data();
    if len < data.len() {
        return fail(TsrStatus::InvalidArgument, format!("buffer holds {len} bytes, need {}", data.len()));
    }
    std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    TsrStatus::Ok
}

/// Otsu threshold of the image's luminance histogram.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tsr_image_otsu(img: *const TsrImage, out: *mut u8) -> TsrStatus {
    guard(|| {
        if img.is_null() || out.is_null() {
            return fail(TsrStatus::NullArgument, "null argument");
        }
        let hist = raster::Histogram256::of(&raster::to_grayscale(&(*img).0));
        match raster::otsu_threshold(&hist) {
            Ok(t) => {
                *out = t;
                TsrStatus::Ok
            }
            Err(e) => fail(raster_status(&e), e.to_string()),
        }
    })
}

/// Stain-normalizes `img` to the built-in reference profile.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tsr_image_normalize(img: *const TsrImage, out: *mut *mut TsrImage) -> TsrStatus {
    guard(|| {
        if img.is_null() || out.is_null() {
            return fail(TsrStatus::NullArgument, "null argument");
        }
        match stain::normalize(&(*img).0, &ReferenceProfile::default()) {
            Ok(n) => {
                *out = Box::into_raw(Box::new(TsrImage(n)));
                TsrStatus::Ok
            }
            Err(e) => fail(TsrStatus::Stain, e.to_string()),
        }
    })
}

/// `n_stroma / (n_stroma + n_tumor)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsr_ratio(n_stroma: u64, n_tumor: u64, out: *mut f64) -> TsrStatus {
    if out.is_null() {
        return fail(TsrStatus::NullArgument, "out is null");
    }
    match scoring::tsr(n_stroma, n_tumor) {
        Ok(t) => {
            *out = t;
            TsrStatus::Ok
        }
        Err(e) => fail(TsrStatus::Unscorable, e.to_string()),
    }
}

/// Loads a MiniNet checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsr_net_load(path: *const c_char, out: *mut *mut TsrNet) -> TsrStatus {
    guard(|| {
        if out.is_null() {
            return fail(TsrStatus::NullArgument, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match MiniNet::load(&path) {
            Ok(n) => {
                *out = Box::into_raw(Box::new(TsrNet(n)));
                TsrStatus::Ok
            }
            Err(ModelError::Io(e)) => fail(TsrStatus::Io, e.to_string()),
            Err(e) => fail(TsrStatus::Model, e.to_string()),
        }
    })
}

/// Releases a network; null is ignored.
///
/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tsr_net_free(net: *mut TsrNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Class probabilities (tumor, stroma, other) of a 224x224 patch, and the
/// predicted class code (1 tumor, 2 stroma, 3 other).
///
/// # Safety
/// `probs` must point to 3 writable doubles; `label` may be null.
#[no_mangle]
pub unsafe extern "C" fn tsr_net_classify(
    net: *const TsrNet,
    patch: *const TsrImage,
    probs: *mut f64,
    label: *mut u8,
) -> TsrStatus {
    guard(|| {
        if net.is_null() || patch.is_null() || probs.is_null() {
            return fail(TsrStatus::NullArgument, "null argument");
        }
        let img = &(*patch).0;
        let r = PatchRef {
            patch_id: "",
            slide_id: "",
            rect: Rect::new(0, 0, img.width(), img.height()),
            pixels: img,
        };
        match (*net).0.classify(&r) {
            Ok(p) => {
                std::ptr::copy_nonoverlapping(p.p.as_ptr(), probs, 3);
                if !label.is_null() {
                    *label = p.argmax().code();
                }
                TsrStatus::Ok
            }
            Err(ModelError::WrongPatchSize { .. }) => fail(TsrStatus::InvalidArgument, "patch must be 224x224"),
            Err(e) => fail(TsrStatus::Model, e.to_string()),
        }
    })
}

/// Scores a whole slide with default settings: tissue mask, 224-pixel grid,
/// per-patch normalization, classification. Writes patch counts
/// (tumor, stroma, other) and the TSR.
///
/// # Safety
/// `counts` must point to 3 writable u64s; `tsr` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsr_score_image(
    img: *const TsrImage,
    net: *const TsrNet,
    counts: *mut u64,
    tsr: *mut f64,
) -> TsrStatus {
    guard(|| {
        if img.is_null() || net.is_null() || counts.is_null() || tsr.is_null() {
            return fail(TsrStatus::NullArgument, "null argument");
        }
        match pipeline::score_slide_image("slide", &(*img).0, &(*net).0, &RunConfig::default()) {
            Ok(s) => {
                let c = [s.n_tumor, s.n_stroma, s.n_other];
                std::ptr::copy_nonoverlapping(c.as_ptr(), counts, 3);
                *tsr = s.tsr().expect("scorable");
                TsrStatus::Ok
            }
            Err(e) => fail(pipeline_status(&e), e.to_string()),
        }
    })
}
