//! C interface: an opaque detector handle plus a few geometry and metric
//! helpers. Every function returns an [`SsaStatus`]; on failure the message
//! is kept per thread and can be read with [`ssa_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ssacnn::eval::log_average;
use ssacnn::geometry::{iou, nms_indices, BBox};
use ssacnn::pipeline::Detector;
use ssacnn::tensor::Tensor;
use ssacnn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsaBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsaDetection {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

/// Opaque detector handle.
pub struct SsaDetector {
    inner: Detector,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: SsaStatus, msg: impl Into<String>) -> SsaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn status_of(e: &Error) -> SsaStatus {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Parse { .. } => SsaStatus::Io,
        Error::Checkpoint(_) => SsaStatus::Checkpoint,
        Error::Config(_) | Error::RejectedProposal(_) => SsaStatus::Config,
        Error::NonFinite { .. } | Error::Diverged { .. } => SsaStatus::Numeric,
        _ => SsaStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), SsaStatus>) -> SsaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsaStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(SsaStatus::Internal, "panic inside the library"),
    }
}

fn lift<T>(r: ssacnn::Result<T>) -> Result<T, SsaStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn to_bbox(b: &SsaBox) -> Result<BBox, SsaStatus> {
    BBox::new(b.x, b.y, b.w, b.h).map_err(|e| fail(SsaStatus::InvalidArgument, e.to_string()))
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return Err(fail(SsaStatus::NullPointer, concat!(stringify!($p), " is null")));
        })+
    };
}

/// Loads a checkpoint directory holding `rpn.ckpt` and `rcnn.ckpt`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ssa_detector_load(path: *const c_char, out: *mut *mut SsaDetector) -> SsaStatus {
    guard(|| {
        non_null!(path, out);
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(SsaStatus::InvalidArgument, "path is not UTF-8"))?;
        let inner = lift(Detector::load(Path::new(path)))?;
        *out = Box::into_raw(Box::new(SsaDetector { inner }));
        Ok(())
    })
}

/// # Safety
/// `detector` must come from [`ssa_detector_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ssa_detector_free(detector: *mut SsaDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Runs both stages on one planar RGB image (`3 × height × width` floats in
/// [0, 1], channel-major). Writes up to `capacity` detections in descending
/// score order and stores the total count in `out_len`; returns
/// `BUFFER_TOO_SMALL` when that count exceeds `capacity`.
///
/// # Safety
/// `pixels` must hold `3 * width * height` floats; `out` must hold
/// `capacity` entries (it may be null when `capacity` is 0).
#[no_mangle]
pub unsafe extern "C" fn ssa_detector_detect(
    detector: *const SsaDetector,
    pixels: *const f32,
    width: usize,
    height: usize,
    out: *mut SsaDetection,
    capacity: usize,
    out_len: *mut usize,
) -> SsaStatus {
    guard(|| {
        non_null!(detector, pixels, out_len);
        if capacity > 0 {
            non_null!(out);
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(3))
            .filter(|&n| n > 0)
            .ok_or_else(|| fail(SsaStatus::InvalidArgument, "image size is zero or overflows"))?;
        let data = std::slice::from_raw_parts(pixels, n).to_vec();
        let image = lift(Tensor::new([3, height, width], data))?;
        let dets = lift((*detector).inner.detect(&image, 0))?;
        *out_len = dets.len();
        for (i, d) in dets.iter().take(capacity).enumerate() {
            *out.add(i) = SsaDetection { x: d.bbox.x, y: d.bbox.y, w: d.bbox.w, h: d.bbox.h, score: d.score };
        }
        if dets.len() > capacity {
            return Err(fail(SsaStatus::BufferTooSmall, format!("{} detections, capacity {capacity}", dets.len())));
        }
        Ok(())
    })
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ssa_iou(a: *const SsaBox, b: *const SsaBox, out: *mut f64) -> SsaStatus {
    guard(|| {
        non_null!(a, b, out);
        *out = iou(&to_bbox(&*a)?, &to_bbox(&*b)?);
        Ok(())
    })
}

/// Greedy non-maximum suppression. Writes kept indices, by descending score,
/// into `keep` (room for `n`) and their count into `out_len`.
///
/// # Safety
/// `boxes` and `scores` must hold `n` entries, `keep` room for `n` indices.
#[no_mangle]
pub unsafe extern "C" fn ssa_nms(
    boxes: *const SsaBox,
    scores: *const f64,
    n: usize,
    iou_threshold: f64,
    keep: *mut usize,
    out_len: *mut usize,
) -> SsaStatus {
    guard(|| {
        non_null!(out_len);
        if n == 0 {
            *out_len = 0;
            return Ok(());
        }
        non_null!(boxes, scores, keep);
        if !(0.0..=1.0).contains(&iou_threshold) {
            return Err(fail(SsaStatus::InvalidArgument, "iou_threshold must lie in [0, 1]"));
        }
        let bs = std::slice::from_raw_parts(boxes, n).iter().map(to_bbox).collect::<Result<Vec<_>, _>>()?;
        let ss = std::slice::from_raw_parts(scores, n);
        let kept = nms_indices(&bs, ss, iou_threshold);
        for (i, k) in kept.iter().enumerate() {
            *keep.add(i) = *k;
        }
        *out_len = kept.len();
        Ok(())
    })
}

/// Log-average of `n` miss rates (floored at 1e-10).
///
/// # Safety
/// `miss_rates` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn ssa_log_average_miss_rate(miss_rates: *const f64, n: usize, out: *mut f64) -> SsaStatus {
    guard(|| {
        non_null!(miss_rates, out);
        if n == 0 {
            return Err(fail(SsaStatus::InvalidArgument, "no miss rates"));
        }
        *out = log_average(std::slice::from_raw_parts(miss_rates, n));
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns its full length in bytes.
///
/// # Safety
/// `buf` must hold `len` bytes, or be null with `len` 0.
#[no_mangle]
pub unsafe extern "C" fn ssa_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ssa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
