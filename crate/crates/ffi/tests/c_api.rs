use std::ffi::{c_char, CStr, CString};
use std::ptr;

use ssacnn::config::NetworkConfig;
use ssacnn::pipeline::Detector;
use ssacnn::rcnn::Rcnn;
use ssacnn::rpn::Rpn;
use ssacnn_ffi::*;

fn saved_detector(dir: &std::path::Path) {
    let cfg = NetworkConfig { width_factor: 16, ..NetworkConfig::default() };
    let (rpn, rpn_params) = Rpn::build::<f32>(&cfg, 1).unwrap();
    let (rcnn, rcnn_params) = Rcnn::build::<f32>(&cfg, 2).unwrap();
    Detector { rpn, rpn_params, rcnn, rcnn_params }.save(dir).unwrap();
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        ssa_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn load_detect_free() {
    let dir = tempfile::tempdir().unwrap();
    saved_detector(dir.path());
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut det: *mut SsaDetector = ptr::null_mut();
    assert_eq!(unsafe { ssa_detector_load(path.as_ptr(), &mut det) }, SsaStatus::Ok);
    assert!(!det.is_null());

    let (w, h) = (64usize, 48usize);
    let pixels: Vec<f32> = (0..3 * w * h).map(|i| (i % 17) as f32 / 16.0).collect();
    let mut n = 0usize;
    let st = unsafe { ssa_detector_detect(det, pixels.as_ptr(), w, h, ptr::null_mut(), 0, &mut n) };
    assert!(n > 0);
    assert_eq!(st, SsaStatus::BufferTooSmall);

    let mut out = vec![SsaDetection { x: 0.0, y: 0.0, w: 0.0, h: 0.0, score: 0.0 }; n];
    let mut m = 0usize;
    let st = unsafe { ssa_detector_detect(det, pixels.as_ptr(), w, h, out.as_mut_ptr(), n, &mut m) };
    assert_eq!(st, SsaStatus::Ok);
    assert_eq!(m, n);
    assert!(out.windows(2).all(|p| p[0].score >= p[1].score));

    // 50 is not a multiple of 16.
    let odd = vec![0.5f32; 3 * 50 * 48];
    let st = unsafe { ssa_detector_detect(det, odd.as_ptr(), 50, 48, out.as_mut_ptr(), n, &mut m) };
    assert_eq!(st, SsaStatus::Config);
    assert!(last_error().contains("16"), "{}", last_error());
    unsafe { ssa_detector_free(det) };
}

#[test]
fn load_errors() {
    let missing = CString::new("/nonexistent/ckpt").unwrap();
    let mut det: *mut SsaDetector = ptr::null_mut();
    assert_eq!(unsafe { ssa_detector_load(missing.as_ptr(), &mut det) }, SsaStatus::Io);
    assert!(det.is_null());
    assert!(last_error().contains("rpn.ckpt"));
    assert_eq!(unsafe { ssa_detector_load(ptr::null(), &mut det) }, SsaStatus::NullPointer);
    unsafe { ssa_detector_free(ptr::null_mut()) };
}

#[test]
fn geometry_helpers() {
    let a = SsaBox { x: 0.0, y: 0.0, w: 10.0, h: 10.0 };
    let b = SsaBox { x: 5.0, y: 0.0, w: 10.0, h: 10.0 };
    let mut v = 0.0;
    assert_eq!(unsafe { ssa_iou(&a, &b, &mut v) }, SsaStatus::Ok);
    assert!((v - 50.0 / 150.0).abs() < 1e-12);
    let bad = SsaBox { w: -1.0, ..a };
    assert_eq!(unsafe { ssa_iou(&a, &bad, &mut v) }, SsaStatus::InvalidArgument);

    let boxes = [a, b, SsaBox { x: 1.0, ..a }];
    let scores = [0.5, 0.4, 0.9];
    let mut keep = [0usize; 3];
    let mut n = 0;
    assert_eq!(unsafe { ssa_nms(boxes.as_ptr(), scores.as_ptr(), 3, 0.5, keep.as_mut_ptr(), &mut n) }, SsaStatus::Ok);
    assert_eq!(&keep[..n], &[2, 1]);

    let mut mr = 0.0;
    let rates = [0.1, 0.1, 0.1];
    assert_eq!(unsafe { ssa_log_average_miss_rate(rates.as_ptr(), 3, &mut mr) }, SsaStatus::Ok);
    assert!((mr - 0.1).abs() < 1e-12);
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(ssa_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ssacnn.h")).unwrap();
    for sym in ["ssa_detector_load", "ssa_detector_detect", "ssa_detector_free", "ssa_nms", "SSA_STATUS_BUFFER_TOO_SMALL", "typedef struct SsaDetector SsaDetector"] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}
