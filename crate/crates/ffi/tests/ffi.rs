use std::ffi::{CStr, CString};
use std::ptr;

use tsr_core::annotate::TissueClass;
use tsr_core::model::MiniNet;
use tsr_core::raster::{write_image, RgbImage};
use tsr_core::synth::{gen_patch, TextureParams};
use tsr_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe { tsr_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn image_from(img: &RgbImage) -> *mut TsrImage {
    let mut out = ptr::null_mut();
    let s = unsafe { tsr_image_from_rgb(img.data().as_ptr(), img.width(), img.height(), &mut out) };
    assert_eq!(s, TsrStatus::Ok);
    out
}

#[test]
fn ratio_and_errors() {
    let mut t = 0.0;
    assert_eq!(unsafe { tsr_ratio(3, 7, &mut t) }, TsrStatus::Ok);
    assert!((t - 0.3).abs() < 1e-15);
    assert_eq!(unsafe { tsr_ratio(0, 0, &mut t) }, TsrStatus::Unscorable);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { tsr_ratio(1, 1, ptr::null_mut()) }, TsrStatus::NullArgument);
}

#[test]
fn image_round_trip_and_otsu() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = RgbImage::filled(10, 10, [230, 230, 230]);
    for x in 0..5 {
        for y in 0..10 {
            img.put_pixel(x, y, [20, 20, 20]);
        }
    }
    let path = dir.path().join("a.ppm");
    write_image(&path, &img).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { tsr_image_read(c.as_ptr(), &mut h) }, TsrStatus::Ok);
    let (mut w, mut hh) = (0, 0);
    assert_eq!(unsafe { tsr_image_dims(h, &mut w, &mut hh) }, TsrStatus::Ok);
    assert_eq!((w, hh), (10, 10));
    let mut buf = vec![0u8; 300];
    assert_eq!(unsafe { tsr_image_pixels(h, buf.as_mut_ptr(), buf.len()) }, TsrStatus::Ok);
    assert_eq!(buf, img.data());
    assert_eq!(unsafe { tsr_image_pixels(h, buf.as_mut_ptr(), 10) }, TsrStatus::InvalidArgument);
    let mut t = 0u8;
    assert_eq!(unsafe { tsr_image_otsu(h, &mut t) }, TsrStatus::Ok);
    assert_eq!(t, 20);
    unsafe { tsr_image_free(h) };

    let flat = image_from(&RgbImage::filled(4, 4, [9, 9, 9]));
    assert_eq!(unsafe { tsr_image_otsu(flat, &mut t) }, TsrStatus::Degenerate);
    unsafe { tsr_image_free(flat) };

    let missing = CString::new(dir.path().join("nope.ppm").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { tsr_image_read(missing.as_ptr(), &mut h) }, TsrStatus::Io);
    assert!(h.is_null());
    assert_eq!(unsafe { tsr_image_read(ptr::null(), &mut h) }, TsrStatus::NullArgument);
    unsafe { tsr_image_free(ptr::null_mut()) };
}

#[test]
fn net_classify_and_normalize() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zero.mnet");
    MiniNet::zeros().save(&path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { tsr_net_load(c.as_ptr(), &mut net) }, TsrStatus::Ok);

    let patch = image_from(&gen_patch(TissueClass::Stroma, &TextureParams::default(), 1));
    let mut probs = [0.0; 3];
    let mut label = 0u8;
    assert_eq!(unsafe { tsr_net_classify(net, patch, probs.as_mut_ptr(), &mut label) }, TsrStatus::Ok);
    for p in probs {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
    assert_eq!(label, 1, "uniform probabilities break ties toward tumor");

    let mut norm = ptr::null_mut();
    assert_eq!(unsafe { tsr_image_normalize(patch, &mut norm) }, TsrStatus::Ok);
    unsafe { tsr_image_free(norm) };

    let small = image_from(&RgbImage::filled(8, 8, [100, 50, 120]));
    assert_eq!(
        unsafe { tsr_net_classify(net, small, probs.as_mut_ptr(), ptr::null_mut()) },
        TsrStatus::InvalidArgument
    );
    let white = image_from(&RgbImage::filled(8, 8, [255, 255, 255]));
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { tsr_image_normalize(white, &mut out) }, TsrStatus::Stain);

    unsafe {
        tsr_image_free(small);
        tsr_image_free(white);
        tsr_image_free(patch);
        tsr_net_free(net);
    }

    let bad = dir.path().join("bad.mnet");
    std::fs::write(&bad, b"XXXXX").unwrap();
    let c = CString::new(bad.to_str().unwrap()).unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { tsr_net_load(c.as_ptr(), &mut net) }, TsrStatus::Model);
    assert!(last_error().contains("magic"));
}

#[test]
fn score_unscorable_slide() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.mnet");
    MiniNet::zeros().save(&path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { tsr_net_load(c.as_ptr(), &mut net) }, TsrStatus::Ok);
    let img = image_from(&RgbImage::filled(300, 300, [250, 250, 250]));
    let mut counts = [0u64; 3];
    let mut t = 0.0;
    let s = unsafe { tsr_score_image(img, net, counts.as_mut_ptr(), &mut t) };
    assert_eq!(s, TsrStatus::Unscorable);
    assert!(last_error().contains("no tissue"));
    unsafe {
        tsr_image_free(img);
        tsr_net_free(net);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(tsr_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/tsr.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in ["tsr_image_read", "tsr_net_classify", "tsr_score_image", "TSR_STATUS_UNSCORABLE", "typedef struct TsrImage TsrImage"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", header])
        .status()
    else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(status.success());
}
