use std::ffi::{CStr, CString};
use std::ptr;

use restorelab_ffi::*;

fn last_error() -> String {
    let p = rl_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn gray(h: usize, w: usize, v: f32) -> *mut RlImage {
    let data = vec![v; h * w * 3];
    let mut img = ptr::null_mut();
    assert_eq!(unsafe { rl_image_new(h, w, 3, data.as_ptr(), &mut img) }, RlStatus::Ok);
    img
}

fn pixels(img: *const RlImage) -> Vec<f32> {
    let (mut h, mut w, mut c) = (0, 0, 0);
    unsafe {
        assert_eq!(rl_image_dims(img, &mut h, &mut w, &mut c), RlStatus::Ok);
        let mut out = vec![0f32; h * w * c];
        assert_eq!(rl_image_read(img, out.as_mut_ptr(), out.len()), RlStatus::Ok);
        out
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(rl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_report_status_and_message() {
    let mut img = ptr::null_mut();
    let st = unsafe { rl_image_new(2, 2, 3, ptr::null(), &mut img) };
    assert_eq!(st, RlStatus::NullPointer);
    assert!(img.is_null());
    assert!(last_error().contains("data"));

    let mut v = 0.0;
    assert_eq!(unsafe { rl_psnr(ptr::null(), ptr::null(), &mut v) }, RlStatus::NullPointer);
    unsafe {
        rl_image_free(ptr::null_mut());
        rl_model_free(ptr::null_mut());
        rl_backbone_free(ptr::null_mut());
    }
}

#[test]
fn read_with_wrong_length_is_a_shape_error() {
    let img = gray(4, 4, 0.5);
    let mut buf = vec![0f32; 5];
    assert_eq!(unsafe { rl_image_read(img, buf.as_mut_ptr(), buf.len()) }, RlStatus::Shape);
    unsafe { rl_image_free(img) };
}

#[test]
fn degrade_and_metrics() {
    let img = gray(32, 32, 0.5);
    let spec = CString::new(r#"{"kind":"noise","noise_sigma":25}"#).unwrap();
    let mut noisy = ptr::null_mut();
    assert_eq!(unsafe { rl_degrade(img, spec.as_ptr(), 7, &mut noisy) }, RlStatus::Ok);
    let (mut p, mut s) = (0.0, 0.0);
    unsafe {
        assert_eq!(rl_psnr(img, noisy, &mut p), RlStatus::Ok);
        assert_eq!(rl_ssim(img, img, &mut s), RlStatus::Ok);
    }
    assert!((p - 20.17).abs() < 1.0, "{p}");
    assert!((s - 1.0).abs() < 1e-12);

    let bad = CString::new(r#"{"kind":"noise","noise_sigmaa":25}"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { rl_degrade(img, bad.as_ptr(), 7, &mut out) }, RlStatus::Config);
    assert!(last_error().contains("noise_sigmaa"));
    let negative = CString::new(r#"{"kind":"noise","noise_sigma":-1}"#).unwrap();
    assert_ne!(unsafe { rl_degrade(img, negative.as_ptr(), 7, &mut out) }, RlStatus::Ok);
    unsafe {
        rl_image_free(noisy);
        rl_image_free(img);
    }
}

#[test]
fn fresh_model_restores_to_identity() {
    let mut model = ptr::null_mut();
    let cfg = CString::new(r#"{"guidance":"none","levels":2,"blocks_per_level":[1,1],"base_channels":4}"#).unwrap();
    assert_eq!(unsafe { rl_model_new(cfg.as_ptr(), 0, 1, &mut model) }, RlStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { rl_model_num_parameters(model, &mut n) }, RlStatus::Ok);
    assert!(n > 0);

    let img = gray(12, 10, 0.25);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { rl_model_restore(model, ptr::null(), img, &mut out) }, RlStatus::Ok);
    assert_eq!(pixels(out), pixels(img));
    unsafe {
        rl_image_free(out);
        rl_image_free(img);
        rl_model_free(model);
    }
}

#[test]
fn guided_model_needs_a_backbone() {
    let mut bb = ptr::null_mut();
    assert_eq!(unsafe { rl_backbone_new(ptr::null(), &mut bb) }, RlStatus::Ok);
    let mut width = 0;
    assert_eq!(unsafe { rl_backbone_width(bb, &mut width) }, RlStatus::Ok);

    let mut model = ptr::null_mut();
    let cfg = CString::new(r#"{"levels":2,"blocks_per_level":[1,1],"base_channels":4}"#).unwrap();
    assert_eq!(unsafe { rl_model_new(cfg.as_ptr(), width, 2, &mut model) }, RlStatus::Ok);
    let img = gray(16, 16, 0.4);
    let mut out = ptr::null_mut();
    assert_ne!(unsafe { rl_model_restore(model, ptr::null(), img, &mut out) }, RlStatus::Ok);
    assert!(out.is_null());
    assert!(last_error().contains("backbone"));
    assert_eq!(unsafe { rl_model_restore(model, bb, img, &mut out) }, RlStatus::Ok);
    assert_eq!(pixels(out).len(), 16 * 16 * 3);
    unsafe {
        rl_image_free(out);
        rl_image_free(img);
        rl_model_free(model);
        rl_backbone_free(bb);
    }
}

#[test]
fn invalid_model_config_is_a_config_error() {
    let mut model = ptr::null_mut();
    let cfg = CString::new(r#"{"levels":3,"blocks_per_level":[1]}"#).unwrap();
    assert_eq!(unsafe { rl_model_new(cfg.as_ptr(), 32, 0, &mut model) }, RlStatus::Config);
    assert!(last_error().contains("blocks_per_level"));
    assert!(model.is_null());
}

#[test]
fn png_round_trip_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("a.png").to_str().unwrap()).unwrap();
    let img = gray(5, 7, 128.0 / 255.0);
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(rl_image_save_png(img, path.as_ptr()), RlStatus::Ok);
        assert_eq!(rl_image_load_png(path.as_ptr(), &mut back), RlStatus::Ok);
    }
    assert_eq!(pixels(back), pixels(img));
    let missing = CString::new(dir.path().join("none.png").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { rl_image_load_png(missing.as_ptr(), &mut none) }, RlStatus::Io);
    unsafe {
        rl_image_free(back);
        rl_image_free(img);
    }
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/restorelab.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["rl_model_restore", "rl_last_error_message", "RL_STATUS_OK", "typedef struct RlModel RlModel"] {
        assert!(text.contains(f), "{f}");
    }
    if let Ok(status) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).status() {
        assert!(status.success());
    }
}
