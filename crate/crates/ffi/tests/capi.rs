use std::ffi::{CStr, CString};
use std::ptr;

use itmn::hdrio::{HdrImage, LdrImage};
use itmn::nn::{build_generator, WidthMultiplier};
use itmn_ffi::*;

fn last_error() -> String {
    let p = itmn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn gradient(w: usize, h: usize) -> Vec<f32> {
    HdrImage::from_fn(w, h, |x, y| [x as f32 / w as f32, y as f32 / h as f32, 0.3]).pixels
}

#[test]
fn version_and_divisor() {
    let v = unsafe { CStr::from_ptr(itmn_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    assert_eq!(itmn_generator_divisor(), 32);
}

#[test]
fn rgbe_pixel_roundtrip() {
    let mut bytes = [0u8; 4];
    let mut back = [0f32; 3];
    unsafe {
        assert_eq!(itmn_rgbe_encode(1.0, 0.5, 0.25, bytes.as_mut_ptr()), ItmnStatus::Ok);
        assert_eq!(bytes, [128, 64, 32, 129]);
        assert_eq!(itmn_rgbe_decode(bytes.as_ptr(), back.as_mut_ptr()), ItmnStatus::Ok);
    }
    assert_eq!(back, [1.0, 0.5, 0.25]);
}

#[test]
fn null_pointers_are_reported() {
    let status = unsafe { itmn_rgbe_decode(ptr::null(), ptr::null_mut()) };
    assert_eq!(status, ItmnStatus::NullPointer);
    assert!(last_error().contains("null"));
    let mut out = 0.0;
    let status = unsafe { itmn_ssim(ptr::null(), ptr::null(), 4, 4, 0, &mut out) };
    assert_eq!(status, ItmnStatus::NullPointer);
}

#[test]
fn metrics_match_the_library() {
    let (w, h) = (24, 20);
    let a = gradient(w, h);
    let b: Vec<f32> = a.iter().map(|v| v * 0.9 + 0.01).collect();
    let (ia, ib) = (
        HdrImage { width: w, height: h, pixels: a.clone() },
        HdrImage { width: w, height: h, pixels: b.clone() },
    );
    let stops = [-2, -1, 0, 1, 2];
    let (mut m, mut s, mut l) = (0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(itmn_mpsnr(a.as_ptr(), b.as_ptr(), w, h, stops.as_ptr(), 5, 2.2, &mut m), ItmnStatus::Ok);
        assert_eq!(itmn_ssim(a.as_ptr(), b.as_ptr(), w, h, 0, &mut s), ItmnStatus::Ok);
        assert_eq!(itmn_log_psnr(a.as_ptr(), b.as_ptr(), w, h, 1e-4, &mut l), ItmnStatus::Ok);
    }
    assert_eq!(m, itmn::metrics::mpsnr(&ia, &ib, &stops, 2.2).unwrap());
    assert_eq!(s, itmn::metrics::ssim(&ia, &ib, false).unwrap());
    assert_eq!(l, itmn::metrics::log_psnr(&ia, &ib, 1e-4).unwrap());
    let mut same = 0.0;
    unsafe { itmn_ssim(a.as_ptr(), a.as_ptr(), w, h, 1, &mut same) };
    assert_eq!(same, 1.0);
}

#[test]
fn reinhard_output_and_errors() {
    let (w, h) = (8, 8);
    let hdr: Vec<f32> = gradient(w, h).iter().map(|v| v * 50.0).collect();
    let mut out = vec![0f32; hdr.len()];
    unsafe {
        assert_eq!(itmn_reinhard(hdr.as_ptr(), w, h, 0.18, 0.0, out.as_mut_ptr()), ItmnStatus::Ok);
    }
    assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    let status = unsafe { itmn_reinhard(hdr.as_ptr(), w, h, -1.0, 0.0, out.as_mut_ptr()) };
    assert_eq!(status, ItmnStatus::InvalidArgument);
    assert!(last_error().contains("key"));
}

#[test]
fn generator_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.itmn");
    let g = build_generator::<f32>(WidthMultiplier::new(1, 16).unwrap(), 3).unwrap();
    g.save_params(&path).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { itmn_generator_load(c_path.as_ptr(), &mut handle) }, ItmnStatus::Ok);
    assert!(!handle.is_null());

    let (w, h) = (32, 32);
    let ldr = gradient(w, h);
    let mut out = vec![0f32; ldr.len()];
    assert_eq!(
        unsafe { itmn_generator_infer(handle, ldr.as_ptr(), w, h, 0, out.as_mut_ptr()) },
        ItmnStatus::Ok
    );
    let expected = g
        .infer(&LdrImage { width: w, height: h, pixels: ldr.clone() }.to_tensor::<f32>())
        .unwrap();
    assert_eq!(out, HdrImage::from_tensor(&expected, 0).pixels);

    let (w2, h2) = (33, 20);
    let odd = gradient(w2, h2);
    let mut out2 = vec![0f32; odd.len()];
    let status = unsafe { itmn_generator_infer(handle, odd.as_ptr(), w2, h2, 0, out2.as_mut_ptr()) };
    assert_eq!(status, ItmnStatus::Shape);
    assert!(last_error().contains("divisible by 32"));
    let status = unsafe { itmn_generator_infer(handle, odd.as_ptr(), w2, h2, 1, out2.as_mut_ptr()) };
    assert_eq!(status, ItmnStatus::Ok);
    assert!(out2.iter().all(|v| v.is_finite()));

    unsafe { itmn_generator_free(handle) };
    unsafe { itmn_generator_free(ptr::null_mut()) };
}

#[test]
fn missing_model_file() {
    let c_path = CString::new("/nonexistent/g.itmn").unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { itmn_generator_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, ItmnStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("nonexistent"));
}
