//! C ABI over the `itmn` library.
//!
//! Every fallible function returns an [`ItmnStatus`]; on failure the message
//! is available from [`itmn_last_error`] on the same thread. Images cross the
//! boundary as row-major interleaved RGB `float` buffers of `3 * width * height`
//! values.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use itmn::cli::pad_reflect;
use itmn::dataset::{Reinhard, ToneMap};
use itmn::hdrio::{rgbe_decode_pixel, rgbe_encode_pixel, HdrImage, LdrImage};
use itmn::metrics;
use itmn::nn::{load_generator, Generator, GENERATOR_DIVISOR};
use itmn::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ItmnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Codec = 5,
    ParamFile = 6,
    NonFinite = 7,
    Panic = 8,
    Other = 9,
}

/// A loaded generator. Create with [`itmn_generator_load`], release with
/// [`itmn_generator_free`].
pub struct ItmnGenerator {
    inner: Generator<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ItmnStatus {
    match e {
        Error::Shape { .. } => ItmnStatus::Shape,
        Error::InvalidArgument(_) | Error::Config(_) | Error::Dataset(_) => ItmnStatus::InvalidArgument,
        Error::ParamFile(_) => ItmnStatus::ParamFile,
        Error::NonFinite { .. } => ItmnStatus::NonFinite,
        Error::Codec(_) => ItmnStatus::Codec,
        Error::Io(_) => ItmnStatus::Io,
        Error::File { source, .. } => status_of(source),
        _ => ItmnStatus::Other,
    }
}

struct Fail(ItmnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ItmnStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ItmnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ItmnStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ItmnStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(ItmnStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn pixel_count(width: usize, height: usize) -> Result<usize, Fail> {
    if width == 0 || height == 0 {
        return Err(invalid(format!("empty image {width}x{height}")));
    }
    width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| invalid("image dimensions overflow"))
}

/// # Safety
/// `data` must point to `3 * width * height` readable floats.
unsafe fn image_in(data: *const f32, width: usize, height: usize, what: &str) -> Result<HdrImage, Fail> {
    non_null(data, what)?;
    let n = pixel_count(width, height)?;
    Ok(HdrImage {
        width,
        height,
        pixels: slice::from_raw_parts(data, n).to_vec(),
    })
}

/// # Safety
/// `out` must point to `3 * width * height` writable floats.
unsafe fn image_out(img: &[f32], out: *mut f32) {
    ptr::copy_nonoverlapping(img.as_ptr(), out, img.len());
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn itmn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn itmn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Width and height of generator inputs must be multiples of this.
#[no_mangle]
pub extern "C" fn itmn_generator_divisor() -> usize {
    GENERATOR_DIVISOR
}

/// Loads a generator parameter file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn itmn_generator_load(path: *const c_char, out: *mut *mut ItmnGenerator) -> ItmnStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let inner = load_generator::<f32>(Path::new(path))?;
        *out = Box::into_raw(Box::new(ItmnGenerator { inner }));
        Ok(())
    })
}

/// Releases a generator. NULL is ignored.
///
/// # Safety
/// `g` must come from [`itmn_generator_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn itmn_generator_free(g: *mut ItmnGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Maps an LDR image in `[0, 1]` to a normalized HDR image of the same size.
/// With `pad_reflect_flag` nonzero, sizes not divisible by
/// [`itmn_generator_divisor`] are reflect-padded and cropped back.
///
/// # Safety
/// `ldr` and `out` must each hold `3 * width * height` floats.
#[no_mangle]
pub unsafe extern "C" fn itmn_generator_infer(
    g: *const ItmnGenerator,
    ldr: *const f32,
    width: usize,
    height: usize,
    pad_reflect_flag: c_int,
    out: *mut f32,
) -> ItmnStatus {
    guard(|| {
        non_null(g, "generator")?;
        non_null(out, "out")?;
        let img = image_in(ldr, width, height, "ldr")?;
        if !img.pixels.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(invalid("LDR input must lie in [0, 1]"));
        }
        let ldr = LdrImage {
            width,
            height,
            pixels: img.pixels,
        };
        let input = if pad_reflect_flag != 0 {
            pad_reflect(&ldr, GENERATOR_DIVISOR)
        } else {
            ldr
        };
        let y = (*g).inner.infer(&input.to_tensor::<f32>())?;
        let full = HdrImage::from_tensor(&y, 0);
        let cropped = HdrImage::from_fn(width, height, |x, yy| full.pixel(x, yy));
        image_out(&cropped.pixels, out);
        Ok(())
    })
}

/// Multi-exposure PSNR in dB over `n_stops` exposure stops.
///
/// # Safety
/// `pred` and `reference` must hold `3 * width * height` floats, `stops`
/// `n_stops` ints, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn itmn_mpsnr(
    pred: *const f32,
    reference: *const f32,
    width: usize,
    height: usize,
    stops: *const c_int,
    n_stops: usize,
    gamma: f64,
    out: *mut f64,
) -> ItmnStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(stops, "stops")?;
        let p = image_in(pred, width, height, "pred")?;
        let r = image_in(reference, width, height, "reference")?;
        let stops: Vec<i32> = slice::from_raw_parts(stops, n_stops).to_vec();
        *out = metrics::mpsnr(&p, &r, &stops, gamma)?;
        Ok(())
    })
}

/// Gaussian-window SSIM on luma, or averaged over R, G, B when `per_channel` is nonzero.
///
/// # Safety
/// `pred` and `reference` must hold `3 * width * height` floats and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn itmn_ssim(
    pred: *const f32,
    reference: *const f32,
    width: usize,
    height: usize,
    per_channel: c_int,
    out: *mut f64,
) -> ItmnStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = image_in(pred, width, height, "pred")?;
        let r = image_in(reference, width, height, "reference")?;
        *out = metrics::ssim(&p, &r, per_channel != 0)?;
        Ok(())
    })
}

/// PSNR of log2 luminance in dB with luminance floored at `floor`.
///
/// # Safety
/// `pred` and `reference` must hold `3 * width * height` floats and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn itmn_log_psnr(
    pred: *const f32,
    reference: *const f32,
    width: usize,
    height: usize,
    floor: f64,
    out: *mut f64,
) -> ItmnStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = image_in(pred, width, height, "pred")?;
        let r = image_in(reference, width, height, "reference")?;
        *out = metrics::log_psnr(&p, &r, floor)?;
        Ok(())
    })
}

/// Reinhard's global operator. A non-positive `l_white` uses the image's
/// largest scaled luminance.
///
/// # Safety
/// `hdr` and `out` must each hold `3 * width * height` floats.
#[no_mangle]
pub unsafe extern "C" fn itmn_reinhard(
    hdr: *const f32,
    width: usize,
    height: usize,
    key: f64,
    l_white: f64,
    out: *mut f32,
) -> ItmnStatus {
    guard(|| {
        non_null(out, "out")?;
        let img = image_in(hdr, width, height, "hdr")?;
        let tmo = Reinhard::new(key, (l_white > 0.0).then_some(l_white))?;
        let ldr = tmo.apply(&img)?;
        image_out(&ldr.pixels, out);
        Ok(())
    })
}

/// Encodes one linear RGB triple as Radiance RGBE bytes.
///
/// # Safety
/// `out` must point to 4 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn itmn_rgbe_encode(r: f32, g: f32, b: f32, out: *mut u8) -> ItmnStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = rgbe_encode_pixel(r, g, b);
        ptr::copy_nonoverlapping(p.as_ptr(), out, 4);
        Ok(())
    })
}

/// Decodes Radiance RGBE bytes into a linear RGB triple.
///
/// # Safety
/// `rgbe` must point to 4 readable bytes and `out` to 3 writable floats.
#[no_mangle]
pub unsafe extern "C" fn itmn_rgbe_decode(rgbe: *const u8, out: *mut f32) -> ItmnStatus {
    guard(|| {
        non_null(rgbe, "rgbe")?;
        non_null(out, "out")?;
        let mut p = [0u8; 4];
        ptr::copy_nonoverlapping(rgbe, p.as_mut_ptr(), 4);
        let v = rgbe_decode_pixel(p);
        ptr::copy_nonoverlapping(v.as_ptr(), out, 3);
        Ok(())
    })
}
