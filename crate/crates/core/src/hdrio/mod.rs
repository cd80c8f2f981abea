//! Image containers and codecs: Radiance RGBE, PFM and binary PPM.
//!
//! All images are held top-down, row-major, interleaved RGB. Formats that
//! store rows differently are flipped at the codec boundary.

mod pfm;
mod pnm;
mod rgbe;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub use pfm::{read_pfm, write_pfm};
pub use pnm::{read_pnm, write_pnm, PnmDepth};
pub use rgbe::{read_rgbe, rgbe_decode_pixel, rgbe_encode_pixel, write_rgbe};

use crate::tensor::{Scalar, Tensor};

/// Largest pixel count any decoder will accept.
pub const MAX_PIXELS: usize = 1 << 26;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("not an RGBE file")]
    NotRgbe,
    #[error("unsupported RGBE orientation {0:?} (only \"-Y H +X W\")")]
    UnsupportedOrientation(String),
    #[error("truncated scanline {row}")]
    TruncatedScanline { row: usize },
    #[error("corrupt run-length data in scanline {row}")]
    BadRun { row: usize },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("truncated pixel data")]
    Truncated,
    #[error("image dimensions {width}x{height} out of range")]
    Dimensions { width: usize, height: usize },
    #[error("invalid sample value {0}")]
    BadSample(f32),
    #[error("unknown image extension for {0}")]
    UnknownExtension(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_dims(width: usize, height: usize) -> Result<(), CodecError> {
    if width == 0 || height == 0 || width.saturating_mul(height) > MAX_PIXELS {
        return Err(CodecError::Dimensions { width, height });
    }
    Ok(())
}

/// Linear-light RGB, nonnegative and finite.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

/// Display-referred RGB with every component in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LdrImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

macro_rules! image_common {
    ($ty:ident) => {
        impl $ty {
            pub fn new(width: usize, height: usize) -> Self {
                $ty {
                    width,
                    height,
                    pixels: vec![0.0; width * height * 3],
                }
            }

            pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
                let mut pixels = Vec::with_capacity(width * height * 3);
                for y in 0..height {
                    for x in 0..width {
                        pixels.extend_from_slice(&f(x, y));
                    }
                }
                $ty { width, height, pixels }
            }

            pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
                let i = (y * self.width + x) * 3;
                [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
            }

            pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
                let i = (y * self.width + x) * 3;
                self.pixels[i..i + 3].copy_from_slice(&rgb);
            }

            /// Planar `(1, 3, h, w)` tensor.
            pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
                let plane = self.width * self.height;
                Tensor::from_fn([1, 3, self.height, self.width], |i| {
                    let (c, p) = (i / plane, i % plane);
                    T::of(self.pixels[p * 3 + c] as f64)
                })
            }
        }
    };
}

image_common!(HdrImage);
image_common!(LdrImage);

impl HdrImage {
    pub fn is_valid(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite() && *v >= 0.0)
    }

    /// Builds from item `index` of a `(n, 3, h, w)` tensor; negatives clamp to 0.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Self {
        let s = t.shape();
        let mut img = HdrImage::new(s.w, s.h);
        for c in 0..3 {
            for y in 0..s.h {
                for x in 0..s.w {
                    let v = t.at(index, c, y, x).as_f64() as f32;
                    img.pixels[(y * s.w + x) * 3 + c] = if v.is_finite() { v.max(0.0) } else { 0.0 };
                }
            }
        }
        img
    }
}

impl LdrImage {
    pub fn is_valid(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

impl From<LdrImage> for HdrImage {
    fn from(l: LdrImage) -> Self {
        HdrImage {
            width: l.width,
            height: l.height,
            pixels: l.pixels,
        }
    }
}

/// Decodes any supported container by extension (`.hdr`/`.pic`, `.pfm`, `.ppm`/`.pnm`).
pub fn read_image(path: &Path) -> Result<HdrImage, CodecError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let mut r = BufReader::new(File::open(path)?);
    match ext.as_str() {
        "hdr" | "pic" | "rgbe" => read_rgbe(&mut r),
        "pfm" => read_pfm(&mut r),
        "ppm" | "pnm" => read_pnm(&mut r).map(HdrImage::from),
        _ => Err(CodecError::UnknownExtension(path.display().to_string())),
    }
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("hdr" | "pic" | "rgbe" | "pfm" | "ppm" | "pnm")
    )
}

pub fn save_pfm(img: &HdrImage, path: &Path) -> Result<(), CodecError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pfm(img, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn save_rgbe(img: &HdrImage, path: &Path) -> Result<(), CodecError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_rgbe(img, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn save_pnm(img: &LdrImage, depth: PnmDepth, path: &Path) -> Result<(), CodecError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pnm(img, depth, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_pnm(path: &Path) -> Result<LdrImage, CodecError> {
    read_pnm(&mut BufReader::new(File::open(path)?))
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
/// Consumes exactly one trailing whitespace byte.
pub(crate) fn header_token<R: std::io::BufRead>(r: &mut R) -> Result<String, CodecError> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return if tok.is_empty() {
                Err(CodecError::BadHeader("unexpected end of header".into()))
            } else {
                Ok(String::from_utf8_lossy(&tok).into_owned())
            };
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            while r.read(&mut byte)? == 1 && byte[0] != b'\n' {}
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(String::from_utf8_lossy(&tok).into_owned());
        }
        if tok.len() >= 32 {
            return Err(CodecError::BadHeader("header token too long".into()));
        }
        tok.push(b);
    }
}

/// Reads exactly `len` bytes, growing the buffer only as data arrives.
pub(crate) fn read_bounded<R: std::io::Read>(r: &mut R, len: usize) -> Result<Vec<u8>, CodecError> {
    let mut buf = Vec::with_capacity(len.min(1 << 20));
    let got = std::io::Read::read_to_end(&mut std::io::Read::take(r.by_ref(), len as u64), &mut buf)?;
    if got != len {
        return Err(CodecError::Truncated);
    }
    Ok(buf)
}
