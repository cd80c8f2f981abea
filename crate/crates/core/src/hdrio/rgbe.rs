use std::io::{BufRead, Read, Write};

use super::{check_dims, CodecError, HdrImage};

/// Smallest component magnitude that encodes to a nonzero pixel.
const MIN_ENCODABLE: f64 = 1e-32;

/// `v = m * 2^e` with `m` in `[0.5, 1)`, for finite positive `v`.
fn frexp(v: f64) -> (f64, i32) {
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    if exp == 0 {
        // subnormal: rescale into the normal range first
        let (m, e) = frexp(v * 2f64.powi(64));
        return (m, e - 64);
    }
    let m = f64::from_bits((bits & !(0x7ff << 52)) | (1022 << 52));
    (m, exp - 1022)
}

/// Shared-exponent encoding with round-to-nearest mantissas.
///
/// Decoding is `byte * 2^(e - 136)`, so rounding bounds the error of every
/// component to half a mantissa step, at most 1/256 of the largest component.
pub fn rgbe_encode_pixel(r: f32, g: f32, b: f32) -> [u8; 4] {
    let max = r.max(g).max(b) as f64;
    if !(max >= MIN_ENCODABLE) {
        return [0; 4];
    }
    let (m, mut e) = frexp(max);
    if (m * 256.0).round() >= 256.0 {
        e += 1;
    }
    if e + 128 > 255 {
        return [255, 255, 255, 255];
    }
    let scale = 2f64.powi(8 - e);
    let q = |c: f32| ((c.max(0.0) as f64) * scale).round().min(255.0) as u8;
    [q(r), q(g), q(b), (e + 128) as u8]
}

pub fn rgbe_decode_pixel(p: [u8; 4]) -> [f32; 3] {
    if p[3] == 0 {
        return [0.0; 3];
    }
    let f = 2f64.powi(p[3] as i32 - 136);
    [
        (p[0] as f64 * f) as f32,
        (p[1] as f64 * f) as f32,
        (p[2] as f64 * f) as f32,
    ]
}

fn read_line<R: BufRead>(r: &mut R) -> Result<Option<String>, CodecError> {
    let mut line = Vec::new();
    let n = r.take(4096).read_until(b'\n', &mut line)?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() == Some(&b'\n') {
        line.pop();
    } else if n == 4096 {
        return Err(CodecError::BadHeader("header line too long".into()));
    }
    Ok(Some(String::from_utf8_lossy(&line).into_owned()))
}

fn parse_resolution(line: &str) -> Result<(usize, usize), CodecError> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["-Y", h, "+X", w] => {
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| CodecError::BadHeader(format!("bad resolution line {line:?}")))
            };
            Ok((parse(w)?, parse(h)?))
        }
        [a, _, b, _] if matches!(*a, "-Y" | "+Y" | "-X" | "+X") && matches!(*b, "-Y" | "+Y" | "-X" | "+X") => {
            Err(CodecError::UnsupportedOrientation(line.to_string()))
        }
        _ => Err(CodecError::BadHeader(format!("bad resolution line {line:?}"))),
    }
}

/// Reads a Radiance picture with flat or adaptive run-length scanlines.
pub fn read_rgbe<R: BufRead>(r: &mut R) -> Result<HdrImage, CodecError> {
    let magic = read_line(r)?.ok_or(CodecError::NotRgbe)?;
    if magic != "#?RADIANCE" && magic != "#?RGBE" {
        return Err(CodecError::NotRgbe);
    }
    loop {
        let line = read_line(r)?.ok_or_else(|| CodecError::BadHeader("missing resolution line".into()))?;
        if line.is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            if fmt.trim() != "32-bit_rle_rgbe" {
                return Err(CodecError::Unsupported(format!("pixel format {}", fmt.trim())));
            }
        }
    }
    let res = read_line(r)?.ok_or_else(|| CodecError::BadHeader("missing resolution line".into()))?;
    let (width, height) = parse_resolution(&res)?;
    check_dims(width, height)?;

    let mut pixels = Vec::with_capacity((width * height * 3).min(1 << 22));
    let mut line = vec![[0u8; 4]; width];
    for row in 0..height {
        read_scanline(r, &mut line, row)?;
        for p in &line {
            pixels.extend_from_slice(&rgbe_decode_pixel(*p));
        }
    }
    Ok(HdrImage {
        width,
        height,
        pixels,
    })
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], row: usize) -> Result<(), CodecError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CodecError::TruncatedScanline { row },
        _ => CodecError::Io(e),
    })
}

fn read_scanline<R: BufRead>(r: &mut R, line: &mut [[u8; 4]], row: usize) -> Result<(), CodecError> {
    let width = line.len();
    let mut head = [0u8; 4];
    read_exact_or(r, &mut head, row)?;
    let rle = (8..0x8000).contains(&width) && head[0] == 2 && head[1] == 2 && head[2] & 0x80 == 0;
    if !rle {
        line[0] = head;
        for p in &mut line[1..] {
            read_exact_or(r, p, row)?;
        }
        return Ok(());
    }
    if ((head[2] as usize) << 8 | head[3] as usize) != width {
        return Err(CodecError::BadRun { row });
    }
    for ch in 0..4 {
        let mut x = 0;
        while x < width {
            let mut b = [0u8; 2];
            read_exact_or(r, &mut b[..1], row)?;
            let count = b[0] as usize;
            if count > 128 {
                let run = count - 128;
                if x + run > width {
                    return Err(CodecError::BadRun { row });
                }
                read_exact_or(r, &mut b[1..], row)?;
                for p in &mut line[x..x + run] {
                    p[ch] = b[1];
                }
                x += run;
            } else {
                if count == 0 || x + count > width {
                    return Err(CodecError::BadRun { row });
                }
                let mut buf = [0u8; 128];
                read_exact_or(r, &mut buf[..count], row)?;
                for (p, &v) in line[x..x + count].iter_mut().zip(&buf[..count]) {
                    p[ch] = v;
                }
                x += count;
            }
        }
    }
    Ok(())
}

/// Writes flat (uncompressed) scanlines.
pub fn write_rgbe<W: Write>(img: &HdrImage, w: &mut W) -> Result<(), CodecError> {
    check_dims(img.width, img.height)?;
    write!(
        w,
        "#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {} +X {}\n",
        img.height, img.width
    )?;
    let mut buf = Vec::with_capacity(img.width * 4);
    for row in img.pixels.chunks(img.width * 3) {
        buf.clear();
        for px in row.chunks(3) {
            buf.extend_from_slice(&rgbe_encode_pixel(px[0], px[1], px[2]));
        }
        w.write_all(&buf)?;
    }
    Ok(())
}
