use std::io::{BufRead, Write};

use super::{check_dims, header_token, read_bounded, CodecError, HdrImage};

/// Reads a color PFM. Rows are stored bottom-up; the sign of the scale line
/// selects the byte order (negative means little-endian).
pub fn read_pfm<R: BufRead>(r: &mut R) -> Result<HdrImage, CodecError> {
    match header_token(r)?.as_str() {
        "PF" => {}
        "Pf" => return Err(CodecError::Unsupported("grayscale PFM (Pf)".into())),
        other => return Err(CodecError::BadHeader(format!("not a PFM file (magic {other:?})"))),
    }
    let dim = |s: String| {
        s.parse::<usize>()
            .map_err(|_| CodecError::BadHeader(format!("bad dimension {s:?}")))
    };
    let width = dim(header_token(r)?)?;
    let height = dim(header_token(r)?)?;
    let scale_tok = header_token(r)?;
    let scale: f32 = scale_tok
        .parse()
        .map_err(|_| CodecError::BadHeader(format!("bad scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(CodecError::BadHeader(format!("bad scale {scale_tok:?}")));
    }
    check_dims(width, height)?;
    let little = scale < 0.0;
    let row_len = width * 3;
    let raw = read_bounded(r, row_len * height * 4)?;
    let mut pixels = vec![0.0f32; row_len * height];
    for (file_row, chunk) in raw.chunks_exact(row_len * 4).enumerate() {
        let dst = height - 1 - file_row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            if !v.is_finite() || v < 0.0 {
                return Err(CodecError::BadSample(v));
            }
            pixels[dst * row_len + i] = v;
        }
    }
    Ok(HdrImage {
        width,
        height,
        pixels,
    })
}

/// Writes a little-endian color PFM (scale `-1`).
pub fn write_pfm<W: Write>(img: &HdrImage, w: &mut W) -> Result<(), CodecError> {
    check_dims(img.width, img.height)?;
    write!(w, "PF\n{} {}\n-1\n", img.width, img.height)?;
    let row_len = img.width * 3;
    let mut buf = Vec::with_capacity(row_len * 4);
    for row in img.pixels.chunks(row_len).rev() {
        buf.clear();
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}
