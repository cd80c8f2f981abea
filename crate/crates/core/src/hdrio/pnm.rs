use std::io::{BufRead, Write};

use super::{check_dims, header_token, read_bounded, CodecError, LdrImage};

/// Sample depth of a binary PPM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PnmDepth {
    Eight,
    Sixteen,
}

impl PnmDepth {
    pub fn maxval(self) -> u32 {
        match self {
            PnmDepth::Eight => 255,
            PnmDepth::Sixteen => 65535,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            8 => Some(PnmDepth::Eight),
            16 => Some(PnmDepth::Sixteen),
            _ => None,
        }
    }
}

/// Reads a binary `P6` image; code `v` maps to `v / maxval`.
pub fn read_pnm<R: BufRead>(r: &mut R) -> Result<LdrImage, CodecError> {
    match header_token(r)?.as_str() {
        "P6" => {}
        "P3" => return Err(CodecError::Unsupported("ASCII PPM (P3)".into())),
        other => return Err(CodecError::BadHeader(format!("not a binary PPM (magic {other:?})"))),
    }
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| CodecError::BadHeader(format!("bad header number {s:?}")))
    };
    let width = num(header_token(r)?)?;
    let height = num(header_token(r)?)?;
    let maxval = num(header_token(r)?)?;
    let depth = match maxval {
        255 => PnmDepth::Eight,
        65535 => PnmDepth::Sixteen,
        m => return Err(CodecError::Unsupported(format!("maxval {m} (only 255 and 65535)"))),
    };
    check_dims(width, height)?;
    let n = width * height * 3;
    let max = maxval as f32;
    let pixels = match depth {
        PnmDepth::Eight => read_bounded(r, n)?.into_iter().map(|v| v as f32 / max).collect(),
        PnmDepth::Sixteen => read_bounded(r, n * 2)?
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / max)
            .collect(),
    };
    Ok(LdrImage {
        width,
        height,
        pixels,
    })
}

/// Quantizes with round-half-away-from-zero and writes a binary `P6`.
pub fn write_pnm<W: Write>(img: &LdrImage, depth: PnmDepth, w: &mut W) -> Result<(), CodecError> {
    check_dims(img.width, img.height)?;
    let max = depth.maxval();
    write!(w, "P6\n{} {}\n{}\n", img.width, img.height, max)?;
    let code = |v: f32| (v.clamp(0.0, 1.0) * max as f32).round() as u32;
    let bytes: Vec<u8> = match depth {
        PnmDepth::Eight => img.pixels.iter().map(|&v| code(v) as u8).collect(),
        PnmDepth::Sixteen => img
            .pixels
            .iter()
            .flat_map(|&v| (code(v) as u16).to_be_bytes())
            .collect(),
    };
    w.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_rounds_away_from_zero_at_eight_bits() {
        let img = LdrImage {
            width: 1,
            height: 1,
            pixels: vec![0.5, 1.0, 0.0],
        };
        let mut buf = Vec::new();
        write_pnm(&img, PnmDepth::Eight, &mut buf).unwrap();
        assert_eq!(&buf[buf.len() - 3..], &[128, 255, 0]);
        let back = read_pnm(&mut &buf[..]).unwrap();
        assert_eq!(back.pixels, vec![128.0 / 255.0, 1.0, 0.0]);
        assert!((back.pixels[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn rejects_ascii_and_odd_maxval() {
        assert!(matches!(
            read_pnm(&mut &b"P3\n1 1\n255\n0 0 0\n"[..]),
            Err(CodecError::Unsupported(_))
        ));
        assert!(matches!(
            read_pnm(&mut &b"P6\n1 1\n1023\n\0\0\0\0\0\0"[..]),
            Err(CodecError::Unsupported(_))
        ));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = read_pnm(&mut &b"P6\n# made by hand\n1 1\n255\n\xff\x00\x80"[..]).unwrap();
        assert_eq!(img.pixels[0], 1.0);
    }
}
