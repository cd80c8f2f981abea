use serde_json::json;

use crate::error::{Error, Result};
use crate::hdrio::{HdrImage, LdrImage};

/// BT.2020 luma weights.
pub const LUMA: [f64; 3] = [0.2627, 0.6780, 0.0593];
/// Offset inside the logarithm of the log-average luminance.
pub const LOG_AVG_DELTA: f64 = 1e-6;

pub fn luma(rgb: [f32; 3]) -> f64 {
    LUMA[0] * rgb[0] as f64 + LUMA[1] * rgb[1] as f64 + LUMA[2] * rgb[2] as f64
}

/// Per-pixel BT.2020 luminance, row-major.
pub fn luminance(img: &HdrImage) -> Vec<f64> {
    img.pixels.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).collect()
}

/// A global tone mapping operator from linear HDR to display-referred `[0, 1]`.
pub trait ToneMap {
    fn name(&self) -> &'static str;
    fn params(&self) -> serde_json::Value;
    fn apply(&self, hdr: &HdrImage) -> Result<LdrImage>;
}

/// Reinhard's global photographic operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reinhard {
    pub key: f64,
    /// Smallest scaled luminance mapped to white; `None` uses the image maximum.
    pub l_white: Option<f64>,
}

impl Reinhard {
    pub const DEFAULT_KEY: f64 = 0.18;

    pub fn new(key: f64, l_white: Option<f64>) -> Result<Self> {
        if !(key > 0.0 && key.is_finite()) {
            return Err(Error::InvalidArgument(format!("key must be positive, got {key}")));
        }
        if let Some(w) = l_white {
            if !(w > 0.0) {
                return Err(Error::InvalidArgument(format!("l_white must be positive, got {w}")));
            }
        }
        Ok(Reinhard { key, l_white })
    }

    /// Display luminance for scaled luminance `l`.
    pub fn curve(l: f64, l_white: f64) -> f64 {
        if l <= 0.0 {
            return 0.0;
        }
        let knee = if l_white.is_infinite() { 0.0 } else { l / (l_white * l_white) };
        l * (1.0 + knee) / (1.0 + l)
    }
}

impl Default for Reinhard {
    fn default() -> Self {
        Reinhard {
            key: Self::DEFAULT_KEY,
            l_white: None,
        }
    }
}

impl ToneMap for Reinhard {
    fn name(&self) -> &'static str {
        "reinhard"
    }

    fn params(&self) -> serde_json::Value {
        json!({ "key": self.key, "l_white": self.l_white, "delta": LOG_AVG_DELTA })
    }

    fn apply(&self, hdr: &HdrImage) -> Result<LdrImage> {
        if hdr.width == 0 || hdr.height == 0 {
            return Err(Error::InvalidArgument("cannot tone map an empty image".into()));
        }
        let lum = luminance(hdr);
        let log_avg = (lum.iter().map(|&l| (LOG_AVG_DELTA + l.max(0.0)).ln()).sum::<f64>() / lum.len() as f64).exp();
        let scale = self.key / log_avg;
        let max_scaled = lum.iter().fold(0.0f64, |m, &l| m.max(l * scale));
        let mut out = LdrImage::new(hdr.width, hdr.height);
        if max_scaled <= 0.0 {
            return Ok(out);
        }
        let l_white = self.l_white.unwrap_or(max_scaled);
        for (i, &l_in) in lum.iter().enumerate() {
            if l_in <= 0.0 {
                continue;
            }
            let ratio = Reinhard::curve(l_in * scale, l_white) / l_in;
            for c in 0..3 {
                out.pixels[i * 3 + c] = (hdr.pixels[i * 3 + c] as f64 * ratio).clamp(0.0, 1.0) as f32;
            }
        }
        Ok(out)
    }
}
