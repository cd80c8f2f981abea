//! Image quality metrics: multi-exposure PSNR, SSIM on luma and log-PSNR.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::luma;
use crate::error::{Error, Result};
use crate::hdrio::{self, HdrImage};

/// Reported for identical inputs instead of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub stops: Vec<i32>,
    pub gamma: f64,
    pub log_floor: f64,
    /// Mean SSIM over R, G, B instead of SSIM on luma.
    pub ssim_per_channel: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            stops: vec![-2, -1, 0, 1, 2],
            gamma: 2.2,
            log_floor: 1e-4,
            ssim_per_channel: false,
        }
    }
}

fn same_size(op: &'static str, a: &HdrImage, b: &HdrImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) || a.pixels.len() != b.pixels.len() {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    if a.pixels.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty image")));
    }
    Ok(())
}

fn psnr_db(peak: f64, mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// PSNR accumulated over exposure-shifted, gamma-encoded 8-bit renderings.
pub fn mpsnr(pred: &HdrImage, reference: &HdrImage, stops: &[i32], gamma: f64) -> Result<f64> {
    same_size("mpsnr", pred, reference)?;
    if stops.is_empty() {
        return Err(Error::InvalidArgument("mpsnr needs at least one exposure stop".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let inv_gamma = 1.0 / gamma;
    let mut sum = 0.0;
    for &c in stops {
        let gain = 2f64.powi(c);
        let tone = |x: f32| (255.0 * (gain * x.max(0.0) as f64).powf(inv_gamma)).clamp(0.0, 255.0);
        for (&p, &r) in pred.pixels.iter().zip(&reference.pixels) {
            let d = tone(p) - tone(r);
            sum += d * d;
        }
    }
    let mse = sum / (stops.len() * pred.pixels.len()) as f64;
    Ok(psnr_db(255.0, mse))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of two single-channel images over all valid window positions.
pub fn ssim_plane(x: &[f64], y: &[f64], width: usize, height: usize) -> Result<f64> {
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {width}x{height}"
        )));
    }
    if x.len() != width * height || y.len() != x.len() {
        return Err(Error::shape("ssim", format!("planes of {} and {} values for {width}x{height}", x.len(), y.len())));
    }
    let g = gaussian_window();
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    // Separable filtering: rows first, then columns over the valid region.
    let filter_rows = |src: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; ow * height];
        for r in 0..height {
            let row = &src[r * width..(r + 1) * width];
            for c in 0..ow {
                out[r * ow + c] = g.iter().zip(&row[c..c + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
            }
        }
        out
    };
    let filter = |src: &[f64]| -> Vec<f64> {
        let rows = filter_rows(src);
        let mut out = vec![0.0; ow * oh];
        for r in 0..oh {
            for c in 0..ow {
                out[r * ow + c] = g.iter().enumerate().map(|(k, a)| a * rows[(r + k) * ow + c]).sum();
            }
        }
        out
    };
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, my) = (filter(x), filter(y));
    let (sxx, syy, sxy) = (filter(&xx), filter(&yy), filter(&xy));
    let mut total = 0.0;
    for i in 0..ow * oh {
        let vx = sxx[i] - mx[i] * mx[i];
        let vy = syy[i] - my[i] * my[i];
        let cov = sxy[i] - mx[i] * my[i];
        let num = (2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2);
        total += num / den;
    }
    Ok(total / (ow * oh) as f64)
}

/// SSIM on BT.2020 luma, or the mean over RGB channels when `per_channel`.
pub fn ssim(pred: &HdrImage, reference: &HdrImage, per_channel: bool) -> Result<f64> {
    same_size("ssim", pred, reference)?;
    let (w, h) = (pred.width, pred.height);
    if per_channel {
        let mut acc = 0.0;
        for c in 0..3 {
            let a: Vec<f64> = pred.pixels.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
            let b: Vec<f64> = reference.pixels.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
            acc += ssim_plane(&a, &b, w, h)?;
        }
        Ok(acc / 3.0)
    } else {
        let l = |img: &HdrImage| -> Vec<f64> { img.pixels.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).collect() };
        ssim_plane(&l(pred), &l(reference), w, h)
    }
}

/// PSNR between `log2(max(x, floor))` images with peak `log2(1/floor)`.
pub fn log_psnr(pred: &HdrImage, reference: &HdrImage, floor: f64) -> Result<f64> {
    same_size("log_psnr", pred, reference)?;
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::InvalidArgument(format!("log floor must lie in (0, 1), got {floor}")));
    }
    if pred.pixels.iter().chain(&reference.pixels).any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("log_psnr needs finite nonnegative values".into()));
    }
    let lg = |v: f32| (v as f64).max(floor).log2();
    let sum: f64 = pred
        .pixels
        .iter()
        .zip(&reference.pixels)
        .map(|(&p, &r)| {
            let d = lg(p) - lg(r);
            d * d
        })
        .sum();
    Ok(psnr_db((1.0 / floor).log2(), sum / pred.pixels.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub mpsnr_db: f64,
    pub ssim: f64,
    pub log_psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mpsnr_db: f64,
    pub ssim: f64,
    pub log_psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean: Aggregate,
    pub unmatched: Vec<String>,
    pub config: MetricsConfig,
}

pub fn evaluate_pair(pred: &HdrImage, reference: &HdrImage, id: &str, cfg: &MetricsConfig) -> Result<MetricsRow> {
    Ok(MetricsRow {
        id: id.into(),
        mpsnr_db: mpsnr(pred, reference, &cfg.stops, cfg.gamma)?,
        ssim: ssim(pred, reference, cfg.ssim_per_channel)?,
        log_psnr_db: log_psnr(pred, reference, cfg.log_floor)?,
    })
}

fn images_by_stem(dir: &Path, tag: &str, unmatched: &mut Vec<String>) -> Result<BTreeMap<String, PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::from(e).at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && hdrio::is_image_path(p))
        .collect();
    files.sort();
    let mut out = BTreeMap::new();
    for f in files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if out.contains_key(&stem) {
            unmatched.push(format!("{tag}/{}", f.file_name().unwrap_or_default().to_string_lossy()));
        } else {
            out.insert(stem, f);
        }
    }
    Ok(out)
}

/// Scores every prediction against the reference with the same file stem.
pub fn evaluate_dirs(pred_dir: &Path, ref_dir: &Path, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let mut unmatched = Vec::new();
    let preds = images_by_stem(pred_dir, "pred", &mut unmatched)?;
    let refs = images_by_stem(ref_dir, "ref", &mut unmatched)?;
    let mut rows = Vec::new();
    for (id, pp) in &preds {
        let Some(rp) = refs.get(id) else {
            unmatched.push(format!("pred/{}", pp.file_name().unwrap_or_default().to_string_lossy()));
            continue;
        };
        let p = hdrio::read_image(pp).map_err(|e| Error::from(e).at(pp))?;
        let r = hdrio::read_image(rp).map_err(|e| Error::from(e).at(rp))?;
        rows.push(evaluate_pair(&p, &r, id, cfg).map_err(|e| e.at(pp))?);
    }
    for (id, rp) in &refs {
        if !preds.contains_key(id) {
            unmatched.push(format!("ref/{}", rp.file_name().unwrap_or_default().to_string_lossy()));
        }
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!(
            "no matching images between {} and {}",
            pred_dir.display(),
            ref_dir.display()
        )));
    }
    let n = rows.len() as f64;
    let mean = Aggregate {
        count: rows.len(),
        mpsnr_db: rows.iter().map(|r| r.mpsnr_db).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        log_psnr_db: rows.iter().map(|r| r.log_psnr_db).sum::<f64>() / n,
    };
    Ok(MetricsReport {
        rows,
        mean,
        unmatched,
        config: cfg.clone(),
    })
}

pub const CSV_FILE: &str = "metrics.csv";
pub const JSON_FILE: &str = "metrics.json";

/// Writes `metrics.csv` (one row per pair) and `metrics.json` (aggregate,
/// unmatched files and configuration) into `out_dir`.
pub fn write_report(report: &MetricsReport, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(CSV_FILE);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Io(e.into()))?;
    for r in &report.rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    let json_path = out_dir.join(JSON_FILE);
    let summary = serde_json::json!({
        "mean": report.mean,
        "unmatched": report.unmatched,
        "config": report.config,
    });
    fs::write(&json_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok((csv_path, json_path))
}
