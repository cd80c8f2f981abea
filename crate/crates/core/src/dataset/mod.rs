//! Training-pair synthesis from an HDR corpus and seeded batch sampling.

mod tmo;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use tmo::{luma, luminance, Reinhard, ToneMap, LOG_AVG_DELTA};

use crate::error::{Error, Result};
use crate::hdrio::{self, HdrImage, LdrImage, PnmDepth};
use crate::tensor::Tensor;

/// Reference peak luminance in nits mapped to 1.0 in normalized targets.
pub const DEFAULT_PEAK_NITS: f64 = 1000.0;
/// Codes per unit of the target quantization grid.
pub const TARGET_CODES: f64 = 1023.0;
pub const INDEX_FILE: &str = "index.jsonl";

/// Scales by `1/peak_nits`, clamps to `[0, 1]` and snaps to the 10-bit grid.
pub fn normalize_hdr_target(hdr: &HdrImage, peak_nits: f64) -> Result<LdrImage> {
    if !(peak_nits > 0.0 && peak_nits.is_finite()) {
        return Err(Error::InvalidArgument(format!("peak_nits must be positive, got {peak_nits}")));
    }
    let pixels = hdr
        .pixels
        .iter()
        .map(|&v| quantize_unit(v as f64 / peak_nits))
        .collect();
    Ok(LdrImage {
        width: hdr.width,
        height: hdr.height,
        pixels,
    })
}

fn quantize_unit(v: f64) -> f32 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    ((v * TARGET_CODES).round() / TARGET_CODES) as f32
}

/// Bilinear resampling of interleaved RGB with half-pixel-centered samples.
pub fn resize_rgb(width: usize, height: usize, pixels: &[f32], tw: usize, th: usize) -> Result<Vec<f32>> {
    if tw == 0 || th == 0 || width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {width}x{height} to {tw}x{th}"
        )));
    }
    if pixels.len() != width * height * 3 {
        return Err(Error::InvalidArgument("pixel buffer does not match dimensions".into()));
    }
    if (tw, th) == (width, height) {
        return Ok(pixels.to_vec());
    }
    let taps = |src_len: usize, dst_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = src_len as f64 / dst_len as f64;
        (0..dst_len)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(width, tw);
    let ys = taps(height, th);
    let mut out = vec![0.0f32; tw * th * 3];
    for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let p = |x: usize, y: usize| pixels[(y * width + x) * 3 + c];
                let top = p(x0, y0) + (p(x1, y0) - p(x0, y0)) * tx;
                let bottom = p(x0, y1) + (p(x1, y1) - p(x0, y1)) * tx;
                out[(oy * tw + ox) * 3 + c] = top + (bottom - top) * ty;
            }
        }
    }
    Ok(out)
}

pub fn resize_hdr(img: &HdrImage, tw: usize, th: usize) -> Result<HdrImage> {
    Ok(HdrImage {
        width: tw,
        height: th,
        pixels: resize_rgb(img.width, img.height, &img.pixels, tw, th)?,
    })
}

pub fn resize_ldr(img: &LdrImage, tw: usize, th: usize) -> Result<LdrImage> {
    Ok(LdrImage {
        width: tw,
        height: th,
        pixels: resize_rgb(img.width, img.height, &img.pixels, tw, th)?,
    })
}

/// Options of [`synth_pairs`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub peak_nits: f64,
    /// Nits per unit of the source files; `None` maps each image's maximum to `peak_nits`.
    pub nits_per_unit: Option<f64>,
    /// Output size; `None` keeps the source size.
    pub size: Option<usize>,
    pub tmo_key: f64,
    pub l_white: Option<f64>,
    pub ldr_bits: u32,
    pub split: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            peak_nits: DEFAULT_PEAK_NITS,
            nits_per_unit: None,
            size: Some(128),
            tmo_key: Reinhard::DEFAULT_KEY,
            l_white: None,
            ldr_bits: 8,
            split: "train".into(),
        }
    }
}

/// One training pair on disk. Paths are relative to the index directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub ldr: PathBuf,
    pub hdr: PathBuf,
    pub source: PathBuf,
    pub tmo: String,
    pub tmo_params: serde_json::Value,
    pub peak_nits: f64,
    pub nits_per_unit: f64,
    pub target_encoding: String,
    pub width: usize,
    pub height: usize,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub records: Vec<PairRecord>,
}

impl DatasetIndex {
    /// Reads `index.jsonl` from `path`, or `path` itself if it is a file.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(INDEX_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let reader = BufReader::new(fs::File::open(&file).map_err(|e| Error::from(e).at(&file))?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PairRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", file.display(), i + 1)))?;
            records.push(rec);
        }
        let index = DatasetIndex { root, records };
        index.check_ids()?;
        Ok(index)
    }

    pub fn save(&self) -> Result<PathBuf> {
        let file = self.root.join(INDEX_FILE);
        let mut w = BufWriter::new(fs::File::create(&file).map_err(|e| Error::from(e).at(&file))?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(file)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.id) {
                return Err(Error::Dataset(format!("duplicate id {:?}", r.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug)]
pub struct SynthReport {
    pub index: DatasetIndex,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Tone maps every decodable HDR file in `hdr_dir` into an LDR/target pair
/// under `out_dir` (`ldr/<id>.ppm`, `hdr/<id>.pfm`, `index.jsonl`).
pub fn synth_pairs(hdr_dir: &Path, out_dir: &Path, cfg: &SynthConfig) -> Result<SynthReport> {
    let depth = PnmDepth::from_bits(cfg.ldr_bits)
        .ok_or_else(|| Error::InvalidArgument(format!("ldr_bits must be 8 or 16, got {}", cfg.ldr_bits)))?;
    if let Some(s) = cfg.nits_per_unit {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!("nits_per_unit must be positive, got {s}")));
        }
    }
    if cfg.size == Some(0) {
        return Err(Error::InvalidArgument("size must be positive".into()));
    }
    let tmo = Reinhard::new(cfg.tmo_key, cfg.l_white)?;
    let mut sources: Vec<PathBuf> = fs::read_dir(hdr_dir)
        .map_err(|e| Error::from(e).at(hdr_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_hdr_source(p))
        .collect();
    sources.sort();

    fs::create_dir_all(out_dir.join("ldr"))?;
    fs::create_dir_all(out_dir.join("hdr"))?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut ids = HashSet::new();
    for src in sources {
        let id = src.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        if ids.contains(&id) {
            log::warn!("skipping {}: duplicate id {id:?}", src.display());
            skipped.push((src, format!("duplicate id {id:?}")));
            continue;
        }
        let img = match hdrio::read_image(&src) {
            Ok(img) if img.width > 0 && img.height > 0 => img,
            Ok(_) => {
                log::warn!("skipping {}: empty image", src.display());
                skipped.push((src, "empty image".into()));
                continue;
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", src.display());
                skipped.push((src, e.to_string()));
                continue;
            }
        };
        let img = match cfg.size {
            Some(s) => resize_hdr(&img, s, s)?,
            None => img,
        };
        let max = img.pixels.iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
        let nits_per_unit = match cfg.nits_per_unit {
            Some(s) => s,
            None if max > 0.0 => cfg.peak_nits / max,
            None => 1.0,
        };
        let nits = HdrImage {
            width: img.width,
            height: img.height,
            pixels: img.pixels.iter().map(|&v| (v as f64 * nits_per_unit) as f32).collect(),
        };
        let target = normalize_hdr_target(&nits, cfg.peak_nits)?;
        let ldr = tmo.apply(&nits)?;

        let rec = PairRecord {
            id: id.clone(),
            ldr: PathBuf::from("ldr").join(format!("{id}.ppm")),
            hdr: PathBuf::from("hdr").join(format!("{id}.pfm")),
            source: src.clone(),
            tmo: tmo.name().into(),
            tmo_params: tmo.params(),
            peak_nits: cfg.peak_nits,
            nits_per_unit,
            target_encoding: "linear/peak, 10-bit".into(),
            width: img.width,
            height: img.height,
            split: cfg.split.clone(),
        };
        hdrio::save_pnm(&ldr, depth, &out_dir.join(&rec.ldr))?;
        hdrio::save_pfm(&HdrImage::from(target), &out_dir.join(&rec.hdr))?;
        ids.insert(id);
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no decodable HDR images in {}", hdr_dir.display())));
    }
    let index = DatasetIndex {
        root: out_dir.to_path_buf(),
        records,
    };
    index.save()?;
    Ok(SynthReport { index, skipped })
}

fn is_hdr_source(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("hdr" | "pic" | "rgbe" | "pfm")
    )
}

/// One decoded pair; both tensors are `(1, 3, h, w)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub ldr: Tensor<f32>,
    pub hdr: Tensor<f32>,
}

/// Decoded pairs held in memory for sampling.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

impl PairSet {
    /// Decodes every record, checking that both sides agree in size and lie in `[0, 1]`.
    pub fn from_index(index: &DatasetIndex) -> Result<Self> {
        let mut pairs = Vec::with_capacity(index.len());
        for r in &index.records {
            let lp = index.root.join(&r.ldr);
            let hp = index.root.join(&r.hdr);
            let ldr = hdrio::read_image(&lp).map_err(|e| Error::from(e).at(&lp))?;
            let hdr = hdrio::read_image(&hp).map_err(|e| Error::from(e).at(&hp))?;
            pairs.push(Pair::new(&r.id, &ldr, &hdr)?);
        }
        Ok(PairSet { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Smallest height and width over all pairs.
    pub fn min_size(&self) -> Option<(usize, usize)> {
        self.pairs
            .iter()
            .map(|p| (p.ldr.shape().h, p.ldr.shape().w))
            .reduce(|a, b| (a.0.min(b.0), a.1.min(b.1)))
    }
}

impl Pair {
    pub fn new(id: &str, ldr: &HdrImage, hdr: &HdrImage) -> Result<Self> {
        if (ldr.width, ldr.height) != (hdr.width, hdr.height) {
            return Err(Error::Dataset(format!(
                "pair {id}: ldr is {}x{}, target is {}x{}",
                ldr.width, ldr.height, hdr.width, hdr.height
            )));
        }
        for (side, img) in [("ldr", ldr), ("target", hdr)] {
            if img.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Dataset(format!("pair {id}: {side} values outside [0, 1]")));
            }
        }
        Ok(Pair {
            id: id.into(),
            ldr: ldr.to_tensor(),
            hdr: hdr.to_tensor(),
        })
    }
}

/// Draws `batch` pairs uniformly with replacement and crops the same random
/// `patch`x`patch` window from both sides of each.
pub fn sample_batch(
    set: &PairSet,
    rng: &mut ChaCha8Rng,
    batch: usize,
    patch: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if set.is_empty() {
        return Err(Error::Dataset("cannot sample from an empty pair set".into()));
    }
    if batch == 0 || patch == 0 {
        return Err(Error::InvalidArgument("batch and patch size must be positive".into()));
    }
    let (min_h, min_w) = set.min_size().expect("nonempty");
    if patch > min_h || patch > min_w {
        return Err(Error::Dataset(format!(
            "patch {patch} exceeds the smallest pair ({min_w}x{min_h})"
        )));
    }
    let plane = patch * patch;
    let mut l = Vec::with_capacity(batch * 3 * plane);
    let mut h = Vec::with_capacity(batch * 3 * plane);
    for _ in 0..batch {
        let pair = &set.pairs[rng.random_range(0..set.len())];
        let s = pair.ldr.shape();
        let y0 = rng.random_range(0..=s.h - patch);
        let x0 = rng.random_range(0..=s.w - patch);
        for (src, dst) in [(&pair.ldr, &mut l), (&pair.hdr, &mut h)] {
            for c in 0..3 {
                for y in y0..y0 + patch {
                    let start = src.index(0, c, y, x0);
                    dst.extend_from_slice(&src.data()[start..start + patch]);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec([batch, 3, patch, patch], l)?,
        Tensor::from_vec([batch, 3, patch, patch], h)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn target_quantization_points() {
        let img = HdrImage::from_fn(3, 1, |x, _| {
            let v = [1000.0, 0.0, 500.0][x];
            [v, v, v]
        });
        let t = normalize_hdr_target(&img, 1000.0).unwrap();
        assert_eq!(t.pixels[0], 1.0);
        assert_eq!(t.pixels[3], 0.0);
        assert_eq!(t.pixels[6], (512.0 / 1023.0) as f32);
        let again = normalize_hdr_target(&HdrImage::from(t.clone()), 1.0).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn resize_reference_cases() {
        let ramp = resize_rgb(2, 1, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 4, 1).unwrap();
        let r: Vec<f32> = ramp.chunks(3).map(|p| p[0]).collect();
        assert_eq!(r, vec![0.0, 0.25, 0.75, 1.0]);
        let c = resize_rgb(2, 2, &[0.3; 12], 4, 4).unwrap();
        assert!(c.iter().all(|&v| v == 0.3));
        let src: Vec<f32> = (0..27).map(|i| i as f32 / 7.0).collect();
        assert_eq!(resize_rgb(3, 3, &src, 3, 3).unwrap(), src);
        assert!(resize_rgb(3, 3, &src, 0, 3).is_err());
    }

    fn toy_set(n: usize, size: usize) -> PairSet {
        PairSet {
            pairs: (0..n)
                .map(|i| {
                    let img = HdrImage::from_fn(size, size, |x, y| {
                        let v = ((x + y * 3 + i * 7) % 11) as f32 / 10.0;
                        [v, 1.0 - v, 0.5]
                    });
                    Pair::new(&format!("p{i}"), &img, &img).unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn sampling_is_seeded_and_colocated() {
        let set = toy_set(3, 40);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let x = sample_batch(&set, &mut a, 4, 32).unwrap();
        let y = sample_batch(&set, &mut b, 4, 32).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.0, x.1);
        assert!(sample_batch(&set, &mut a, 1, 64).is_err());
        assert!(sample_batch(&PairSet::default(), &mut a, 1, 32).is_err());
    }

    #[test]
    fn sampling_frequencies_are_uniform() {
        let set = PairSet {
            pairs: (0..4)
                .map(|i| {
                    let v = i as f32 / 4.0;
                    let img = HdrImage::from_fn(1, 1, |_, _| [v, v, v]);
                    Pair::new(&i.to_string(), &img, &img).unwrap()
                })
                .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let (l, _) = sample_batch(&set, &mut rng, 1, 1).unwrap();
            counts[(l.data()[0] * 4.0) as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.22..=0.28).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn mismatched_pair_rejected() {
        let a = HdrImage::new(4, 4);
        let b = HdrImage::new(4, 5);
        assert!(Pair::new("x", &a, &b).is_err());
        let mut c = HdrImage::new(4, 4);
        c.pixels[0] = 2.0;
        assert!(Pair::new("x", &a, &c).is_err());
    }
}
