//! Parameter files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "ITMN"            magic
//! u32               format version
//! u8                network tag, b'G' or b'D'
//! f64               LeakyReLU slope
//! u32               layer count
//! per layer         u8 kind (0 conv, 1 deconv, 2 fc), u32 in_ch, u32 out_ch,
//!                   u32 k, u32 stride, u32 pad, u8 norm, u8 act (0 none, 1 leaky, 2 sigmoid)
//! per layer         f32 weight data, then bias (no norm) or
//!                   gamma, beta, running mean, running var (norm)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, Discriminator, Generator, Layer, LayerKind, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ITMN";
pub const FORMAT_VERSION: u32 = 1;

const TAG_GENERATOR: u8 = b'G';
const TAG_DISCRIMINATOR: u8 = b'D';

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ManifestEntry {
    spec: LayerSpec,
    in_ch: usize,
}

impl ManifestEntry {
    fn describe(&self) -> String {
        let s = &self.spec;
        format!(
            "{:?} in={} n={} k={} s={} pad={} norm={} act={:?}",
            s.kind, self.in_ch, s.n, s.k, s.s, s.pad, s.norm, s.act
        )
    }
}

fn kind_code(k: LayerKind) -> u8 {
    match k {
        LayerKind::Conv => 0,
        LayerKind::Deconv => 1,
        LayerKind::Fc => 2,
    }
}

fn act_code(a: Activation) -> u8 {
    match a {
        Activation::None => 0,
        Activation::LeakyRelu => 1,
        Activation::Sigmoid => 2,
    }
}

fn write_net<T: Scalar, W: Write>(w: &mut W, tag: u8, slope: f64, layers: &[Layer<T>]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[tag])?;
    w.write_all(&slope.to_le_bytes())?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        let s = &l.spec;
        w.write_all(&[kind_code(s.kind)])?;
        for v in [l.in_ch, s.n, s.k, s.s, s.pad] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&[s.norm as u8, act_code(s.act)])?;
    }
    let mut put = |vals: &mut dyn Iterator<Item = T>| -> Result<()> {
        let bytes: Vec<u8> = vals.flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect();
        w.write_all(&bytes)?;
        Ok(())
    };
    for l in layers {
        put(&mut l.weight.data().iter().copied())?;
        if let Some(b) = &l.bias {
            put(&mut b.data().iter().copied())?;
        }
        if let Some(bn) = &l.bn {
            put(&mut bn.gamma.data().iter().copied())?;
            put(&mut bn.beta.data().iter().copied())?;
            put(&mut bn.running_mean.iter().copied())?;
            put(&mut bn.running_var.iter().copied())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::ParamFile(format!("truncated while reading {what}")))?;
        Ok(b)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(what)?) as usize)
    }

    fn floats<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let mut buf = Vec::with_capacity(n.min(1 << 20) * 4);
        let got = (&mut self.inner).take(n as u64 * 4).read_to_end(&mut buf)?;
        if got != n * 4 {
            return Err(Error::ParamFile(format!("truncated while reading {what}")));
        }
        Ok(buf
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect())
    }
}

fn read_header<R: Read>(r: &mut Reader<R>) -> Result<(u8, f64, Vec<ManifestEntry>)> {
    if &r.bytes::<4>("magic")? != MAGIC {
        return Err(Error::ParamFile("bad magic, not an ITMN parameter file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::ParamFile(format!("unsupported format version {version}")));
    }
    let tag = r.u8("network tag")?;
    let slope = f64::from_le_bytes(r.bytes("slope")?);
    let count = r.u32("layer count")?;
    if count > 1024 {
        return Err(Error::ParamFile(format!("implausible layer count {count}")));
    }
    let mut manifest = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("manifest entry {i}");
        let kind = match r.u8(&what)? {
            0 => LayerKind::Conv,
            1 => LayerKind::Deconv,
            2 => LayerKind::Fc,
            k => return Err(Error::ParamFile(format!("layer {i}: unknown kind {k}"))),
        };
        let in_ch = r.u32(&what)?;
        let n = r.u32(&what)?;
        let k = r.u32(&what)?;
        let s = r.u32(&what)?;
        let pad = r.u32(&what)?;
        let norm = r.u8(&what)? != 0;
        let act = match r.u8(&what)? {
            0 => Activation::None,
            1 => Activation::LeakyRelu,
            2 => Activation::Sigmoid,
            a => return Err(Error::ParamFile(format!("layer {i}: unknown activation {a}"))),
        };
        let dims = [in_ch, n, k, s];
        if dims.iter().any(|&d| d == 0 || d > 1 << 16) {
            return Err(Error::ParamFile(format!("layer {i}: implausible dimensions {dims:?}")));
        }
        manifest.push(ManifestEntry {
            spec: LayerSpec {
                kind,
                k,
                n,
                s,
                pad,
                norm,
                act,
            },
            in_ch,
        });
    }
    Ok((tag, slope, manifest))
}

fn read_layers<T: Scalar, R: Read>(r: &mut Reader<R>, manifest: &[ManifestEntry]) -> Result<Vec<Layer<T>>> {
    let mut layers = Vec::with_capacity(manifest.len());
    for (i, e) in manifest.iter().enumerate() {
        let shape = Layer::<T>::weight_shape(&e.spec, e.in_ch);
        let numel = shape.iter().product();
        let what = format!("layer {i} parameters");
        let weight = Tensor::from_vec(shape, r.floats(numel, &what)?)?;
        let n = e.spec.n;
        let (bias, bn) = if e.spec.norm {
            let mut bn = BatchNormState::new(n);
            bn.gamma = Tensor::column(r.floats(n, &what)?);
            bn.beta = Tensor::column(r.floats(n, &what)?);
            bn.running_mean = r.floats(n, &what)?;
            bn.running_var = r.floats(n, &what)?;
            (None, Some(bn))
        } else {
            (Some(Tensor::column(r.floats(n, &what)?)), None)
        };
        layers.push(Layer {
            spec: e.spec,
            in_ch: e.in_ch,
            weight,
            bias,
            bn,
        });
    }
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::ParamFile("trailing bytes after parameter data".into()));
    }
    Ok(layers)
}

fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    Ok(Reader {
        inner: BufReader::new(File::open(path).map_err(|e| Error::from(e).at(path))?),
    })
}

fn save<T: Scalar>(path: &Path, tag: u8, slope: f64, layers: &[Layer<T>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::from(e).at(path))?);
    write_net(&mut w, tag, slope, layers)?;
    w.flush()?;
    Ok(())
}

fn load_layers<T: Scalar>(path: &Path, tag: u8) -> Result<(f64, Vec<Layer<T>>)> {
    let mut r = open(path)?;
    let (file_tag, slope, manifest) = read_header(&mut r)?;
    if file_tag != tag {
        return Err(Error::ParamFile(format!(
            "{} holds a {} network, expected {}",
            path.display(),
            file_tag as char,
            tag as char
        )));
    }
    Ok((slope, read_layers(&mut r, &manifest)?))
}

/// Loads into `layers` after checking the file's manifest matches them.
fn load_into<T: Scalar>(path: &Path, tag: u8, layers: &mut [Layer<T>]) -> Result<()> {
    let mut r = open(path)?;
    let (file_tag, _, manifest) = read_header(&mut r)?;
    if file_tag != tag {
        return Err(Error::ParamFile(format!("network tag {} does not match {}", file_tag as char, tag as char)));
    }
    let ours: Vec<ManifestEntry> = layers
        .iter()
        .map(|l| ManifestEntry {
            spec: l.spec,
            in_ch: l.in_ch,
        })
        .collect();
    if let Some(i) = (0..ours.len().max(manifest.len())).find(|&i| ours.get(i) != manifest.get(i)) {
        let fmt = |e: Option<&ManifestEntry>| e.map_or("nothing".to_string(), ManifestEntry::describe);
        return Err(Error::ParamFile(format!(
            "layer {i} mismatch: network has {}, file has {}",
            fmt(ours.get(i)),
            fmt(manifest.get(i))
        )));
    }
    let loaded = read_layers(&mut r, &manifest)?;
    for (dst, src) in layers.iter_mut().zip(loaded) {
        *dst = src;
    }
    Ok(())
}

impl<T: Scalar> Generator<T> {
    pub fn save_params(&self, path: &Path) -> Result<()> {
        save(path, TAG_GENERATOR, self.leaky_slope(), self.layers())
    }

    /// Overwrites parameters from `path`; the file must describe this exact architecture.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        load_into(path, TAG_GENERATOR, self.layers_mut())
    }
}

impl<T: Scalar> Discriminator<T> {
    pub fn save_params(&self, path: &Path) -> Result<()> {
        save(path, TAG_DISCRIMINATOR, self.leaky_slope(), self.layers())
    }

    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        load_into(path, TAG_DISCRIMINATOR, self.layers_mut())
    }
}

/// Reconstructs a generator from the architecture recorded in the file.
pub fn load_generator<T: Scalar>(path: &Path) -> Result<Generator<T>> {
    let (slope, layers) = load_layers(path, TAG_GENERATOR)?;
    Generator::from_layers(layers, slope)
}

pub fn load_discriminator<T: Scalar>(path: &Path) -> Result<Discriminator<T>> {
    let (slope, layers) = load_layers(path, TAG_DISCRIMINATOR)?;
    Discriminator::from_layers(layers, slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_discriminator, build_generator, WidthMultiplier};

    #[test]
    fn generator_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.itmn");
        let g = build_generator::<f32>(WidthMultiplier::DESK, 9).unwrap();
        g.save_params(&path).unwrap();
        let back = load_generator::<f32>(&path).unwrap();
        assert!(back == g, "roundtrip changed parameters");
        let mut other = build_generator::<f32>(WidthMultiplier::DESK, 10).unwrap();
        other.load_params(&path).unwrap();
        assert_eq!(other.checksum(), g.checksum());
    }

    #[test]
    fn mismatched_width_names_first_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.itmn");
        build_generator::<f32>(WidthMultiplier::DESK, 1).unwrap().save_params(&path).unwrap();
        let mut wide = build_generator::<f32>(WidthMultiplier::new(1, 2).unwrap(), 1).unwrap();
        let err = wide.load_params(&path).unwrap_err().to_string();
        assert!(err.contains("layer 0 mismatch"), "{err}");
    }

    #[test]
    fn truncated_and_wrong_kind_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.itmn");
        build_discriminator::<f32>(WidthMultiplier::DESK, 1).unwrap().save_params(&path).unwrap();
        assert!(load_generator::<f32>(&path).is_err());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_discriminator::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
