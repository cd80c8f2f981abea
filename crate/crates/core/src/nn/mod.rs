//! Generator and discriminator networks built from tape primitives.

mod discriminator;
mod generator;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use discriminator::{build_discriminator, Discriminator, DiscriminatorPlan};
pub use generator::{build_generator, Generator, GeneratorPlan, GENERATOR_DEPTH, GENERATOR_DIVISOR};
pub use params::{load_discriminator, load_generator, FORMAT_VERSION, MAGIC};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, Mode, Scalar, Tape, Tensor, VarId};

/// Negative slope of every LeakyReLU unless configured otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
/// Standard deviation of the zero-mean Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Deconv,
    Fc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    None,
    LeakyRelu,
    Sigmoid,
}

/// Kernel size, output width and stride of one layer, plus its normalization
/// and activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub k: usize,
    pub n: usize,
    pub s: usize,
    pub pad: usize,
    pub norm: bool,
    pub act: Activation,
}

impl LayerSpec {
    pub fn conv(k: usize, n: usize, s: usize, norm: bool, act: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            k,
            n,
            s,
            pad: k.saturating_sub(s) / 2,
            norm,
            act,
        }
    }

    pub fn deconv(k: usize, n: usize, s: usize, norm: bool, act: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Deconv,
            ..LayerSpec::conv(k, n, s, norm, act)
        }
    }

    pub fn fc(n: usize, act: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Fc,
            k: 1,
            n,
            s: 1,
            pad: 0,
            norm: false,
            act,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 || self.s == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer needs k, n, s >= 1, got k={} n={} s={}",
                self.k, self.n, self.s
            )));
        }
        Ok(())
    }
}

/// Rational scale applied to the default channel plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WidthMultiplier {
    num: u32,
    den: u32,
}

impl WidthMultiplier {
    pub const FULL: WidthMultiplier = WidthMultiplier { num: 1, den: 1 };
    pub const DESK: WidthMultiplier = WidthMultiplier { num: 1, den: 4 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidArgument(format!(
                "width multiplier {num}/{den} must be positive"
            )));
        }
        Ok(WidthMultiplier { num, den })
    }

    /// Scaled channel count, rejecting plans that would leave a layer empty.
    pub fn apply(&self, n: usize) -> Result<usize> {
        let scaled = n * self.num as usize / self.den as usize;
        if scaled == 0 {
            return Err(Error::InvalidArgument(format!(
                "width multiplier {self} turns a {n}-channel layer into zero channels"
            )));
        }
        Ok(scaled)
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Default for WidthMultiplier {
    fn default() -> Self {
        WidthMultiplier::DESK
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for WidthMultiplier {
    type Err = Error;

    /// Accepts `a/b` or a finite decimal such as `0.25`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad width multiplier {s:?}"));
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            return WidthMultiplier::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 6 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u32.pow(frac.len() as u32);
        let int: u32 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u32 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int.checked_mul(den).and_then(|v| v.checked_add(frac_v)).ok_or_else(bad)?;
        let g = gcd(num, den).max(1);
        WidthMultiplier::new(num / g, den / g)
    }
}

impl serde::Serialize for WidthMultiplier {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for WidthMultiplier {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = WidthMultiplier;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a width multiplier such as \"1/4\" or 0.25")
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
                v.parse().map_err(E::custom)
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Self::Value, E> {
                self.visit_str(&v.to_string())
            }

            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<Self::Value, E> {
                self.visit_str(&v.to_string())
            }
        }
        d.deserialize_any(V)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub in_ch: usize,
    pub weight: Tensor<T>,
    /// Present only when the layer has no batch normalization.
    pub bias: Option<Tensor<T>>,
    pub bn: Option<BatchNormState<T>>,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub weight: VarId,
    pub bias: Option<VarId>,
    pub gamma: Option<VarId>,
    pub beta: Option<VarId>,
}

impl LayerIds {
    fn push_into(&self, out: &mut Vec<VarId>) {
        out.push(self.weight);
        out.extend(self.bias);
        out.extend(self.gamma);
        out.extend(self.beta);
    }
}

/// Parameter handles of a whole network, in declaration order.
#[derive(Clone, Debug)]
pub struct NetIds {
    pub layers: Vec<LayerIds>,
}

impl NetIds {
    /// Flattened in the same order as [`Network::trainable_mut`].
    pub fn flat(&self) -> Vec<VarId> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.push_into(&mut out);
        }
        out
    }
}

impl<T: Scalar> Layer<T> {
    pub fn weight_shape(spec: &LayerSpec, in_ch: usize) -> [usize; 4] {
        match spec.kind {
            LayerKind::Conv => [spec.n, in_ch, spec.k, spec.k],
            LayerKind::Deconv => [in_ch, spec.n, spec.k, spec.k],
            LayerKind::Fc => [spec.n, in_ch, 1, 1],
        }
    }

    /// Zero-mean Gaussian weights, zero biases, `gamma ~ N(1, std)`, `beta = 0`.
    pub fn init(spec: LayerSpec, in_ch: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let weight = Tensor::from_fn(Self::weight_shape(&spec, in_ch), |_| T::of(normal.sample(rng)));
        let (bias, bn) = if spec.norm {
            let mut bn = BatchNormState::new(spec.n);
            bn.gamma = Tensor::from_fn([spec.n, 1, 1, 1], |_| T::of(1.0 + normal.sample(rng)));
            (None, Some(bn))
        } else {
            (Some(Tensor::zeros([spec.n, 1, 1, 1])), None)
        };
        Ok(Layer {
            spec,
            in_ch,
            weight,
            bias,
            bn,
        })
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> LayerIds {
        LayerIds {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: self.bias.as_ref().map(|b| tape.leaf(b.clone(), trainable)),
            gamma: self.bn.as_ref().map(|b| tape.leaf(b.gamma.clone(), trainable)),
            beta: self.bn.as_ref().map(|b| tape.leaf(b.beta.clone(), trainable)),
        }
    }

    /// Linear map, optional batch norm, then activation.
    pub fn forward(&mut self, tape: &mut Tape<T>, ids: &LayerIds, x: VarId, mode: Mode, slope: T) -> Result<VarId> {
        let s = &self.spec;
        let y = match s.kind {
            LayerKind::Conv => tape.conv2d(x, ids.weight, ids.bias, s.s, s.pad)?,
            LayerKind::Deconv => tape.conv2d_transpose(x, ids.weight, ids.bias, s.s, s.pad)?,
            LayerKind::Fc => tape.linear(x, ids.weight, ids.bias)?,
        };
        let y = match (&mut self.bn, ids.gamma, ids.beta) {
            (Some(bn), Some(g), Some(b)) => {
                if mode == Mode::Train {
                    tape.batchnorm(y, g, b, bn, mode)?
                } else {
                    let mut tmp = bn.clone();
                    tape.batchnorm(y, g, b, &mut tmp, mode)?
                }
            }
            _ => y,
        };
        Ok(match s.act {
            Activation::None => y,
            Activation::LeakyRelu => tape.leaky_relu(y, slope),
            Activation::Sigmoid => tape.sigmoid(y),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            spec: self.spec,
            in_ch: self.in_ch,
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Tensor::cast),
            bn: self.bn.as_ref().map(BatchNormState::cast),
        }
    }
}

/// Shared parameter plumbing of both networks.
pub trait Network<T: Scalar> {
    fn layers(&self) -> &[Layer<T>];
    fn layers_mut(&mut self) -> &mut [Layer<T>];
    fn leaky_slope(&self) -> f64;

    /// Records every parameter on `tape` as a leaf.
    fn register(&self, tape: &mut Tape<T>, trainable: bool) -> NetIds {
        NetIds {
            layers: self.layers().iter().map(|l| l.register(tape, trainable)).collect(),
        }
    }

    /// Learnable tensors in the order of [`NetIds::flat`].
    fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for Layer { weight, bias, bn, .. } in self.layers_mut() {
            out.push(weight);
            out.extend(bias.as_mut());
            if let Some(bn) = bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| {
                l.weight.len()
                    + l.bias.as_ref().map_or(0, Tensor::len)
                    + l.bn.as_ref().map_or(0, |b| 2 * b.channels())
            })
            .sum()
    }

    /// FNV-1a over the bit patterns of all parameters and running statistics.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for l in self.layers() {
            l.weight.data().iter().for_each(|v| eat(v.as_f64()));
            if let Some(b) = &l.bias {
                b.data().iter().for_each(|v| eat(v.as_f64()));
            }
            if let Some(bn) = &l.bn {
                bn.gamma.data().iter().for_each(|v| eat(v.as_f64()));
                bn.beta.data().iter().for_each(|v| eat(v.as_f64()));
                bn.running_mean.iter().for_each(|v| eat(v.as_f64()));
                bn.running_var.iter().for_each(|v| eat(v.as_f64()));
            }
        }
        h
    }
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_multiplier_parsing() {
        assert_eq!("1/4".parse::<WidthMultiplier>().unwrap(), WidthMultiplier::DESK);
        assert_eq!("0.25".parse::<WidthMultiplier>().unwrap(), WidthMultiplier::DESK);
        assert_eq!("1".parse::<WidthMultiplier>().unwrap(), WidthMultiplier::FULL);
        assert!("0".parse::<WidthMultiplier>().is_err());
        assert!("-1/2".parse::<WidthMultiplier>().is_err());
        assert!("abc".parse::<WidthMultiplier>().is_err());
    }

    #[test]
    fn zero_channel_layers_rejected() {
        let m = WidthMultiplier::new(1, 128).unwrap();
        assert_eq!(m.apply(512).unwrap(), 4);
        assert!(m.apply(64).is_err());
    }
}
