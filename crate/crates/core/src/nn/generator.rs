use super::{seeded_rng, Activation, Layer, LayerKind, LayerSpec, NetIds, Network, WidthMultiplier, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Mode, Scalar, Shape, Tape, Tensor, VarId};

pub const GENERATOR_DEPTH: usize = 5;
/// Spatial dimensions of generator inputs must be multiples of this.
pub const GENERATOR_DIVISOR: usize = 1 << GENERATOR_DEPTH;

/// Channel plan of the encoder-decoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorPlan {
    pub k: usize,
    pub s: usize,
    pub encoder: [usize; GENERATOR_DEPTH],
    /// Widths of the first four decoder layers; the last always emits RGB.
    pub decoder: [usize; GENERATOR_DEPTH - 1],
}

impl Default for GeneratorPlan {
    fn default() -> Self {
        GeneratorPlan {
            k: 4,
            s: 2,
            encoder: [64, 128, 256, 512, 512],
            decoder: [512, 256, 128, 64],
        }
    }
}

impl GeneratorPlan {
    pub fn scaled(width: WidthMultiplier) -> Result<Self> {
        let base = GeneratorPlan::default();
        let mut plan = base.clone();
        for (dst, &n) in plan.encoder.iter_mut().zip(&base.encoder) {
            *dst = width.apply(n)?;
        }
        for (dst, &n) in plan.decoder.iter_mut().zip(&base.decoder) {
            *dst = width.apply(n)?;
        }
        Ok(plan)
    }

    /// The ten layer specs with their input channel counts.
    ///
    /// BatchNorm is omitted on the first encoder layer, the innermost encoder
    /// layer (its output is 1x1 for the smallest admissible input) and the
    /// sigmoid output layer.
    pub fn layers(&self) -> Vec<(LayerSpec, usize)> {
        let (k, s) = (self.k, self.s);
        let act = Activation::LeakyRelu;
        let mut out = Vec::with_capacity(2 * GENERATOR_DEPTH);
        let mut in_ch = 3;
        for (i, &n) in self.encoder.iter().enumerate() {
            let norm = i != 0 && i != GENERATOR_DEPTH - 1;
            out.push((LayerSpec::conv(k, n, s, norm, act), in_ch));
            in_ch = n;
        }
        for (j, &n) in self.decoder.iter().enumerate() {
            let skip = if j == 0 { 0 } else { self.encoder[GENERATOR_DEPTH - 1 - j] };
            out.push((LayerSpec::deconv(k, n, s, true, act), in_ch + skip));
            in_ch = n;
        }
        out.push((
            LayerSpec::deconv(k, 3, s, false, Activation::Sigmoid),
            in_ch + self.encoder[0],
        ));
        out
    }
}

/// U-Net generator: five strided convolutions down, five transposed
/// convolutions up, each decoder level after the first also fed the
/// encoder output of matching resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    layers: Vec<Layer<T>>,
    slope: f64,
}

/// Builds the default plan scaled by `width`, initialized from `seed`.
pub fn build_generator<T: Scalar>(width: WidthMultiplier, seed: u64) -> Result<Generator<T>> {
    Generator::from_plan(&GeneratorPlan::scaled(width)?, seed)
}

impl<T: Scalar> Generator<T> {
    pub fn from_plan(plan: &GeneratorPlan, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let layers = plan
            .layers()
            .into_iter()
            .map(|(spec, in_ch)| Layer::init(spec, in_ch, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Generator {
            layers,
            slope: DEFAULT_LEAKY_SLOPE,
        })
    }

    /// Reassembles a generator from layers, checking the U-Net wiring.
    pub fn from_layers(layers: Vec<Layer<T>>, slope: f64) -> Result<Self> {
        let bad = |msg: String| Err(Error::ParamFile(format!("not a generator: {msg}")));
        if layers.len() != 2 * GENERATOR_DEPTH {
            return bad(format!("{} layers, expected {}", layers.len(), 2 * GENERATOR_DEPTH));
        }
        let mut expect_in = 3;
        for (i, l) in layers.iter().enumerate() {
            let want_kind = if i < GENERATOR_DEPTH { LayerKind::Conv } else { LayerKind::Deconv };
            if l.spec.kind != want_kind {
                return bad(format!("layer {i} is {:?}", l.spec.kind));
            }
            let skip = match i {
                0..=GENERATOR_DEPTH => 0,
                _ => layers[2 * GENERATOR_DEPTH - 1 - i].spec.n,
            };
            if l.in_ch != expect_in + skip {
                return bad(format!("layer {i} takes {} channels, wiring gives {}", l.in_ch, expect_in + skip));
            }
            expect_in = l.spec.n;
        }
        let last = &layers[2 * GENERATOR_DEPTH - 1].spec;
        if last.n != 3 || last.act != Activation::Sigmoid || last.norm {
            return bad("output layer must be a 3-channel sigmoid without normalization".into());
        }
        Ok(Generator { layers, slope })
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            layers: self.layers.iter().map(Layer::cast).collect(),
            slope: self.slope,
        }
    }

    pub fn set_leaky_slope(&mut self, slope: f64) {
        self.slope = slope;
    }

    pub fn check_input(shape: Shape) -> Result<()> {
        if shape.c != 3 {
            return Err(Error::shape("generator", format!("expects 3 input channels, got {}", shape)));
        }
        if shape.h == 0 || shape.w == 0 || shape.h % GENERATOR_DIVISOR != 0 || shape.w % GENERATOR_DIVISOR != 0 {
            return Err(Error::shape(
                "generator",
                format!(
                    "input height and width must be divisible by {GENERATOR_DIVISOR}, got {}x{}",
                    shape.h, shape.w
                ),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` using previously registered parameters.
    pub fn forward(&mut self, tape: &mut Tape<T>, ids: &NetIds, input: VarId, mode: Mode) -> Result<VarId> {
        Self::check_input(tape.shape(input))?;
        let slope = T::of(self.slope);
        let (enc, dec) = self.layers.split_at_mut(GENERATOR_DEPTH);
        let mut skips = Vec::with_capacity(GENERATOR_DEPTH);
        let mut x = input;
        for (layer, lid) in enc.iter_mut().zip(&ids.layers) {
            x = layer.forward(tape, lid, x, mode, slope)?;
            skips.push(x);
        }
        for (j, (layer, lid)) in dec.iter_mut().zip(&ids.layers[GENERATOR_DEPTH..]).enumerate() {
            if j > 0 {
                x = tape.concat_channels(x, skips[GENERATOR_DEPTH - 1 - j])?;
            }
            x = layer.forward(tape, lid, x, mode, slope)?;
        }
        Ok(x)
    }

    /// Evaluation-mode forward pass without recording gradients.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let ids = scratch.register(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = scratch.forward(&mut tape, &ids, x, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Scalar> Network<T> for Generator<T> {
    fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    fn leaky_slope(&self) -> f64 {
        self.slope
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_plan_quarters_every_width() {
        let plan = GeneratorPlan::scaled(WidthMultiplier::DESK).unwrap();
        assert_eq!(plan.encoder, [16, 32, 64, 128, 128]);
        assert_eq!(plan.decoder, [128, 64, 32, 16]);
    }

    #[test]
    fn ten_layers_with_sigmoid_output() {
        let g = build_generator::<f32>(WidthMultiplier::DESK, 1).unwrap();
        let kinds: Vec<_> = g.layers().iter().map(|l| l.spec.kind).collect();
        assert_eq!(kinds.iter().filter(|k| **k == LayerKind::Conv).count(), 5);
        assert_eq!(kinds.iter().filter(|k| **k == LayerKind::Deconv).count(), 5);
        let last = g.layers().last().unwrap().spec;
        assert_eq!((last.act, last.norm, last.n), (Activation::Sigmoid, false, 3));
        assert!(Generator::from_layers(g.layers().to_vec(), 0.2).is_ok());
    }

    #[test]
    fn shape_preserved_and_range_open_unit() {
        let mut g = build_generator::<f32>(WidthMultiplier::DESK, 3).unwrap();
        let x = Tensor::from_fn([2, 3, 32, 32], |i| ((i * 7919) % 1000) as f32 / 1000.0);
        let mut tape = Tape::new();
        let ids = g.register(&mut tape, true);
        let xi = tape.constant(x.clone());
        let y = g.forward(&mut tape, &ids, xi, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), Shape::new(2, 3, 32, 32));
        let (lo, hi) = tape.value(y).min_max();
        assert!(lo > 0.0 && hi < 1.0);
        assert_eq!(g.infer(&x).unwrap().shape(), Shape::new(2, 3, 32, 32));
    }

    #[test]
    fn indivisible_input_names_divisor() {
        let g = build_generator::<f32>(WidthMultiplier::DESK, 3).unwrap();
        let err = g.infer(&Tensor::zeros([1, 3, 48, 64])).unwrap_err().to_string();
        assert!(err.contains("divisible by 32"), "{err}");
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_generator::<f32>(WidthMultiplier::DESK, 11).unwrap();
        let b = build_generator::<f32>(WidthMultiplier::DESK, 11).unwrap();
        let c = build_generator::<f32>(WidthMultiplier::DESK, 12).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }
}
