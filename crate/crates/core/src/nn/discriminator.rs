use super::{seeded_rng, Activation, Layer, LayerKind, LayerSpec, NetIds, Network, WidthMultiplier, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Mode, Scalar, Tape, Tensor, VarId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorPlan {
    pub k: usize,
    pub s: usize,
    pub convs: Vec<usize>,
    /// Hidden fully connected widths; a final width-1 sigmoid layer is appended.
    pub hidden: Vec<usize>,
}

impl Default for DiscriminatorPlan {
    fn default() -> Self {
        DiscriminatorPlan {
            k: 4,
            s: 2,
            convs: vec![64, 128, 256, 512],
            hidden: vec![1024],
        }
    }
}

impl DiscriminatorPlan {
    pub fn scaled(width: WidthMultiplier) -> Result<Self> {
        let base = DiscriminatorPlan::default();
        Ok(DiscriminatorPlan {
            convs: base.convs.iter().map(|&n| width.apply(n)).collect::<Result<_>>()?,
            hidden: base.hidden.iter().map(|&n| width.apply(n)).collect::<Result<_>>()?,
            ..base
        })
    }

    pub fn layers(&self) -> Vec<(LayerSpec, usize)> {
        let mut out = Vec::new();
        let mut in_ch = 3;
        for &n in &self.convs {
            out.push((LayerSpec::conv(self.k, n, self.s, true, Activation::LeakyRelu), in_ch));
            in_ch = n;
        }
        for &n in &self.hidden {
            out.push((LayerSpec::fc(n, Activation::LeakyRelu), in_ch));
            in_ch = n;
        }
        out.push((LayerSpec::fc(1, Activation::Sigmoid), in_ch));
        out
    }
}

/// Convolution-BatchNorm-LeakyReLU stack, spatial average pooling, then fully
/// connected layers ending in one sigmoid unit.
///
/// The output is read as the probability that the input image was generated.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    layers: Vec<Layer<T>>,
    slope: f64,
    evaluations: u64,
}

pub fn build_discriminator<T: Scalar>(width: WidthMultiplier, seed: u64) -> Result<Discriminator<T>> {
    Discriminator::from_plan(&DiscriminatorPlan::scaled(width)?, seed)
}

impl<T: Scalar> Discriminator<T> {
    pub fn from_plan(plan: &DiscriminatorPlan, seed: u64) -> Result<Self> {
        if plan.convs.is_empty() {
            return Err(Error::InvalidArgument("discriminator needs at least one conv layer".into()));
        }
        let mut rng = seeded_rng(seed);
        let layers = plan
            .layers()
            .into_iter()
            .map(|(spec, in_ch)| Layer::init(spec, in_ch, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Discriminator {
            layers,
            slope: DEFAULT_LEAKY_SLOPE,
            evaluations: 0,
        })
    }

    pub fn from_layers(layers: Vec<Layer<T>>, slope: f64) -> Result<Self> {
        let bad = |msg: String| Err(Error::ParamFile(format!("not a discriminator: {msg}")));
        let convs = layers.iter().take_while(|l| l.spec.kind == LayerKind::Conv).count();
        if convs == 0 || convs == layers.len() {
            return bad("needs conv layers followed by fully connected layers".into());
        }
        let mut expect_in = 3;
        for (i, l) in layers.iter().enumerate() {
            if i >= convs && l.spec.kind != LayerKind::Fc {
                return bad(format!("layer {i} follows the fc stack but is {:?}", l.spec.kind));
            }
            if l.in_ch != expect_in {
                return bad(format!("layer {i} takes {} channels, wiring gives {}", l.in_ch, expect_in));
            }
            expect_in = l.spec.n;
        }
        let last = layers.last().expect("nonempty").spec;
        if last.n != 1 || last.act != Activation::Sigmoid {
            return bad("output must be a single sigmoid unit".into());
        }
        Ok(Discriminator {
            layers,
            slope,
            evaluations: 0,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            layers: self.layers.iter().map(Layer::cast).collect(),
            slope: self.slope,
            evaluations: self.evaluations,
        }
    }

    pub fn set_leaky_slope(&mut self, slope: f64) {
        self.slope = slope;
    }

    /// Number of forward passes run so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    /// Smallest square input the conv stack reduces to at least 1x1.
    pub fn min_input_size(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.spec.kind == LayerKind::Conv)
            .rev()
            .fold(1, |acc, l| (acc - 1) * l.spec.s + l.spec.k - 2 * l.spec.pad)
    }

    /// Records the forward pass; the result is `(n, 1, 1, 1)` in `(0, 1)`.
    pub fn forward(&mut self, tape: &mut Tape<T>, ids: &NetIds, input: VarId, mode: Mode) -> Result<VarId> {
        let s = tape.shape(input);
        let min = self.min_input_size();
        if s.c != 3 || s.h < min || s.w < min {
            return Err(Error::shape(
                "discriminator",
                format!("expects 3 channels and at least {min}x{min} pixels, got {s}"),
            ));
        }
        self.evaluations += 1;
        let slope = T::of(self.slope);
        let mut x = input;
        let mut pooled = false;
        for (layer, lid) in self.layers.iter_mut().zip(&ids.layers) {
            if layer.spec.kind == LayerKind::Fc && !pooled {
                x = tape.global_avg_pool(x);
                pooled = true;
            }
            x = layer.forward(tape, lid, x, mode, slope)?;
        }
        Ok(x)
    }

    /// Evaluation-mode probabilities without recording gradients.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let ids = scratch.register(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = scratch.forward(&mut tape, &ids, x, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Scalar> Network<T> for Discriminator<T> {
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
