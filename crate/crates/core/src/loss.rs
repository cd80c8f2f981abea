//! Hybrid content loss, adversarial regularizer and the two alternating objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Discriminator, Generator, NetIds, Network};
use crate::tensor::{Mode, Scalar, Tape, Tensor, VarId};

/// How `‖a − b‖²` is reduced over one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum of squares per image, averaged over the batch.
    #[default]
    PerImageSum,
    /// Mean over every element.
    PerPixelMean,
}

/// Which reading of the discriminator output the regularizer assumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvOrientation {
    /// `E[log(1 − D(H))] + E[log D(G(L))]`, D = probability of "generated".
    #[default]
    ProbGenerated,
    /// `E[log D(H)] + E[log(1 − D(G(L)))]`, D = probability of "real".
    ProbReal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub clamp_eps: f64,
    pub reduction: Reduction,
    pub orientation: AdvOrientation,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1e4,
            alpha: 1e5,
            clamp_eps: 1e-7,
            reduction: Reduction::PerImageSum,
            orientation: AdvOrientation::ProbGenerated,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::InvalidArgument(format!("clamp_eps must lie in (0, 0.5), got {}", self.clamp_eps)));
        }
        Ok(())
    }
}

/// Squared error between `pred` and `target` under `reduction`.
pub fn mse<T: Scalar>(tape: &mut Tape<T>, pred: VarId, target: VarId, reduction: Reduction) -> Result<VarId> {
    let d = tape.sub(pred, target).map_err(|_| {
        Error::shape("mse", format!("pred {} vs target {}", tape.shape(pred), tape.shape(target)))
    })?;
    let sq = tape.square(d);
    Ok(match reduction {
        Reduction::PerImageSum => {
            let n = tape.shape(pred).n;
            let s = tape.sum(sq);
            tape.scale(s, T::one() / T::of(n as f64))
        }
        Reduction::PerPixelMean => tape.mean(sq),
    })
}

/// `mse(pred, target) + α·(mse(dx pred, dx target) + mse(dy pred, dy target))`.
pub fn content_loss<T: Scalar>(tape: &mut Tape<T>, pred: VarId, target: VarId, w: &LossWeights) -> Result<VarId> {
    let base = mse(tape, pred, target, w.reduction)?;
    if w.alpha == 0.0 {
        return Ok(base);
    }
    let (px, tx) = (tape.diff_x(pred)?, tape.diff_x(target)?);
    let (py, ty) = (tape.diff_y(pred)?, tape.diff_y(target)?);
    let ex = mse(tape, px, tx, w.reduction)?;
    let ey = mse(tape, py, ty, w.reduction)?;
    let grad_term = tape.add(ex, ey)?;
    let grad_term = tape.scale(grad_term, T::of(w.alpha));
    tape.add(base, grad_term)
}

fn mean_log<T: Scalar>(tape: &mut Tape<T>, p: VarId, complement: bool, eps: T) -> Result<VarId> {
    let c = tape.clamp(p, eps, T::one() - eps);
    let arg = if complement {
        let neg = tape.scale(c, -T::one());
        tape.add_scalar(neg, T::one())
    } else {
        c
    };
    let l = tape.ln(arg)?;
    Ok(tape.mean(l))
}

/// Adversarial regularizer over per-image discriminator outputs.
///
/// Probabilities are clamped to `[eps, 1 − eps]` before the logarithms.
pub fn adv_regularizer<T: Scalar>(
    tape: &mut Tape<T>,
    d_real: VarId,
    d_fake: VarId,
    clamp_eps: f64,
    orientation: AdvOrientation,
) -> Result<VarId> {
    for id in [d_real, d_fake] {
        let (lo, hi) = tape.value(id).min_max();
        if !(lo >= T::zero() && hi <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "discriminator outputs must lie in [0, 1], got range [{lo}, {hi}]"
            )));
        }
    }
    let eps = T::of(clamp_eps);
    let (real_c, fake_c) = match orientation {
        AdvOrientation::ProbGenerated => (true, false),
        AdvOrientation::ProbReal => (false, true),
    };
    let r = mean_log(tape, d_real, real_c, eps)?;
    let f = mean_log(tape, d_fake, fake_c, eps)?;
    tape.add(r, f)
}

/// Runs the discriminator once over `[real; fake]` so both halves share batch
/// statistics, and returns `(d_real, d_fake)`.
pub fn discriminate<T: Scalar>(
    tape: &mut Tape<T>,
    d: &mut Discriminator<T>,
    ids: &NetIds,
    real: VarId,
    fake: VarId,
    mode: Mode,
) -> Result<(VarId, VarId)> {
    let n_real = tape.shape(real).n;
    let n_fake = tape.shape(fake).n;
    let joint = tape.concat_batch(real, fake)?;
    let out = d.forward(tape, ids, joint, mode)?;
    Ok((tape.slice_batch(out, 0, n_real)?, tape.slice_batch(out, n_real, n_fake)?))
}

/// Handles into a recorded generator objective.
#[derive(Debug)]
pub struct GeneratorObjective {
    pub total: VarId,
    pub content: VarId,
    pub adv: Option<VarId>,
    pub fake: VarId,
    pub gen_ids: NetIds,
}

/// `λ·content(G(L), H) + R(D(H), D(G(L)))` with the discriminator frozen.
/// Passing no discriminator drops the regularizer.
pub fn generator_objective<T: Scalar>(
    tape: &mut Tape<T>,
    g: &mut Generator<T>,
    d: Option<&mut Discriminator<T>>,
    ldr: &Tensor<T>,
    hdr: &Tensor<T>,
    w: &LossWeights,
) -> Result<GeneratorObjective> {
    let gen_ids = g.register(tape, true);
    let l = tape.constant(ldr.clone());
    let h = tape.constant(hdr.clone());
    let fake = g.forward(tape, &gen_ids, l, Mode::Train)?;
    let content = content_loss(tape, fake, h, w)?;
    let weighted = tape.scale(content, T::of(w.lambda));
    let (total, adv) = match d {
        Some(d) => {
            let d_ids = d.register(tape, false);
            let (dr, df) = discriminate(tape, d, &d_ids, h, fake, Mode::TrainFrozen)?;
            let adv = adv_regularizer(tape, dr, df, w.clamp_eps, w.orientation)?;
            (tape.add(weighted, adv)?, Some(adv))
        }
        None => (weighted, None),
    };
    Ok(GeneratorObjective {
        total,
        content,
        adv,
        fake,
        gen_ids,
    })
}

#[derive(Debug)]
pub struct DiscriminatorObjective {
    pub value: VarId,
    pub d_real: VarId,
    pub d_fake: VarId,
    pub disc_ids: NetIds,
}

/// The regularizer as a function of the discriminator parameters only; the
/// generator output enters as a constant.
pub fn discriminator_objective<T: Scalar>(
    tape: &mut Tape<T>,
    d: &mut Discriminator<T>,
    g: &mut Generator<T>,
    ldr: &Tensor<T>,
    hdr: &Tensor<T>,
    w: &LossWeights,
) -> Result<DiscriminatorObjective> {
    let fake = generate(g, ldr, Mode::TrainFrozen)?;
    discriminator_objective_on(tape, d, &fake, hdr, w)
}

/// Same as [`discriminator_objective`] with a precomputed generator output.
pub fn discriminator_objective_on<T: Scalar>(
    tape: &mut Tape<T>,
    d: &mut Discriminator<T>,
    fake: &Tensor<T>,
    hdr: &Tensor<T>,
    w: &LossWeights,
) -> Result<DiscriminatorObjective> {
    let disc_ids = d.register(tape, true);
    let h = tape.constant(hdr.clone());
    let f = tape.constant(fake.clone());
    let (d_real, d_fake) = discriminate(tape, d, &disc_ids, h, f, Mode::Train)?;
    let value = adv_regularizer(tape, d_real, d_fake, w.clamp_eps, w.orientation)?;
    Ok(DiscriminatorObjective {
        value,
        d_real,
        d_fake,
        disc_ids,
    })
}

/// Generator output without gradient tracking.
pub fn generate<T: Scalar>(g: &mut Generator<T>, ldr: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let ids = g.register(&mut tape, false);
    let l = tape.constant(ldr.clone());
    let y = g.forward(&mut tape, &ids, l, mode)?;
    Ok(tape.value(y).clone())
}

/// Scalar value of `content_loss` on plain tensors.
pub fn content_loss_value<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, w: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let c = content_loss(&mut tape, p, t, w)?;
    Ok(tape.value(c).item().as_f64())
}

/// Scalar value of `adv_regularizer` on plain tensors.
pub fn adv_regularizer_value<T: Scalar>(
    d_real: &Tensor<T>,
    d_fake: &Tensor<T>,
    clamp_eps: f64,
    orientation: AdvOrientation,
) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(d_real.clone());
    let f = tape.constant(d_fake.clone());
    let v = adv_regularizer(&mut tape, r, f, clamp_eps, orientation)?;
    Ok(tape.value(v).item().as_f64())
}
