use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Whether a step moves against (descent) or along (ascent) the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

/// Running mean of squared gradients, one accumulator per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState<T> {
    pub accum: Vec<Tensor<T>>,
}

impl<T: Scalar> RmsPropState<T> {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        RmsPropState {
            accum: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.accum.iter().all(|s| s.data().iter().all(|&v| v >= T::zero()))
    }
}

/// `s ← ρ·s + (1−ρ)·g²`, then `p ← p ∓ lr·g/√(s+ε)`.
///
/// Nothing is modified when the gradient holds a non-finite value.
pub fn rmsprop_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    accum: &mut Tensor<T>,
    lr: f64,
    rho: f64,
    eps: f64,
    direction: Direction,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != accum.shape() {
        return Err(Error::shape(
            "rmsprop",
            format!("param {}, grad {}, accumulator {}", param.shape(), grad.shape(), accum.shape()),
        ));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            iter: 0,
        });
    }
    let (rho, one_minus, eps) = (T::of(rho), T::of(1.0 - rho), T::of(eps));
    let lr = match direction {
        Direction::Descent => T::of(lr),
        Direction::Ascent => T::of(-lr),
    };
    for ((p, &g), s) in param.data_mut().iter_mut().zip(grad.data()).zip(accum.data_mut()) {
        *s = rho * *s + one_minus * g * g;
        *p = *p - lr * g / (*s + eps).sqrt();
    }
    Ok(())
}

/// `lr0 · factor^⌊iter / every⌋`.
pub fn step_decay(iter: usize, lr0: f64, factor: f64, every: usize) -> f64 {
    lr0 * factor.powi((iter / every.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn hand_evaluated_first_step() {
        let (mut p, mut s) = (one(0.0), one(0.0));
        rmsprop_step(&mut p, &one(1.0), &mut s, 0.1, 0.9, 1e-8, Direction::Descent).unwrap();
        assert!((s.item() - 0.1).abs() < 1e-15);
        assert!((p.item() + 0.316228).abs() < 1e-6, "{}", p.item());
    }

    #[test]
    fn zero_gradient_only_decays_accumulator() {
        let (mut p, mut s) = (one(0.7), one(0.5));
        rmsprop_step(&mut p, &one(0.0), &mut s, 0.1, 0.9, 1e-8, Direction::Descent).unwrap();
        assert_eq!(p.item(), 0.7);
        assert!((s.item() - 0.45).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let (mut p, mut s) = (one(0.0), one(0.0));
        let mut last = 0.0;
        for _ in 0..400 {
            let before = p.item();
            rmsprop_step(&mut p, &one(-3.0), &mut s, 0.01, 0.9, 1e-8, Direction::Descent).unwrap();
            last = p.item() - before;
        }
        assert!((last - 0.01).abs() < 1e-9, "{last}");
    }

    #[test]
    fn ascent_and_non_finite() {
        let (mut p, mut s) = (one(0.0), one(0.0));
        rmsprop_step(&mut p, &one(1.0), &mut s, 0.1, 0.9, 1e-8, Direction::Ascent).unwrap();
        assert!(p.item() > 0.0);
        let before = (p.clone(), s.clone());
        assert!(rmsprop_step(&mut p, &one(f64::NAN), &mut s, 0.1, 0.9, 1e-8, Direction::Descent).is_err());
        assert_eq!((p, s), before);
    }

    #[test]
    fn schedule() {
        assert_eq!(step_decay(0, 1e-4, 0.5, 500), 1e-4);
        assert_eq!(step_decay(499, 1e-4, 0.5, 500), 1e-4);
        assert_eq!(step_decay(500, 1e-4, 0.5, 500), 5e-5);
        assert_eq!(step_decay(1_000_000, 1e-4, 1.0, 500), 1e-4);
    }
}
