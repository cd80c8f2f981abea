use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Forward-pass regime for layers with batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with batch statistics but leave running averages untouched.
    /// Used when a network takes part in the other network's update step.
    TrainFrozen,
    /// Normalize with the running averages.
    Eval,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Weight of the old running value in the moving average.
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones([channels, 1, 1, 1]),
            beta: Tensor::zeros([channels, 1, 1, 1]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::of(Self::DEFAULT_MOMENTUM),
            eps: T::of(Self::DEFAULT_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
        BatchNormState {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: cv(&self.running_mean),
            running_var: cv(&self.running_var),
            momentum: U::of(self.momentum.as_f64()),
            eps: U::of(self.eps.as_f64()),
        }
    }
}

/// Values the backward pass needs: the normalized input and `1/sqrt(var+eps)`.
#[derive(Clone, Debug)]
pub(crate) struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

pub(crate) fn forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let s = x.shape();
    if s.c != state.channels() || gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::shape(
            "batchnorm",
            format!("input {} against {} normalized channels", s, state.channels()),
        ));
    }
    let count = s.n * s.plane();
    if mode.uses_batch_stats() && count < 2 {
        return Err(Error::InvalidArgument(format!(
            "batchnorm: batch statistics need more than one value per channel, got input {s}"
        )));
    }
    let plane = s.plane();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    let mut inv_std = Vec::with_capacity(s.c);
    let m = T::of(count as f64);
    for c in 0..s.c {
        let idx = |n: usize| (n * s.c + c) * plane;
        let (mean, var) = if mode.uses_batch_stats() {
            let mean = (0..s.n)
                .map(|n| x.data()[idx(n)..idx(n) + plane].iter().copied().sum::<T>())
                .sum::<T>()
                / m;
            let var = (0..s.n)
                .map(|n| {
                    x.data()[idx(n)..idx(n) + plane]
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>()
                })
                .sum::<T>()
                / m;
            if mode == Mode::Train {
                let keep = state.momentum;
                let take = T::one() - keep;
                state.running_mean[c] = keep * state.running_mean[c] + take * mean;
                state.running_var[c] = keep * state.running_var[c] + take * var;
            }
            (mean, var)
        } else {
            (state.running_mean[c], state.running_var[c])
        };
        let is = T::one() / (var + state.eps).sqrt();
        inv_std.push(is);
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for n in 0..s.n {
            let base = idx(n);
            for i in base..base + plane {
                let xh = (x.data()[i] - mean) * is;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((
        y,
        BnSaved {
            xhat,
            inv_std,
            batch_stats: mode.uses_batch_stats(),
        },
    ))
}

/// Returns gradients for (input, gamma, beta).
pub(crate) fn backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let plane = s.plane();
    let m = T::of((s.n * plane) as f64);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let idx = |n: usize| (n * s.c + c) * plane;
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for n in 0..s.n {
            for i in idx(n)..idx(n) + plane {
                sum_dy += dy.data()[i];
                sum_dy_xhat += dy.data()[i] * saved.xhat.data()[i];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma.data()[c] * saved.inv_std[c];
        for n in 0..s.n {
            for i in idx(n)..idx(n) + plane {
                dx.data_mut()[i] = if saved.batch_stats {
                    scale * (dy.data()[i] - sum_dy / m - saved.xhat.data()[i] * sum_dy_xhat / m)
                } else {
                    scale * dy.data()[i]
                };
            }
        }
    }
    (dx, Tensor::column(dgamma), Tensor::column(dbeta))
}
