//! Central finite-difference verification of every differentiable primitive.
//!
//! Each case builds a graph `f(x₁…x_k)`, reduces it with a fixed random
//! projection `L = Σ r ⊙ f`, and compares the tape gradient of `L` against
//! `(L(x + h·e) − L(x − h·e)) / 2h` on sampled coordinates.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::loss::{self, AdvOrientation, LossWeights, Reduction};
use crate::nn::{build_discriminator, build_generator, Discriminator, Generator, Network, WidthMultiplier};
use crate::tensor::{BatchNormState, Mode, Scalar, Shape, Tape, Tensor, VarId};

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: Vec<u64>,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per case and seed.
    pub samples: usize,
    /// Restricts the run to cases whose name contains one of these strings.
    pub only: Vec<String>,
    /// Perturbs the analytic gradient of the named case, to exercise the failure path.
    pub fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: DEFAULT_SEEDS.to_vec(),
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            samples: 48,
            only: Vec::new(),
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub probes: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<(VarId, Vec<VarId>)>>;

/// Inputs of one case together with the graph over them.
pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    build: Build,
}

impl Instance {
    /// A graph whose differentiable inputs are exactly `inputs`, in order.
    pub fn new(
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId> + 'static,
    ) -> Self {
        Instance {
            inputs,
            build: Box::new(move |tape, xs| {
                let ids: Vec<VarId> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
                Ok((f(tape, &ids)?, ids))
            }),
        }
    }

    /// A graph that registers its own leaves; `build` returns them in input order.
    pub fn custom(
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<(VarId, Vec<VarId>)> + 'static,
    ) -> Self {
        Instance {
            inputs,
            build: Box::new(build),
        }
    }
}

/// A named family of instances, one per seed.
pub struct Case {
    pub name: &'static str,
    pub make: Box<dyn Fn(&mut ChaCha8Rng) -> Result<Instance>>,
}

impl Case {
    fn new(name: &'static str, make: impl Fn(&mut ChaCha8Rng) -> Result<Instance> + 'static) -> Self {
        Case {
            name,
            make: Box::new(make),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn uniform(rng: &mut ChaCha8Rng, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Standard normal values kept at least `margin` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: impl Into<Shape>, margin: f64) -> Tensor<f64> {
    normal(rng, shape).map(|v| if v.abs() < margin { v + 2.0 * margin * v.signum() } else { v })
}

fn unary(name: &'static str, f: fn(&mut Tape<f64>, VarId) -> Result<VarId>) -> Case {
    Case::new(name, move |rng| Ok(Instance::new(vec![normal(rng, [2, 3, 4, 5])], move |t, x| f(t, x[0]))))
}

fn binary(name: &'static str, f: fn(&mut Tape<f64>, VarId, VarId) -> Result<VarId>) -> Case {
    Case::new(name, move |rng| {
        let a = normal(rng, [2, 3, 4, 5]);
        let b = normal(rng, [2, 3, 4, 5]);
        Ok(Instance::new(vec![a, b], move |t, x| f(t, x[0], x[1])))
    })
}

fn small_generator() -> Result<Generator<f64>> {
    build_generator(WidthMultiplier::new(1, 16)?, 77)
}

fn small_discriminator() -> Result<Discriminator<f64>> {
    build_discriminator(WidthMultiplier::new(1, 16)?, 78)
}

fn set_params<N: Network<f64>>(net: &mut N, values: &[Tensor<f64>]) {
    for (p, v) in net.trainable_mut().into_iter().zip(values) {
        p.data_mut().copy_from_slice(v.data());
    }
}

fn params_of<N: Network<f64>>(net: &mut N) -> Vec<Tensor<f64>> {
    net.trainable_mut().into_iter().map(|t| t.clone()).collect()
}

/// Every primitive, the loss terms, a composite layer graph and both networks.
pub fn cases() -> Vec<Case> {
    let mut v = vec![
        Case::new("conv2d", |rng| {
            let inputs = vec![normal(rng, [2, 3, 8, 8]), normal(rng, [4, 3, 3, 3]), normal(rng, [4, 1, 1, 1])];
            Ok(Instance::new(inputs, |t, x| t.conv2d(x[0], x[1], Some(x[2]), 2, 1)))
        }),
        Case::new("conv2d_transpose", |rng| {
            let inputs = vec![normal(rng, [2, 3, 4, 4]), normal(rng, [3, 2, 4, 4]), normal(rng, [2, 1, 1, 1])];
            Ok(Instance::new(inputs, |t, x| t.conv2d_transpose(x[0], x[1], Some(x[2]), 2, 1)))
        }),
        Case::new("batchnorm_train", |rng| {
            let inputs = vec![normal(rng, [4, 2, 3, 3]), uniform(rng, [2, 1, 1, 1], 0.5, 1.5), normal(rng, [2, 1, 1, 1])];
            Ok(Instance::new(inputs, |t, x| {
                let mut st = BatchNormState::new(2);
                t.batchnorm(x[0], x[1], x[2], &mut st, Mode::Train)
            }))
        }),
        Case::new("batchnorm_eval", |rng| {
            let mut st = BatchNormState::new(2);
            st.running_mean = normal(rng, [2, 1, 1, 1]).into_vec();
            st.running_var = uniform(rng, [2, 1, 1, 1], 0.5, 2.0).into_vec();
            let inputs = vec![normal(rng, [4, 2, 3, 3]), uniform(rng, [2, 1, 1, 1], 0.5, 1.5), normal(rng, [2, 1, 1, 1])];
            Ok(Instance::new(inputs, move |t, x| {
                let mut st = st.clone();
                t.batchnorm(x[0], x[1], x[2], &mut st, Mode::Eval)
            }))
        }),
        Case::new("linear", |rng| {
            let inputs = vec![normal(rng, [3, 5, 1, 1]), normal(rng, [4, 5, 1, 1]), normal(rng, [4, 1, 1, 1])];
            Ok(Instance::new(inputs, |t, x| t.linear(x[0], x[1], Some(x[2]))))
        }),
        Case::new("leaky_relu", |rng| {
            let x = away_from_zero(rng, [2, 3, 4, 5], 1e-3);
            Ok(Instance::new(vec![x], |t, x| Ok(t.leaky_relu(x[0], 0.2))))
        }),
        unary("sigmoid", |t, x| Ok(t.sigmoid(x))),
        Case::new("concat_channels", |rng| {
            let inputs = vec![normal(rng, [2, 2, 3, 3]), normal(rng, [2, 3, 3, 3])];
            Ok(Instance::new(inputs, |t, x| t.concat_channels(x[0], x[1])))
        }),
        unary("slice_channels", |t, x| t.slice_channels(x, 1, 2)),
        Case::new("concat_batch", |rng| {
            let inputs = vec![normal(rng, [2, 3, 3, 3]), normal(rng, [1, 3, 3, 3])];
            Ok(Instance::new(inputs, |t, x| t.concat_batch(x[0], x[1])))
        }),
        unary("slice_batch", |t, x| t.slice_batch(x, 1, 1)),
        unary("diff_x", |t, x| t.diff_x(x)),
        unary("diff_y", |t, x| t.diff_y(x)),
        binary("add", |t, a, b| t.add(a, b)),
        binary("sub", |t, a, b| t.sub(a, b)),
        binary("mul", |t, a, b| t.mul(a, b)),
        unary("scale", |t, x| Ok(t.scale(x, -1.7))),
        unary("add_scalar", |t, x| Ok(t.add_scalar(x, 0.3))),
        unary("square", |t, x| Ok(t.square(x))),
        Case::new("ln", |rng| {
            let x = uniform(rng, [2, 3, 4, 5], 0.5, 2.0);
            Ok(Instance::new(vec![x], |t, x| t.ln(x[0])))
        }),
        Case::new("clamp", |rng| {
            let x = uniform(rng, [2, 3, 4, 5], 0.05, 0.95).map(|v| if (v - 0.5).abs() < 1e-3 { v + 0.01 } else { v });
            Ok(Instance::new(vec![x], |t, x| Ok(t.clamp(x[0], 0.0, 0.5))))
        }),
        unary("sum", |t, x| Ok(t.sum(x))),
        unary("mean", |t, x| Ok(t.mean(x))),
        unary("global_avg_pool", |t, x| Ok(t.global_avg_pool(x))),
        binary("mse", |t, a, b| loss::mse(t, a, b, Reduction::PerImageSum)),
        Case::new("content_loss", |rng| {
            let inputs = vec![uniform(rng, [2, 3, 5, 6], 0.0, 1.0), uniform(rng, [2, 3, 5, 6], 0.0, 1.0)];
            let w = LossWeights {
                alpha: 0.7,
                lambda: 1.0,
                ..LossWeights::default()
            };
            Ok(Instance::new(inputs, move |t, x| loss::content_loss(t, x[0], x[1], &w)))
        }),
        Case::new("adv_regularizer", |rng| {
            let inputs = vec![uniform(rng, [4, 1, 1, 1], 0.05, 0.95), uniform(rng, [4, 1, 1, 1], 0.05, 0.95)];
            Ok(Instance::new(inputs, |t, x| {
                loss::adv_regularizer(t, x[0], x[1], 1e-7, AdvOrientation::ProbGenerated)
            }))
        }),
        Case::new("conv_bn_leaky_mse", |rng| {
            let inputs = vec![
                normal(rng, [3, 2, 6, 6]),
                normal(rng, [4, 2, 3, 3]),
                uniform(rng, [4, 1, 1, 1], 0.5, 1.5),
                normal(rng, [4, 1, 1, 1]),
                normal(rng, [3, 4, 6, 6]),
            ];
            Ok(Instance::new(inputs, |t, x| {
                let y = t.conv2d(x[0], x[1], None, 1, 1)?;
                let mut st = BatchNormState::new(4);
                let y = t.batchnorm(y, x[2], x[3], &mut st, Mode::Train)?;
                let y = t.leaky_relu(y, 0.2);
                loss::mse(t, y, x[4], Reduction::PerImageSum)
            }))
        }),
    ];
    v.push(Case::new("generator", |rng| {
        let mut g = small_generator()?;
        let mut inputs = vec![uniform(rng, [2, 3, 32, 32], 0.0, 1.0)];
        inputs.extend(params_of(&mut g));
        Ok(Instance::custom(inputs, move |tape, xs| {
            let mut g = g.clone();
            set_params(&mut g, &xs[1..]);
            let x = tape.leaf(xs[0].clone(), true);
            let ids = g.register(tape, true);
            let y = g.forward(tape, &ids, x, Mode::Train)?;
            let mut leaves = vec![x];
            leaves.extend(ids.flat());
            Ok((y, leaves))
        }))
    }));
    v.push(Case::new("discriminator", |rng| {
        let mut d = small_discriminator()?;
        let mut inputs = vec![uniform(rng, [3, 3, 16, 16], 0.0, 1.0)];
        inputs.extend(params_of(&mut d));
        Ok(Instance::custom(inputs, move |tape, xs| {
            let mut d = d.clone();
            set_params(&mut d, &xs[1..]);
            let x = tape.leaf(xs[0].clone(), true);
            let ids = d.register(tape, true);
            let y = d.forward(tape, &ids, x, Mode::Train)?;
            let mut leaves = vec![x];
            leaves.extend(ids.flat());
            Ok((y, leaves))
        }))
    }));
    v
}

fn projected_loss(
    inst: &Instance,
    inputs: &[Tensor<f64>],
    r: Option<&Tensor<f64>>,
    pieces: Option<&[Vec<bool>]>,
) -> Result<(Tape<f64>, VarId, Vec<VarId>, Shape)> {
    let mut tape = Tape::new();
    match pieces {
        Some(p) => tape.replay_pieces(p.to_vec()),
        None => tape.record_pieces(),
    }
    let (y, leaves) = (inst.build)(&mut tape, inputs)?;
    let shape = tape.shape(y);
    let loss = match r {
        Some(r) => {
            let rid = tape.constant(r.clone());
            let p = tape.mul(y, rid)?;
            tape.sum(p)
        }
        None => tape.sum(y),
    };
    Ok((tape, loss, leaves, shape))
}

/// Largest relative error of one instance over `samples` probed coordinates.
///
/// Perturbed evaluations keep every LeakyReLU on the side of its kink taken
/// at the unperturbed point, so the difference quotient measures the same
/// linear piece the analytic gradient describes.
pub fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng, step: f64, samples: usize, fault: bool) -> Result<(f64, usize)> {
    let (_, _, _, out_shape) = projected_loss(inst, &inst.inputs, None, None)?;
    let r = normal(rng, out_shape);
    let (mut tape, loss, leaves, _) = projected_loss(inst, &inst.inputs, Some(&r), None)?;
    let pieces = tape.take_pieces();
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(&inst.inputs)
        .map(|(&id, x)| grads.take(id).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let offsets: Vec<usize> = inst
        .inputs
        .iter()
        .scan(0, |acc, x| {
            let o = *acc;
            *acc += x.len();
            Some(o)
        })
        .collect();
    let total: usize = inst.inputs.iter().map(Tensor::len).sum();
    let picks: Vec<usize> = if total <= samples {
        (0..total).collect()
    } else {
        let mut p = sample(rng, total, samples).into_vec();
        p.sort_unstable();
        p
    };

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let (tape, loss, _, _) = projected_loss(inst, xs, Some(&r), Some(&pieces))?;
        Ok(tape.value(loss).item())
    };
    let mut xs = inst.inputs.clone();
    let mut worst = 0.0f64;
    for &flat in &picks {
        let i = offsets.partition_point(|&o| o <= flat) - 1;
        let j = flat - offsets[i];
        let orig = xs[i].data()[j];
        xs[i].data_mut()[j] = orig + step;
        let up = eval(&xs)?;
        xs[i].data_mut()[j] = orig - step;
        let down = eval(&xs)?;
        xs[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let mut a = analytic[i].data()[j];
        if fault {
            a = a * 1.01 + 1e-2;
        }
        worst = worst.max(relative_error(a, numeric));
    }
    Ok((worst, picks.len()))
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.seeds.is_empty() || !(cfg.step > 0.0) || cfg.samples == 0 {
        return Err(Error::InvalidArgument("gradcheck needs seeds, a positive step and samples".into()));
    }
    let start = Instant::now();
    let mut reports = Vec::new();
    for case in cases() {
        if !cfg.only.is_empty() && !cfg.only.iter().any(|o| case.name.contains(o.as_str())) {
            continue;
        }
        let fault = cfg.fault.as_deref() == Some(case.name);
        let mut worst = 0.0f64;
        let mut probes = 0;
        for &seed in &cfg.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = (case.make)(&mut rng)?;
            let (w, n) = check_instance(&inst, &mut rng, cfg.step, cfg.samples, fault)?;
            worst = worst.max(w);
            probes += n;
        }
        log::debug!("{}: max rel err {worst:.3e} over {probes} probes", case.name);
        reports.push(CaseReport {
            name: case.name,
            max_rel_err: worst,
            probes,
            passed: worst < cfg.tolerance,
        });
    }
    Ok(GradcheckReport {
        cases: reports,
        tolerance: cfg.tolerance,
        elapsed: start.elapsed(),
    })
}

/// Largest relative error between the 32-bit analytic gradient of
/// `mse(G(L), H)` and a 64-bit central difference, over `fraction` of the
/// generator parameters.
pub fn generator_f32_check(g: &Generator<f32>, ldr: &Tensor<f32>, hdr: &Tensor<f32>, fraction: f64, seed: u64) -> Result<(f64, usize)> {
    let mut g32 = g.clone();
    let mut tape = Tape::<f32>::new();
    let ids = g32.register(&mut tape, true);
    let l = tape.constant(ldr.clone());
    let h = tape.constant(hdr.clone());
    let y = g32.forward(&mut tape, &ids, l, Mode::TrainFrozen)?;
    let m = loss::mse(&mut tape, y, h, Reduction::PerImageSum)?;
    let mut grads = tape.backward(m)?;
    let analytic: Vec<Vec<f32>> = ids
        .flat()
        .iter()
        .zip(g32.trainable_mut())
        .map(|(&id, p)| grads.take(id).map_or_else(|| vec![0.0; p.len()], Tensor::into_vec))
        .collect();

    let mut g64: Generator<f64> = g.cast();
    let (l64, h64) = (ldr.cast::<f64>(), hdr.cast::<f64>());
    let pieces = {
        let mut tape = Tape::new();
        tape.record_pieces();
        let ids = g64.register(&mut tape, false);
        let l = tape.constant(l64.clone());
        g64.forward(&mut tape, &ids, l, Mode::TrainFrozen)?;
        tape.take_pieces()
    };
    let eval = |g: &mut Generator<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        tape.replay_pieces(pieces.clone());
        let ids = g.register(&mut tape, false);
        let l = tape.constant(l64.clone());
        let h = tape.constant(h64.clone());
        let y = g.forward(&mut tape, &ids, l, Mode::TrainFrozen)?;
        let m = loss::mse(&mut tape, y, h, Reduction::PerImageSum)?;
        Ok(tape.value(m).item())
    };
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let count = ((total as f64 * fraction).ceil() as usize).clamp(1, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, count).into_vec();
    picks.sort_unstable();
    let step = 1e-6;
    let mut worst = 0.0f64;
    for flat in picks {
        let (mut i, mut j) = (0, flat);
        while j >= sizes[i] {
            j -= sizes[i];
            i += 1;
        }
        let orig = g64.trainable_mut()[i].data()[j];
        g64.trainable_mut()[i].data_mut()[j] = orig + step;
        let up = eval(&mut g64)?;
        g64.trainable_mut()[i].data_mut()[j] = orig - step;
        let down = eval(&mut g64)?;
        g64.trainable_mut()[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i][j].as_f64(), numeric));
    }
    Ok((worst, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_on_one_seed() {
        let cfg = GradcheckConfig {
            seeds: vec![11],
            samples: 24,
            ..Default::default()
        };
        let report = run_gradcheck(&cfg).unwrap();
        for c in &report.cases {
            assert!(c.passed, "{}: {:.3e}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let cfg = GradcheckConfig {
            seeds: vec![1],
            samples: 8,
            only: vec!["sigmoid".into()],
            fault: Some("sigmoid".into()),
            ..Default::default()
        };
        let report = run_gradcheck(&cfg).unwrap();
        assert_eq!(report.cases.len(), 1);
        assert!(!report.passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
