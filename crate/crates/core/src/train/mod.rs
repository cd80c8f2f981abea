//! Alternating RMSProp optimization of the generator and discriminator.

mod optim;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{rmsprop_step, step_decay, Direction, RmsPropState};

use crate::dataset::{sample_batch, PairSet};
use crate::error::{Error, Result};
use crate::loss::{self, AdvOrientation, LossWeights, Reduction};
use crate::nn::{
    build_discriminator, build_generator, Discriminator, Generator, NetIds, Network, WidthMultiplier,
    DEFAULT_LEAKY_SLOPE, GENERATOR_DIVISOR,
};
use crate::tensor::{Gradients, Mode, Tape, Tensor, VarId};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const GENERATOR_FILE: &str = "generator.itmn";
pub const DISCRIMINATOR_FILE: &str = "discriminator.itmn";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Full,
    /// Gradient-difference term disabled (`alpha = 0`).
    NoDmse,
    /// Content loss only; the discriminator is never run.
    NoAdvreg,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "no_dmse" => Ok(TrainMode::NoDmse),
            "no_advreg" => Ok(TrainMode::NoAdvreg),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected full, no_dmse or no_advreg)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    /// Iterations per decay step; `None` means a quarter of `iterations`.
    pub lr_decay_every: Option<usize>,
    pub seed: u64,
    pub mode: TrainMode,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    /// Zero disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub patch_size: usize,
    pub width: WidthMultiplier,
    pub leaky_slope: f64,
    pub clamp_eps: f64,
    pub reduction: Reduction,
    pub orientation: AdvOrientation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let base = TrainConfig {
            lambda: 1e4,
            alpha: 1e5,
            batch_size: 6,
            iterations: 80_000,
            lr0: 1e-4,
            lr_decay_factor: 0.5,
            lr_decay_every: None,
            seed: 0,
            mode: TrainMode::Full,
            rmsprop_rho: 0.9,
            rmsprop_eps: 1e-8,
            checkpoint_every: 10_000,
            patch_size: 512,
            width: WidthMultiplier::FULL,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            clamp_eps: 1e-7,
            reduction: Reduction::PerImageSum,
            orientation: AdvOrientation::ProbGenerated,
        };
        match p {
            Preset::Paper => base,
            Preset::Desk => TrainConfig {
                batch_size: 4,
                iterations: 2000,
                checkpoint_every: 500,
                patch_size: 64,
                width: WidthMultiplier::DESK,
                ..base
            },
        }
    }

    pub fn decay_every(&self) -> usize {
        self.lr_decay_every.unwrap_or(self.iterations / 4).max(1)
    }

    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            TrainMode::NoDmse => 0.0,
            _ => self.alpha,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            alpha: self.effective_alpha(),
            clamp_eps: self.clamp_eps,
            reduction: self.reduction,
            orientation: self.orientation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return fail(format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.lr_decay_every == Some(0) {
            return fail("lr_decay_every must be positive".into());
        }
        if !(self.rmsprop_rho > 0.0 && self.rmsprop_rho < 1.0) {
            return fail(format!("rmsprop_rho must lie in (0, 1), got {}", self.rmsprop_rho));
        }
        if !(self.rmsprop_eps > 0.0) {
            return fail(format!("rmsprop_eps must be positive, got {}", self.rmsprop_eps));
        }
        if self.patch_size == 0 || self.patch_size % GENERATOR_DIVISOR != 0 {
            return fail(format!(
                "patch_size must be a positive multiple of {GENERATOR_DIVISOR}, got {}",
                self.patch_size
            ));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return fail(format!("leaky_slope must lie in [0, 1), got {}", self.leaky_slope));
        }
        self.loss_weights().validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Learning rate at 0-based iteration `iter`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    step_decay(iter, cfg.lr0, cfg.lr_decay_factor, cfg.decay_every())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub lr: f64,
    pub content: f64,
    pub adv_reg: Option<f64>,
    pub g_obj: f64,
    pub d_obj: Option<f64>,
    pub ms: f64,
}

impl TrainRecord {
    /// The record with wall time zeroed, for trajectory comparisons.
    pub fn without_time(&self) -> Self {
        TrainRecord { ms: 0.0, ..self.clone() }
    }
}

pub fn write_log(records: &[TrainRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::from(e).at(path))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<TrainRecord>> {
    let r = BufReader::new(fs::File::open(path).map_err(|e| Error::from(e).at(path))?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Both networks with their optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    g_state: RmsPropState<f32>,
    d_state: RmsPropState<f32>,
    iter: usize,
}

/// Values from the generator half of an iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorStep {
    pub content: f64,
    pub adv_reg: Option<f64>,
    pub objective: f64,
}

fn gather(grads: &mut Gradients<f32>, ids: &[VarId], like: &[&mut Tensor<f32>]) -> Vec<Tensor<f32>> {
    ids.iter()
        .zip(like)
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

fn apply_update<N: Network<f32>>(
    net: &mut N,
    ids: &NetIds,
    grads: &mut Gradients<f32>,
    state: &mut RmsPropState<f32>,
    cfg: &TrainConfig,
    lr: f64,
    direction: Direction,
    iter: usize,
    what: &str,
) -> Result<()> {
    let mut params = net.trainable_mut();
    let grads = gather(grads, &ids.flat(), &params);
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("{what} gradient"),
            iter,
        });
    }
    for ((p, g), s) in params.iter_mut().zip(&grads).zip(&mut state.accum) {
        rmsprop_step(p, g, s, lr, cfg.rmsprop_rho, cfg.rmsprop_eps, direction)?;
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("{what} parameters"),
            iter,
        });
    }
    Ok(())
}

fn finite(v: f64, what: &str, iter: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: what.into(), iter })
    }
}

impl Trainer {
    /// Builds both networks from `config.seed` (generator) and `config.seed + 1`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut g = build_generator(config.width, config.seed)?;
        let mut d = build_discriminator(config.width, config.seed.wrapping_add(1))?;
        g.set_leaky_slope(config.leaky_slope);
        d.set_leaky_slope(config.leaky_slope);
        Self::from_networks(config, g, d)
    }

    pub fn from_networks(config: TrainConfig, mut generator: Generator<f32>, mut discriminator: Discriminator<f32>) -> Result<Self> {
        config.validate()?;
        let g_state = RmsPropState::zeros_like(generator.trainable_mut().into_iter().map(|t| &*t));
        let d_state = RmsPropState::zeros_like(discriminator.trainable_mut().into_iter().map(|t| &*t));
        Ok(Trainer {
            config,
            generator,
            discriminator,
            g_state,
            d_state,
            iter: 0,
        })
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn optimizer_states(&self) -> (&RmsPropState<f32>, &RmsPropState<f32>) {
        (&self.g_state, &self.d_state)
    }

    /// One descent step of the generator with the discriminator frozen.
    pub fn generator_step(&mut self, ldr: &Tensor<f32>, hdr: &Tensor<f32>, lr: f64) -> Result<GeneratorStep> {
        let iter = self.iter;
        let w = self.config.loss_weights();
        let adversarial = self.config.mode != TrainMode::NoAdvreg;
        let mut tape = Tape::new();
        let d = adversarial.then_some(&mut self.discriminator);
        let obj = loss::generator_objective(&mut tape, &mut self.generator, d, ldr, hdr, &w)?;
        let objective = finite(tape.value(obj.total).item() as f64, "generator objective", iter)?;
        let content = tape.value(obj.content).item() as f64;
        let adv_reg = obj.adv.map(|a| tape.value(a).item() as f64);
        let mut grads = tape.backward(obj.total)?;
        drop(tape);
        apply_update(
            &mut self.generator,
            &obj.gen_ids,
            &mut grads,
            &mut self.g_state,
            &self.config,
            lr,
            Direction::Descent,
            iter,
            "generator",
        )?;
        Ok(GeneratorStep {
            content,
            adv_reg,
            objective,
        })
    }

    /// One ascent step of the discriminator against the current generator.
    /// Returns the objective value before the step.
    pub fn discriminator_step(&mut self, ldr: &Tensor<f32>, hdr: &Tensor<f32>, lr: f64) -> Result<f64> {
        let iter = self.iter;
        let w = self.config.loss_weights();
        let fake = loss::generate(&mut self.generator, ldr, Mode::TrainFrozen)?;
        let mut tape = Tape::new();
        let obj = loss::discriminator_objective_on(&mut tape, &mut self.discriminator, &fake, hdr, &w)?;
        let value = finite(tape.value(obj.value).item() as f64, "discriminator objective", iter)?;
        let mut grads = tape.backward(obj.value)?;
        drop(tape);
        apply_update(
            &mut self.discriminator,
            &obj.disc_ids,
            &mut grads,
            &mut self.d_state,
            &self.config,
            lr,
            Direction::Ascent,
            iter,
            "discriminator",
        )?;
        Ok(value)
    }

    /// Generator update, then (unless `no_advreg`) discriminator update
    /// against the updated generator, on the same batch.
    pub fn step(&mut self, ldr: &Tensor<f32>, hdr: &Tensor<f32>) -> Result<TrainRecord> {
        let start = Instant::now();
        let lr = lr_at(self.iter, &self.config);
        let g = self.generator_step(ldr, hdr, lr)?;
        let d_obj = match self.config.mode {
            TrainMode::NoAdvreg => None,
            _ => Some(self.discriminator_step(ldr, hdr, lr)?),
        };
        let rec = TrainRecord {
            iter: self.iter,
            lr,
            content: g.content,
            adv_reg: g.adv_reg,
            g_obj: g.objective,
            d_obj,
            ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.iter += 1;
        Ok(rec)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<TrainRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs `config.iterations` steps on batches drawn from `set`.
///
/// With an output directory, the log is streamed to `train_log.jsonl`,
/// checkpoints go to `checkpoints/` and final parameters to
/// `generator.itmn` / `discriminator.itmn`.
pub fn train_loop(config: &TrainConfig, set: &PairSet, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let (h, w) = set.min_size().expect("nonempty");
    if config.patch_size > h || config.patch_size > w {
        return Err(Error::Dataset(format!(
            "patch_size {} exceeds the smallest pair ({w}x{h})",
            config.patch_size
        )));
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);

    let mut log_writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let p = dir.join(LOG_FILE);
            Some(BufWriter::new(fs::File::create(&p).map_err(|e| Error::from(e).at(&p))?))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(config.iterations);
    let mut checkpoints = Vec::new();
    for it in 0..config.iterations {
        let (l, hb) = sample_batch(set, &mut rng, config.batch_size, config.patch_size)?;
        let rec = trainer.step(&l, &hb)?;
        if let Some(w) = log_writer.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        if it % 100 == 0 || it + 1 == config.iterations {
            log::info!(
                "iter {} lr {:.3e} content {:.6e} g_obj {:.6e} d_obj {:?}",
                rec.iter,
                rec.lr,
                rec.content,
                rec.g_obj,
                rec.d_obj
            );
        }
        log.push(rec);
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 && it + 1 < config.iterations {
                let ck = dir.join("checkpoints");
                fs::create_dir_all(&ck)?;
                let gp = ck.join(format!("iter_{:06}_{GENERATOR_FILE}", it + 1));
                let dp = ck.join(format!("iter_{:06}_{DISCRIMINATOR_FILE}", it + 1));
                trainer.generator.save_params(&gp)?;
                trainer.discriminator.save_params(&dp)?;
                checkpoints.push(gp);
                checkpoints.push(dp);
            }
        }
    }
    if let Some(mut w) = log_writer {
        w.flush()?;
    }
    if let Some(dir) = out_dir {
        trainer.generator.save_params(&dir.join(GENERATOR_FILE))?;
        trainer.discriminator.save_params(&dir.join(DISCRIMINATOR_FILE))?;
    }
    Ok(TrainOutcome {
        trainer,
        log,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_schedule() {
        let p = TrainConfig::preset(Preset::Paper);
        assert_eq!((p.lambda, p.alpha, p.batch_size, p.iterations, p.lr0), (1e4, 1e5, 6, 80_000, 1e-4));
        assert_eq!(p.decay_every(), 20_000);
        let d = TrainConfig::default();
        assert_eq!((d.batch_size, d.iterations, d.decay_every()), (4, 2000, 500));
        assert_eq!(lr_at(0, &d), 1e-4);
        assert_eq!(lr_at(500, &d), 5e-5);
        assert!(d.validate().is_ok());
    }

    #[test]
    fn invalid_configs_rejected() {
        let d = TrainConfig::default();
        for bad in [
            TrainConfig { batch_size: 0, ..d.clone() },
            TrainConfig { lr0: 0.0, ..d.clone() },
            TrainConfig { lr_decay_factor: 1.5, ..d.clone() },
            TrainConfig { patch_size: 48, ..d.clone() },
            TrainConfig { lambda: 0.0, ..d.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn mode_parsing_and_alpha() {
        let c = TrainConfig {
            mode: "no_dmse".parse().unwrap(),
            ..TrainConfig::default()
        };
        assert_eq!(c.effective_alpha(), 0.0);
        assert!("nodmse".parse::<TrainMode>().is_err());
    }

    #[test]
    fn empty_set_rejected_before_any_step() {
        let err = train_loop(&TrainConfig::default(), &PairSet::default(), None).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
    }

    #[test]
    fn record_serializes_with_fixed_field_names() {
        let r = TrainRecord {
            iter: 3,
            lr: 1e-4,
            content: 0.5,
            adv_reg: None,
            g_obj: 5000.0,
            d_obj: None,
            ms: 1.5,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(
            s,
            r#"{"iter":3,"lr":0.0001,"content":0.5,"adv_reg":null,"g_obj":5000.0,"d_obj":null,"ms":1.5}"#
        );
    }
}
