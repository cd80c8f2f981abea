//! The `itmn` command line: synth, train, infer, eval and gradcheck.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{synth_pairs, DatasetIndex, PairSet};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckConfig, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::hdrio::{self, HdrImage, LdrImage};
use crate::metrics::{evaluate_dirs, write_report};
use crate::nn::{load_generator, GENERATOR_DIVISOR};
use crate::train::{train_loop, Preset, TrainMode};

pub use config::{format_f64, parse_kv, ExperimentConfig, Paths, ECHO_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "itmn", version, about = "Inverse tone mapping: synthesize pairs, train, infer, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tone map a directory of HDR images into LDR/target training pairs.
    Synth(SynthArgs),
    /// Train the generator and discriminator on a synthesized dataset.
    Train(TrainArgs),
    /// Run a trained generator over LDR images.
    Infer(InferArgs),
    /// Score predicted HDR images against references.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Paper,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    #[value(name = "no_dmse")]
    NoDmse,
    #[value(name = "no_advreg")]
    NoAdvreg,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => TrainMode::Full,
            ModeArg::NoDmse => TrainMode::NoDmse,
            ModeArg::NoAdvreg => TrainMode::NoAdvreg,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum PadArg {
    #[default]
    None,
    Reflect,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines; flags override it
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Default block for training options [default: desk]
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of .hdr/.pfm source images
    pub hdr_dir: PathBuf,
    /// Output directory for ldr/, hdr/ and index.jsonl
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Luminance in nits mapped to 1.0 in the targets [default: 1000]
    #[arg(long)]
    pub peak_nits: Option<f64>,
    /// Nits per source unit [default: the image maximum maps to the peak]
    #[arg(long)]
    pub nits_per_unit: Option<f64>,
    /// Square output size in pixels [default: 128]
    #[arg(long, conflicts_with = "keep_size")]
    pub size: Option<usize>,
    /// Keep the source size instead of resizing
    #[arg(long)]
    pub keep_size: bool,
    /// Reinhard key value [default: 0.18]
    #[arg(long)]
    pub key: Option<f64>,
    /// Reinhard white point [default: the largest scaled luminance of each image]
    #[arg(long)]
    pub l_white: Option<f64>,
    /// Bits per LDR sample, 8 or 16 [default: 8]
    #[arg(long)]
    pub ldr_bits: Option<u32>,
    /// Split label stored with each pair [default: train]
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or index.jsonl [default: `data` from the config file]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [default: `out` from the config file]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Training variant [default: full]
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Content-loss weight [default: 1e4]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Gradient-difference weight [default: 1e5]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Images per batch [default: 4; paper preset: 6]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training iterations [default: 2000; paper preset: 80000]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Initial learning rate [default: 1e-4]
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Learning-rate factor per decay step [default: 0.5]
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    /// Iterations per decay step [default: iterations/4]
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    /// Seed for initialization and batch sampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint period in iterations, 0 disables [default: 500; paper preset: 10000]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Square crop size, a multiple of 32 [default: 64; paper preset: 512]
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Channel width multiplier such as 1/4 or 0.5 [default: 1/4; paper preset: 1/1]
    #[arg(long)]
    pub width: Option<String>,
    /// One-at-a-time sweep, e.g. `alpha=1e3,1e5,1e7 lambda=1e2,1e4,1e6`
    #[arg(long, num_args = 1.., value_name = "KEY=V1,V2,..")]
    pub sweep: Vec<String>,
    /// Print the effective configuration and exit
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Generator parameter file
    #[arg(long)]
    pub model: PathBuf,
    /// LDR images or directories of them
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Padding for sizes not divisible by 32
    #[arg(long, value_enum, default_value_t = PadArg::None)]
    pub pad: PadArg,
    /// Also write Radiance .hdr files scaled to nits under rgbe/
    #[arg(long)]
    pub rgbe: bool,
    /// Nits of a normalized 1.0 in RGBE output [default: 1000]
    #[arg(long)]
    pub peak_nits: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted HDR images
    pub pred: PathBuf,
    /// Directory of reference HDR images with matching file stems
    pub reference: PathBuf,
    /// Report directory [default: PRED]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Exposure stops of mPSNR, comma separated [default: -2,-1,0,1,2]
    #[arg(long, allow_hyphen_values = true)]
    pub stops: Option<String>,
    /// Display gamma of mPSNR [default: 2.2]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Luminance floor of log-PSNR [default: 1e-4]
    #[arg(long)]
    pub log_floor: Option<f64>,
    /// Average SSIM over R, G, B instead of luma
    #[arg(long)]
    pub ssim_per_channel: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seeds, comma separated
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    /// Coordinates probed per case and seed
    #[arg(long, default_value_t = 48)]
    pub samples: usize,
    /// Central-difference step
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub step: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Only run cases whose name contains one of these
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// Corrupt the analytic gradient of the named case
    #[arg(long, value_name = "CASE")]
    pub inject_fault: Option<String>,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FAILURE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERICAL,
        Error::File { source, .. } => exit_code(source),
        _ => EXIT_FAILURE,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

#[derive(Default)]
struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn set(&mut self, key: &str, v: Option<impl ToString>) {
        if let Some(v) = v {
            self.0.push((key.into(), v.to_string()));
        }
    }

    fn num(&mut self, key: &str, v: Option<f64>) {
        self.set(key, v.map(format_f64));
    }
}

fn resolve(cfg: &ConfigArgs, o: Overrides) -> Result<ExperimentConfig> {
    ExperimentConfig::resolve(cfg.preset.map(Preset::from), cfg.config.as_deref(), &o.0)
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let mut o = Overrides::default();
    o.num("peak_nits", a.peak_nits);
    o.num("nits_per_unit", a.nits_per_unit);
    o.set("size", a.size);
    if a.keep_size {
        o.set("size", Some("none"));
    }
    o.num("tmo_key", a.key);
    o.num("l_white", a.l_white);
    o.set("ldr_bits", a.ldr_bits);
    o.set("split", a.split);
    o.set("out", Some(a.out_dir.display()));
    let cfg = resolve(&a.cfg, o)?;
    let report = synth_pairs(&a.hdr_dir, &a.out_dir, &cfg.synth)?;
    cfg.write_echo(&a.out_dir)?;
    println!(
        "synthesized {} pairs into {} ({} skipped)",
        report.index.len(),
        a.out_dir.display(),
        report.skipped.len()
    );
    for (p, why) in &report.skipped {
        println!("  skipped {}: {why}", p.display());
    }
    Ok(EXIT_OK)
}

/// Cells of a one-at-a-time sweep: each listed value of one key with every
/// other key at its base value, duplicates removed.
pub fn sweep_cells(base: &[(String, f64)], axes: &[(String, Vec<f64>)]) -> Vec<Vec<(String, f64)>> {
    let mut cells: Vec<Vec<(String, f64)>> = Vec::new();
    for (key, values) in axes {
        for &v in values {
            let cell: Vec<(String, f64)> = base
                .iter()
                .map(|(k, b)| (k.clone(), if k == key { v } else { *b }))
                .collect();
            if !cells.contains(&cell) {
                cells.push(cell);
            }
        }
    }
    cells
}

fn parse_sweep(specs: &[String]) -> Result<Vec<(String, Vec<f64>)>> {
    let mut axes: Vec<(String, Vec<f64>)> = Vec::new();
    for s in specs {
        let (k, vs) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep axis {s:?} must look like key=v1,v2")))?;
        let k = k.trim().to_string();
        if !matches!(k.as_str(), "alpha" | "lambda" | "lr0") {
            return Err(Error::Config(format!("cannot sweep {k:?} (expected alpha, lambda or lr0)")));
        }
        if axes.iter().any(|(a, _)| *a == k) {
            return Err(Error::Config(format!("sweep axis {k:?} given twice")));
        }
        let values = vs
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad sweep value {v:?} for {k}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Config(format!("sweep axis {k:?} has no values")));
        }
        axes.push((k, values));
    }
    Ok(axes)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut o = Overrides::default();
    o.set("data", a.data.as_ref().map(|p| p.display()));
    o.set("out", a.out.as_ref().map(|p| p.display()));
    o.set("mode", a.mode.and_then(|m| m.to_possible_value()).map(|v| v.get_name().to_string()));
    o.num("lambda", a.lambda);
    o.num("alpha", a.alpha);
    o.set("batch_size", a.batch_size);
    o.set("iterations", a.iterations);
    o.num("lr0", a.lr0);
    o.num("lr_decay_factor", a.lr_decay_factor);
    o.set("lr_decay_every", a.lr_decay_every);
    o.set("seed", a.seed);
    o.set("checkpoint_every", a.checkpoint_every);
    o.set("patch_size", a.patch_size);
    o.set("width", a.width);
    let cfg = resolve(&a.cfg, o)?;
    let axes = parse_sweep(&a.sweep)?;
    if a.dry_run {
        print!("{}", cfg.echo()?);
        return Ok(EXIT_OK);
    }
    let data = cfg
        .paths
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (--data or `data = ...`)".into()))?;
    let out = cfg
        .paths
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory given (--out or `out = ...`)".into()))?;
    let index = DatasetIndex::load(&data)?;
    let set = PairSet::from_index(&index)?;
    cfg.write_echo(&out)?;
    if axes.is_empty() {
        let outcome = train_loop(&cfg.train, &set, Some(&out))?;
        let last = outcome.log.last().expect("at least one iteration");
        println!(
            "trained {} iterations into {} (final content loss {:.6e})",
            outcome.log.len(),
            out.display(),
            last.content
        );
        return Ok(EXIT_OK);
    }
    let base: Vec<(String, f64)> = axes
        .iter()
        .map(|(k, _)| {
            let v = match k.as_str() {
                "alpha" => cfg.train.alpha,
                "lambda" => cfg.train.lambda,
                _ => cfg.train.lr0,
            };
            (k.clone(), v)
        })
        .collect();
    let cells = sweep_cells(&base, &axes);
    log::info!("sweep over {} cells", cells.len());
    for cell in cells {
        let name = cell
            .iter()
            .map(|(k, v)| format!("{k}={}", format_f64(*v)))
            .collect::<Vec<_>>()
            .join("_");
        let dir = out.join("sweep").join(&name);
        let mut cell_cfg = cfg.clone();
        let kv: Vec<(String, String)> = cell.iter().map(|(k, v)| (k.clone(), format_f64(*v))).collect();
        cell_cfg.apply(&kv)?;
        cell_cfg.paths.out = Some(dir.clone());
        cell_cfg.write_echo(&dir)?;
        let outcome = train_loop(&cell_cfg.train, &set, Some(&dir))?;
        let last = outcome.log.last().expect("at least one iteration");
        println!("{name}: final content loss {:.6e}", last.content);
    }
    Ok(EXIT_OK)
}

/// Index into `0..n` mirrored at the borders without repeating the edge sample.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads on the right and bottom up to multiples of `divisor`.
pub fn pad_reflect(img: &LdrImage, divisor: usize) -> LdrImage {
    let w = img.width.div_ceil(divisor) * divisor;
    let h = img.height.div_ceil(divisor) * divisor;
    LdrImage::from_fn(w, h, |x, y| {
        img.pixel(reflect_index(x as isize, img.width), reflect_index(y as isize, img.height))
    })
}

pub fn crop(img: &HdrImage, width: usize, height: usize) -> HdrImage {
    HdrImage::from_fn(width, height, |x, y| img.pixel(x, y))
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::from(e).at(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && hdrio::is_image_path(f))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn infer_one(
    g: &crate::nn::Generator<f32>,
    input: &Path,
    out: &Path,
    pad: PadArg,
    rgbe_peak: Option<f64>,
) -> Result<PathBuf> {
    let img = hdrio::read_image(input).map_err(|e| Error::from(e).at(input))?;
    if !img.pixels.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!(
            "{}: LDR input must lie in [0, 1]",
            input.display()
        )));
    }
    let ldr = LdrImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels,
    };
    let divisible = ldr.width % GENERATOR_DIVISOR == 0 && ldr.height % GENERATOR_DIVISOR == 0;
    let padded = match (divisible, pad) {
        (true, _) => ldr.clone(),
        (false, PadArg::Reflect) => pad_reflect(&ldr, GENERATOR_DIVISOR),
        (false, PadArg::None) => {
            return Err(Error::InvalidArgument(format!(
                "{}: {}x{} is not divisible by {GENERATOR_DIVISOR}; resize it or pass --pad reflect",
                input.display(),
                ldr.width,
                ldr.height
            )))
        }
    };
    let y = g.infer(&padded.to_tensor::<f32>())?;
    let pred = crop(&HdrImage::from_tensor(&y, 0), ldr.width, ldr.height);
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let pfm = out.join(format!("{stem}.pfm"));
    hdrio::save_pfm(&pred, &pfm).map_err(|e| Error::from(e).at(&pfm))?;
    if let Some(peak) = rgbe_peak {
        let dir = out.join("rgbe");
        fs::create_dir_all(&dir)?;
        let nits = HdrImage {
            width: pred.width,
            height: pred.height,
            pixels: pred.pixels.iter().map(|&v| (v as f64 * peak) as f32).collect(),
        };
        let p = dir.join(format!("{stem}.hdr"));
        hdrio::save_rgbe(&nits, &p).map_err(|e| Error::from(e).at(&p))?;
    }
    Ok(pfm)
}

fn cmd_infer(a: InferArgs) -> Result<i32> {
    let mut o = Overrides::default();
    o.num("peak_nits", a.peak_nits);
    o.set("out", Some(a.out.display()));
    let cfg = resolve(&a.cfg, o)?;
    if !(cfg.synth.peak_nits > 0.0 && cfg.synth.peak_nits.is_finite()) {
        return Err(Error::Config(format!("peak_nits must be positive, got {}", cfg.synth.peak_nits)));
    }
    let g = load_generator::<f32>(&a.model).map_err(|e| e.at(&a.model))?;
    let files = collect_inputs(&a.inputs)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument("no input images found".into()));
    }
    cfg.write_echo(&a.out)?;
    let rgbe_peak = a.rgbe.then_some(cfg.synth.peak_nits);
    let mut failed = 0;
    for f in &files {
        match infer_one(&g, f, &a.out, a.pad, rgbe_peak) {
            Ok(p) => println!("{} -> {}", f.display(), p.display()),
            Err(e) => {
                eprintln!("error: {e}");
                failed += 1;
            }
        }
    }
    println!("{} of {} images written to {}", files.len() - failed, files.len(), a.out.display());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let out = a.out.clone().unwrap_or_else(|| a.pred.clone());
    let mut o = Overrides::default();
    o.set("stops", a.stops);
    o.num("gamma", a.gamma);
    o.num("log_floor", a.log_floor);
    if a.ssim_per_channel {
        o.set("ssim_per_channel", Some(true));
    }
    o.set("out", Some(out.display()));
    let cfg = resolve(&a.cfg, o)?;
    let report = evaluate_dirs(&a.pred, &a.reference, &cfg.metrics)?;
    let (csv, _) = write_report(&report, &out)?;
    cfg.write_echo(&out)?;
    for name in &report.unmatched {
        log::warn!("unmatched {name}");
    }
    let m = &report.mean;
    println!(
        "{} pairs: mPSNR {:.3} dB, SSIM {:.4}, log-PSNR {:.3} dB ({})",
        m.count,
        m.mpsnr_db,
        m.ssim,
        m.log_psnr_db,
        csv.display()
    );
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let cfg = GradcheckConfig {
        seeds: a.seeds,
        step: a.step,
        tolerance: a.tolerance,
        samples: a.samples,
        only: a.only,
        fault: a.inject_fault,
    };
    let report = run_gradcheck(&cfg)?;
    if report.cases.is_empty() {
        return Err(Error::InvalidArgument("no gradcheck case matched --only".into()));
    }
    for c in &report.cases {
        println!(
            "{:<24} max rel err {:.3e} over {:>5} probes  {}",
            c.name,
            c.max_rel_err,
            c.probes,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    let passed = report.passed();
    println!(
        "{} cases, worst {:.3e}, tolerance {:.0e}, {:.2} s: {}",
        report.cases.len(),
        report.worst(),
        report.tolerance,
        report.elapsed.as_secs_f64(),
        if passed { "passed" } else { "FAILED" }
    );
    Ok(if passed { EXIT_OK } else { EXIT_FAILURE })
}
