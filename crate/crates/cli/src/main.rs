//! `popnet`: train, evaluate and inspect the depth-popping segmentation model.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use popnet_core::checkpoint;
use popnet_core::data::{read_depth, read_rgb, Dataset};
use popnet_core::eval::{evaluate, infer, plot_reports, EvalOptions};
use popnet_core::gradcheck::{self, LossName, Precision, DEFAULT_INSTANCES};
use popnet_core::metrics::{evaluate_dataset, MetricOptions, MetricsReport};
use popnet_core::synth::{export_dataset, random_specs, NoiseModel};
use popnet_core::train::{HyperParams, TrainConfig, Trainer};
use popnet_core::PopError;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Seed override for every seeded command.
const SEED_ENV: &str = "POPNET_SEED";

#[derive(Parser, Debug)]
#[command(name = "popnet", version, about = "Depth popping for RGB-D salient object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train both networks and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Run a checkpoint on one RGB-D pair.
    Infer(InferArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic RGB-D dataset.
    Synth(SynthArgs),
    /// Score a directory of predictions against ground-truth masks.
    Metrics(MetricsArgs),
    /// Plot one or more metric reports as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root with images/, depths/ and masks/.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Turn off one loss term (dep, loc, wtv or sep). Repeatable.
    #[arg(long = "disable-loss", value_name = "LOSS")]
    disable_loss: Vec<String>,
    /// Continue from the checkpoint at --out.
    #[arg(long)]
    resume: bool,
    /// JSON-lines training log (stdout when omitted).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Save a checkpoint every N steps as well as at the end.
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Network width multiplier.
    #[arg(long)]
    width: Option<f64>,
    #[command(flatten)]
    hyper: HyperArgs,
}

/// Overrides for every loss hyperparameter.
#[derive(Args, Debug)]
struct HyperArgs {
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    /// Steepness of the separation logistic.
    #[arg(long)]
    sigma: Option<f64>,
    /// Edge sensitivity of the weighted total variation.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    ssim_window: Option<usize>,
    #[arg(long)]
    ssim_c1: Option<f64>,
    #[arg(long)]
    ssim_c2: Option<f64>,
    #[arg(long)]
    bce_eps: Option<f64>,
}

impl HyperArgs {
    fn apply(&self, h: &mut HyperParams) {
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut h.lambda1, self.lambda1);
        set(&mut h.lambda2, self.lambda2);
        set(&mut h.alpha1, self.alpha1);
        set(&mut h.alpha2, self.alpha2);
        set(&mut h.sigma, self.sigma);
        set(&mut h.gamma, self.gamma);
        set(&mut h.ssim_c1, self.ssim_c1);
        set(&mut h.ssim_c2, self.ssim_c2);
        set(&mut h.bce_eps, self.bce_eps);
        if let Some(v) = self.ssim_window {
            h.ssim_window = v;
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON report path; a CSV is written next to it.
    #[arg(long)]
    report: PathBuf,
    /// Score the ground truth against itself (pipeline sanity check).
    #[arg(long)]
    identity: bool,
    /// Also score the hard separation map.
    #[arg(long)]
    with_separation: bool,
    /// Skip per-image min-max normalization of predictions.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    /// Output directory for the five maps.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check one term only (dep, loc, wtv, sep, sem or separation).
    #[arg(long)]
    loss: Option<String>,
    /// Run in double precision.
    #[arg(long)]
    f64: bool,
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    instances: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of scenes.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Blend of object texture into the background, 0 to 1.
    #[arg(long, default_value_t = 0.0)]
    camouflage: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    blur: usize,
    #[arg(long, default_value_t = 0.0)]
    warp: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Directory of predicted maps (8-bit PNG).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Report JSON files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if let Some(s) = flag {
        return Ok(Some(s));
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .map_err(|_| PopError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
        )),
        Err(_) => Ok(None),
    }
}

fn metric_options(no_normalize: bool) -> MetricOptions {
    MetricOptions { normalize: !no_normalize }
}

fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
    let csv = path.with_extension("csv");
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    if let Some(m) = report.mean {
        println!(
            "{} images: M {:.4}  Fm {:.4}  Sm {:.4}  Em {:.4}",
            report.per_image.len(),
            m.mae,
            m.max_f,
            m.s_measure,
            m.max_e
        );
    }
    if !report.skipped.is_empty() {
        println!("{} skipped", report.skipped.len());
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    for name in &args.disable_loss {
        cfg.losses.disable(name)?;
    }
    if let Some(v) = args.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = args.width {
        cfg.net.width = v;
    }
    if let Some(v) = seed_override(args.seed)? {
        cfg.seed = v;
    }
    args.hyper.apply(&mut cfg.hyper);
    cfg.validate()?;

    let dataset = Dataset::open(&args.data)?;
    info!("loading {} samples from {}", dataset.len(), args.data.display());
    let samples = dataset.load_all()?;
    let mut trainer = if args.resume {
        let (_, state) = checkpoint::load_expecting(&args.out, &cfg)?;
        info!("resuming at step {}", state.step);
        Trainer::with_state(cfg, samples, state)?
    } else {
        Trainer::new(cfg, samples)?
    };

    let mut log: Box<dyn Write> = match &args.log {
        Some(p) => {
            let f = if args.resume {
                File::options().create(true).append(true).open(p)
            } else {
                File::create(p)
            };
            Box::new(BufWriter::new(f.with_context(|| format!("opening {}", p.display()))?))
        }
        None => Box::new(io::stdout().lock()),
    };
    let total = trainer.total_steps();
    let every = args.checkpoint_every.filter(|n| *n > 0).unwrap_or(total.max(1));
    let mut saved = false;
    while trainer.state.step < total {
        let next = ((trainer.state.step / every) + 1) * every;
        let result = trainer.run_until(next.min(total), &mut log);
        log.flush().context("flushing training log")?;
        result?;
        let hash = checkpoint::save(&args.out, &trainer.cfg, &trainer.state)?;
        info!("step {} checkpoint {} sha256 {hash}", trainer.state.step, args.out.display());
        saved = true;
    }
    if !saved {
        checkpoint::save(&args.out, &trainer.cfg, &trainer.state)?;
    }
    eprintln!("trained to step {}; checkpoint {}", trainer.state.step, args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let (cfg, mut state) = checkpoint::load(&args.ckpt)?;
    let samples = Dataset::open(&args.data)?.load_all()?;
    let opts = EvalOptions {
        identity: args.identity,
        with_separation: args.with_separation,
        metrics: metric_options(args.no_normalize),
        ..Default::default()
    };
    let report = evaluate(&cfg, &mut state, &samples, &opts)?;
    write_report(&args.report, &report)
}

fn infer_cmd(args: InferArgs) -> Result<()> {
    let (cfg, mut state) = checkpoint::load(&args.ckpt)?;
    let rgb = read_rgb(&args.image)?;
    let depth = read_depth(&args.depth)?;
    let (_, paths) = infer(&cfg, &mut state, &rgb, &depth, &args.out)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

/// Returns whether every row passed.
fn gradcheck_cmd(args: GradcheckArgs) -> Result<bool> {
    let losses = match &args.loss {
        Some(l) => vec![l.parse::<LossName>()?],
        None => LossName::ALL.to_vec(),
    };
    let precision = if args.f64 { Precision::F64 } else { Precision::F32 };
    let seed = seed_override(args.seed)?.unwrap_or(0);
    let rows = gradcheck::run(&losses, precision, seed, args.instances)?;
    print!("{}", gradcheck::format_table(&rows));
    Ok(rows.iter().all(|r| r.passed))
}

fn synth(args: SynthArgs) -> Result<()> {
    if args.n == 0 {
        bail!(PopError::Config("--n must be positive".into()));
    }
    let noise = NoiseModel {
        sigma: args.noise_sigma,
        blur_radius: args.blur,
        warp_amplitude: args.warp,
        dropout_rate: args.dropout,
    };
    noise.validate()?;
    if !(0.0..=1.0).contains(&args.camouflage) {
        bail!(PopError::Config(format!("--camouflage must be in [0, 1], got {}", args.camouflage)));
    }
    let seed = seed_override(args.seed)?.unwrap_or(0);
    let specs = random_specs(args.n, args.size, args.camouflage, noise, seed);
    let manifest = export_dataset(&specs, &args.out, seed, args.force)?;
    println!("wrote {} scenes to {}", manifest.entries.len(), args.out.display());
    Ok(())
}

fn metrics_cmd(args: MetricsArgs) -> Result<()> {
    let report = evaluate_dataset(&args.pred, &args.gt, &metric_options(args.no_normalize))?;
    if report.per_image.is_empty() {
        bail!(PopError::Data(format!(
            "no prediction in {} matched a mask in {}",
            args.pred.display(),
            args.gt.display()
        )));
    }
    write_report(&args.report, &report)
}

fn plot(args: PlotArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(args.reports.len());
    for p in &args.reports {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        let report = MetricsReport::from_json(&text).with_context(|| format!("malformed report {}", p.display()))?;
        reports.push((name, report));
    }
    fs::write(&args.out, plot_reports(&reports)?).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|c| c.downcast_ref::<io::Error>().is_some()) {
        return EXIT_DATA;
    }
    match err.chain().find_map(|c| c.downcast_ref::<PopError>()) {
        Some(PopError::Numeric(_)) => EXIT_NUMERIC,
        Some(e) if e.is_data_error() => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Gradcheck(a) => match gradcheck_cmd(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::from(EXIT_NUMERIC);
            }
            Err(e) => Err(e),
        },
        Command::Synth(a) => synth(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
