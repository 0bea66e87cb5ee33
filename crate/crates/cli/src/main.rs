//! `gsimage`: fit, render, inspect and benchmark 2D Gaussian image models.
//!
//! Exit codes: 0 success, 1 bad arguments or mismatched inputs, 2 I/O or
//! file-format failure, 3 numerical or geometric failure.
//! Results go to stdout as JSON; diagnostics and progress go to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gsimage_core::dither::DEFAULT_KERNEL;
use gsimage_core::metrics::MetricReport;
use gsimage_core::ppm::{gradient_ppm, pseudo_ppm, DEFAULT_K};
use gsimage_core::raster::{render_with, RasterConfig};
use gsimage_core::trainer::{
    evaluate, fit_with_observer, save_log_csv, ColorWeight, FitConfig, FitResult, InitStrategy, LossKind, PpmSource,
};
use gsimage_core::{g2di, Error, GaussianSet, ImageBuffer};
use serde_json::{json, Value};

const THREADS_ENV: &str = "GSIMAGE_THREADS";

#[derive(Debug)]
enum Failure {
    Args(String),
    Io(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Args(_) => 1,
            Failure::Io(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Args(m) | Failure::Io(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidInput(_) | Error::DimensionMismatch { .. } => Failure::Args(msg),
            Error::Degenerate(_) | Error::Numerical(_) => Failure::Numerical(msg),
            Error::Format { .. } | Error::Io(_) | Error::Image(_) | Error::Csv(_) | Error::Json(_) => Failure::Io(msg),
        }
    }
}

type CmdResult = Result<Value, Failure>;

#[derive(Parser, Debug)]
#[command(name = "gsimage", version, about = "Image representation with 2D Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a Gaussian model to an image.
    Fit(FitArgs),
    /// Render a model to PNG.
    Render {
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = RasterConfig::default().cutoff_sigma)]
        cutoff: f64,
    },
    /// Compute a position probability map.
    Ppm {
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = PpmMode::Gradient)]
        mode: PpmMode,
        /// Reference model whose centers drive pseudo mode.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Neighbour count for pseudo mode.
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        /// PPMF output.
        #[arg(long)]
        out: PathBuf,
        /// Grayscale preview, PNG or PGM by extension; defaults to the output with `.png`.
        #[arg(long)]
        preview: Option<PathBuf>,
        /// Include the values of this row in the output.
        #[arg(long)]
        profile_row: Option<usize>,
    },
    /// Compare a model against an image.
    Eval { image: PathBuf, model: PathBuf },
    /// Structured versus random initialization at matched Gaussian count.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InitKind {
    Random,
    Structured,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PpmMode {
    Gradient,
    Pseudo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ColorMode {
    Area,
    Opacity,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = FitConfig::default().iterations)]
    iters: usize,
    #[arg(long, default_value_t = FitConfig::default().lr)]
    lr: f64,
    /// Cosine decay of the learning rate down to this value.
    #[arg(long)]
    cosine_min_lr: Option<f64>,
    /// `l2` or `rec:<lambda>`.
    #[arg(long, default_value = "l2")]
    loss: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = FitConfig::default().log_every)]
    log_every: usize,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    #[arg(long, default_value_t = RasterConfig::default().cutoff_sigma)]
    cutoff: f64,
}

#[derive(clap::Args, Debug)]
struct FitArgs {
    image: PathBuf,
    #[arg(long, value_enum, default_value_t = InitKind::Structured)]
    init: InitKind,
    /// Gaussian count for random init.
    #[arg(long)]
    num_gaussians: Option<usize>,
    /// Dithering patch size for structured init.
    #[arg(long)]
    kernel: Option<usize>,
    /// `gradient` or `pseudo:<model-path>` for structured init.
    #[arg(long)]
    ppm: Option<String>,
    /// Initial color weighting for structured init.
    #[arg(long, value_enum)]
    color: Option<ColorMode>,
    #[command(flatten)]
    train: TrainArgs,
    /// Model output (G2DI).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metric log output (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    image: PathBuf,
    #[arg(long, default_value_t = DEFAULT_KERNEL)]
    kernel: usize,
    #[command(flatten)]
    train: TrainArgs,
    /// Comparison CSV, one row per strategy and checkpoint.
    #[arg(long)]
    csv: PathBuf,
    /// Whitespace-separated curves for plotting.
    #[arg(long)]
    dat: Option<PathBuf>,
}

fn parse_loss(s: &str) -> Result<LossKind, Failure> {
    if s == "l2" {
        return Ok(LossKind::L2);
    }
    let lambda = s
        .strip_prefix("rec:")
        .and_then(|v| v.parse::<f64>().ok())
        .ok_or_else(|| Failure::Args(format!("unknown loss '{s}', expected l2 or rec:<lambda>")))?;
    Ok(LossKind::Rec { lambda })
}

fn load_image(path: &Path) -> Result<ImageBuffer, Failure> {
    ImageBuffer::load(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<GaussianSet, Failure> {
    g2di::load(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn db(v: f64) -> Value {
    if v.is_infinite() {
        json!("inf")
    } else {
        json!(v)
    }
}

fn report_json(r: &MetricReport) -> Value {
    json!({
        "iteration": r.iteration,
        "psnr": db(r.psnr),
        "ms_ssim": r.ms_ssim,
        "mse": r.mse,
        "loss": r.loss,
        "n_gaussians": r.gaussian_count,
        "wall_time": r.wall_time,
    })
}

fn train_config(t: &TrainArgs, init: InitStrategy) -> Result<FitConfig, Failure> {
    let config = FitConfig {
        iterations: t.iters,
        lr: t.lr,
        cosine_min_lr: t.cosine_min_lr,
        loss: parse_loss(&t.loss)?,
        init,
        seed: t.seed,
        log_every: t.log_every,
        time_budget: t.time_budget,
        raster: RasterConfig { cutoff_sigma: t.cutoff },
        ..FitConfig::default()
    };
    config.validate()?;
    Ok(config)
}

fn run_fit(img: &ImageBuffer, config: &FitConfig, label: &str) -> Result<FitResult, Failure> {
    let result = fit_with_observer(img, config, |r, _| {
        eprintln!(
            "{label} iter {:>6}  psnr {:>7.3}  ms-ssim {:.4}  n {}  {:.2}s",
            r.iteration, r.psnr, r.ms_ssim, r.gaussian_count, r.wall_time
        );
    })?;
    Ok(result)
}

fn structured_source(ppm: Option<&str>) -> Result<PpmSource, Failure> {
    match ppm {
        None | Some("gradient") => Ok(PpmSource::Gradient),
        Some(s) => match s.strip_prefix("pseudo:") {
            Some(path) => Ok(PpmSource::Pseudo(load_model(Path::new(path))?.centers_px())),
            None => Err(Failure::Args(format!("unknown ppm source '{s}', expected gradient or pseudo:<model>"))),
        },
    }
}

fn cmd_fit(a: FitArgs) -> CmdResult {
    let init = match a.init {
        InitKind::Random => {
            if a.kernel.is_some() || a.ppm.is_some() || a.color.is_some() {
                return Err(Failure::Args("--kernel, --ppm and --color require --init structured".into()));
            }
            let n = a.num_gaussians.ok_or_else(|| Failure::Args("--init random requires --num-gaussians".into()))?;
            InitStrategy::Random { n }
        }
        InitKind::Structured => {
            if a.num_gaussians.is_some() {
                return Err(Failure::Args("--num-gaussians requires --init random".into()));
            }
            InitStrategy::Structured {
                k: a.kernel.unwrap_or(DEFAULT_KERNEL),
                ppm: structured_source(a.ppm.as_deref())?,
                color: match a.color {
                    Some(ColorMode::Opacity) => ColorWeight::Opacity(0.0),
                    Some(ColorMode::Area) | None => ColorWeight::AreaNormalized,
                },
            }
        }
    };
    if a.checkpoint_every.is_some() != a.checkpoint.is_some() {
        return Err(Failure::Args("--checkpoint-every and --checkpoint go together".into()));
    }
    let mut config = train_config(&a.train, init)?;
    config.checkpoint_every = a.checkpoint_every;
    config.checkpoint_path = a.checkpoint;
    let img = load_image(&a.image)?;
    let result = run_fit(&img, &config, "fit")?;
    if let Some(out) = &a.out {
        g2di::save(&result.set, out)?;
    }
    if let Some(log) = &a.log {
        save_log_csv(&result.log, log)?;
    }
    let mut summary = report_json(result.final_report());
    summary["stopped_early"] = json!(result.stopped_early);
    Ok(summary)
}

fn cmd_render(model: &Path, out: &Path, cutoff: f64) -> CmdResult {
    let set = load_model(model)?;
    let img = render_with(&set, &RasterConfig { cutoff_sigma: cutoff })?.clamped();
    img.save_png(out)?;
    Ok(json!({ "width": set.width, "height": set.height, "n_gaussians": set.len() }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_ppm(
    image: &Path,
    mode: PpmMode,
    model: Option<&Path>,
    k: usize,
    out: &Path,
    preview: Option<&Path>,
    profile_row: Option<usize>,
) -> CmdResult {
    let img = load_image(image)?;
    let map = match (mode, model) {
        (PpmMode::Gradient, None) => gradient_ppm(&img)?,
        (PpmMode::Gradient, Some(_)) => return Err(Failure::Args("--model is only used in pseudo mode".into())),
        (PpmMode::Pseudo, None) => return Err(Failure::Args("pseudo mode requires --model".into())),
        (PpmMode::Pseudo, Some(path)) => {
            let set = load_model(path)?;
            if (set.width, set.height) != img.dims() {
                return Err(Error::DimensionMismatch { expected: img.dims(), got: (set.width, set.height) }.into());
            }
            pseudo_ppm(&set.centers_px(), set.width, set.height, k)?
        }
    };
    let profile = match profile_row {
        Some(r) if r >= map.height() => {
            return Err(Failure::Args(format!("row {r} is outside a map of height {}", map.height())));
        }
        Some(r) => Some(map.row(r).to_vec()),
        None => None,
    };
    let preview = preview.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("png"));
    map.save_ppmf(out)?;
    map.save_preview(&preview)?;
    let (min, mean, max) = map.stats();
    let mut v = json!({
        "width": map.width(),
        "height": map.height(),
        "min": min,
        "mean": mean,
        "max": max,
        "preview": preview.display().to_string(),
    });
    if let (Some(r), Some(values)) = (profile_row, profile) {
        v["profile_row"] = json!(r);
        v["profile"] = json!(values);
    }
    Ok(v)
}

fn cmd_eval(image: &Path, model: &Path) -> CmdResult {
    let img = load_image(image)?;
    let set = load_model(model)?;
    let r = evaluate(&set, &img)?;
    Ok(json!({
        "psnr": db(r.psnr),
        "ms_ssim": r.ms_ssim,
        "mse": r.mse,
        "n_gaussians": set.len(),
        "params_k": set.params_k(),
    }))
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let img = load_image(&a.image)?;
    let structured = InitStrategy::Structured {
        k: a.kernel,
        ppm: PpmSource::Gradient,
        color: ColorWeight::AreaNormalized,
    };
    let ours = run_fit(&img, &train_config(&a.train, structured)?, "structured")?;
    let n = ours.set.len();
    let base = run_fit(&img, &train_config(&a.train, InitStrategy::Random { n })?, "random")?;

    let mut csv = String::from("strategy,iteration,elapsed_s,psnr,ms_ssim,n_gaussians\n");
    for (name, res) in [("structured", &ours), ("random", &base)] {
        for r in &res.log {
            csv.push_str(&format!(
                "{name},{},{:.6},{},{},{}\n",
                r.iteration,
                r.wall_time,
                gsimage_core::trainer::format_db(r.psnr),
                r.ms_ssim,
                r.gaussian_count
            ));
        }
    }
    fs::write(&a.csv, csv).map_err(Error::from)?;
    if let Some(dat) = &a.dat {
        let mut text = String::from("# iteration elapsed_structured psnr_structured elapsed_random psnr_random\n");
        for (s, r) in ours.log.iter().zip(&base.log) {
            text.push_str(&format!(
                "{} {:.6} {:.6} {:.6} {:.6}\n",
                s.iteration, s.wall_time, s.psnr, r.wall_time, r.psnr
            ));
        }
        fs::write(dat, text).map_err(Error::from)?;
    }
    let last = |res: &FitResult| report_json(res.final_report());
    Ok(json!({
        "n_gaussians": n,
        "structured": { "initial": report_json(&ours.log[0]), "final": last(&ours) },
        "random": { "initial": report_json(&base.log[0]), "final": last(&base) },
    }))
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Args(format!("{THREADS_ENV} must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Args(format!("cannot configure {threads} threads: {e}")))
}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Render { model, out, cutoff } => cmd_render(&model, &out, cutoff),
        Command::Ppm { image, mode, model, k, out, preview, profile_row } => {
            cmd_ppm(&image, mode, model.as_deref(), k, &out, preview.as_deref(), profile_row)
        }
        Command::Eval { image, model } => cmd_eval(&image, &model),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(v) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{v}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("gsimage: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
