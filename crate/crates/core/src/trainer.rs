//! Initialization strategies and the Adam fitting loop.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dither::{sample_points, DEFAULT_KERNEL};
use crate::error::{Error, Result};
use crate::g2di;
use crate::gaussian::{
    compose_color, ellipse_theta_to_gaussian, random_init, Gaussian2D, GaussianSet, PARAMS_PER_GAUSSIAN,
};
use crate::geometry::{
    add_boundary_points, dedup_points, delaunay, mean_nn_distance, triangle_ellipse, TriangleMesh, MERGE_DISTANCE,
};
use crate::imagery::{sample_bilinear, ImageBuffer, PixelPos};
use crate::metrics::{d_ssim, mse_l2_grad, MetricReport};
use crate::ppm::{gradient_ppm, pseudo_ppm, quadtree_partition, ProbabilityMap, DEFAULT_K, QUADTREE_MIN_SIZE, QUADTREE_MSE};
use crate::raster::{RasterConfig, RasterPlan};

/// Smallest scale kept after every optimizer step, in pixels.
pub const MIN_SCALE: f32 = 0.01;

/// Largest major-to-minor scale ratio produced by initialization.
pub const MAX_INIT_ANISOTROPY: f64 = 1e4;

/// Opacity logit used for initial colors; `sigmoid(0) = 0.5`.
pub const INIT_OPACITY_LOGIT: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    L2,
    /// `lambda * L2 + (1 - lambda) * D-SSIM`; only the L2 term is differentiated.
    Rec { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PpmSource {
    Gradient,
    /// Positions of a reference decomposition, in pixels.
    Pseudo(Vec<PixelPos>),
}

/// How a structured-init Gaussian scales the color sampled at its center.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ColorWeight {
    /// `A_tri / (2 pi s1 s2)`: the Gaussian carries the triangle's share of the image mass.
    #[default]
    AreaNormalized,
    /// `sigmoid(logit)` opacity, 0.5 at logit 0.
    Opacity(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    Random { n: usize },
    Structured { k: usize, ppm: PpmSource, color: ColorWeight },
    Quadtree { mse_threshold: f64, min_size: usize },
    Given(GaussianSet),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Cosine decay from `lr` to this value over the run.
    pub cosine_min_lr: Option<f64>,
    pub loss: LossKind,
    pub init: InitStrategy,
    pub seed: u64,
    pub log_every: usize,
    /// Wall-clock limit in seconds, measured from the start of initialization.
    pub time_budget: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    pub raster: RasterConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: 1e-3,
            adam: AdamConfig::default(),
            cosine_min_lr: None,
            loss: LossKind::L2,
            init: InitStrategy::Structured {
                k: DEFAULT_KERNEL,
                ppm: PpmSource::Gradient,
                color: ColorWeight::default(),
            },
            seed: 0,
            log_every: 100,
            time_budget: None,
            checkpoint_every: None,
            checkpoint_path: None,
            raster: RasterConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(min) = self.cosine_min_lr {
            if !(min >= 0.0 && min <= self.lr) {
                return Err(Error::invalid(format!("cosine floor {min} must lie in [0, lr]")));
            }
        }
        if let LossKind::Rec { lambda } = self.loss {
            if !lambda.is_finite() {
                return Err(Error::invalid("loss weight must be finite"));
            }
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log interval must be at least 1"));
        }
        if let Some(b) = self.time_budget {
            if !(b >= 0.0) {
                return Err(Error::invalid(format!("time budget must be non-negative, got {b}")));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint interval must be at least 1"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.cosine_min_lr {
            Some(min) if self.iterations > 0 => {
                let t = step as f64 / self.iterations as f64;
                min + 0.5 * (self.lr - min) * (1.0 + (PI * t).cos())
            }
            _ => self.lr,
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f32], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::invalid(format!(
            "shape mismatch: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numerical(format!("non-finite gradient at parameter {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] = (params[i] as f64 - lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
    }
    Ok(())
}

/// Clamps scales to `MIN_SCALE` and wraps rotations into `[0, 1)`.
pub fn constrain(params: &mut [f32]) {
    for p in params.chunks_exact_mut(PARAMS_PER_GAUSSIAN) {
        p[2] = p[2].max(MIN_SCALE);
        p[3] = p[3].max(MIN_SCALE);
        let t = p[4] - p[4].floor();
        p[4] = if t >= 1.0 { 0.0 } else { t };
    }
}

/// Intermediate products of structured initialization.
#[derive(Debug, Clone)]
pub struct StructuredInit {
    pub set: GaussianSet,
    pub ppm: ProbabilityMap,
    pub sampled: Vec<PixelPos>,
    pub mesh: TriangleMesh,
    /// Triangles whose conic fit failed and used the edge-aligned fallback.
    pub fallbacks: usize,
}

/// Boundary spacing used when dithering yields too few points to measure.
pub fn fallback_spacing(width: usize, height: usize) -> f64 {
    width.min(height) as f64 / 4.0
}

/// PPM, dithering, boundary augmentation, triangulation, then one Gaussian
/// per triangle from its fitted ellipse.
pub fn structured_init(img: &ImageBuffer, k: usize, source: &PpmSource) -> Result<StructuredInit> {
    structured_init_with(img, k, source, ColorWeight::default())
}

pub fn structured_init_with(
    img: &ImageBuffer,
    k: usize,
    source: &PpmSource,
    weight: ColorWeight,
) -> Result<StructuredInit> {
    let (width, height) = img.dims();
    let ppm = match source {
        PpmSource::Gradient => gradient_ppm(img)?,
        PpmSource::Pseudo(positions) => pseudo_ppm(positions, width, height, DEFAULT_K)?,
    };
    let sampled = sample_points(&ppm, k)?;
    let spacing = if sampled.len() >= 2 {
        3.0 * mean_nn_distance(&sampled)?
    } else {
        fallback_spacing(width, height)
    };
    let augmented = add_boundary_points(&sampled, width, height, spacing)?;
    let points = dedup_points(&augmented.points, MERGE_DISTANCE);
    if points.len() < 3 {
        return Err(Error::degenerate(format!("only {} usable points for triangulation", points.len())));
    }
    let mesh = delaunay(&points)?;
    let mut gaussians = Vec::with_capacity(mesh.triangles.len());
    let mut fallbacks = 0;
    for t in 0..mesh.triangles.len() {
        let (ellipse, fell_back) = triangle_ellipse(mesh.vertices(t))?;
        fallbacks += usize::from(fell_back);
        let mu = ellipse.center.to_ndc(width, height);
        let major = ellipse.semi_axes[0].max(MIN_SCALE as f64);
        let minor = ellipse.semi_axes[1].max(MIN_SCALE as f64).max(major / MAX_INIT_ANISOTROPY);
        let color = match weight {
            ColorWeight::Opacity(logit) => compose_color(img, mu, logit)?,
            ColorWeight::AreaNormalized => {
                let k = mesh.area(t).abs() / (2.0 * PI * major * minor);
                sample_bilinear(img, mu)?.map(|c| (c as f64 * k) as f32)
            }
        };
        gaussians.push(Gaussian2D {
            mu: [mu.x as f32, mu.y as f32],
            scale: [major as f32, minor as f32],
            theta: ellipse_theta_to_gaussian(ellipse.theta01) as f32,
            color,
        });
    }
    Ok(StructuredInit {
        set: GaussianSet::new(width, height, gaussians),
        ppm,
        sampled,
        mesh,
        fallbacks,
    })
}

/// One isotropic Gaussian per quadtree leaf, with the leaf's mean color and
/// scale `side / sqrt(2 pi)` so its integral equals the leaf area.
pub fn quadtree_init(img: &ImageBuffer, mse_threshold: f64, min_size: usize) -> Result<GaussianSet> {
    let (width, height) = img.dims();
    let norm = (2.0 * PI).sqrt();
    let gaussians = quadtree_partition(img, mse_threshold, min_size)?
        .iter()
        .map(|leaf| {
            let mu = leaf.center().to_ndc(width, height);
            Gaussian2D {
                mu: [mu.x as f32, mu.y as f32],
                scale: [(leaf.w as f64 / norm) as f32, (leaf.h as f64 / norm) as f32],
                theta: 0.0,
                color: leaf.mean_color,
            }
        })
        .collect();
    Ok(GaussianSet::new(width, height, gaussians))
}

pub fn initialize(img: &ImageBuffer, init: &InitStrategy, seed: u64) -> Result<GaussianSet> {
    let (width, height) = img.dims();
    match init {
        InitStrategy::Random { n } => random_init(*n, width, height, seed),
        InitStrategy::Structured { k, ppm, color } => Ok(structured_init_with(img, *k, ppm, *color)?.set),
        InitStrategy::Quadtree { mse_threshold, min_size } => quadtree_init(img, *mse_threshold, *min_size),
        InitStrategy::Given(set) => {
            if (set.width, set.height) != (width, height) {
                return Err(Error::DimensionMismatch {
                    expected: (width, height),
                    got: (set.width, set.height),
                });
            }
            Ok(set.clone())
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub set: GaussianSet,
    pub log: Vec<MetricReport>,
    /// Set when the time budget ended the run early.
    pub stopped_early: bool,
}

impl FitResult {
    pub fn final_report(&self) -> &MetricReport {
        self.log.last().expect("fit always logs the final state")
    }
}

pub fn fit(img: &ImageBuffer, config: &FitConfig) -> Result<FitResult> {
    fit_with_observer(img, config, |_, _| {})
}

/// Runs the fit and calls `observer` with every logged report and the
/// parameters it describes.
pub fn fit_with_observer(
    img: &ImageBuffer,
    config: &FitConfig,
    mut observer: impl FnMut(&MetricReport, &GaussianSet),
) -> Result<FitResult> {
    config.validate()?;
    let start = Instant::now();
    let mut set = initialize(img, &config.init, config.seed)?;
    if set.is_empty() {
        return Err(Error::invalid("initialization produced no Gaussians"));
    }
    let mut params = set.params();
    let mut adam = AdamState::new(params.len());
    let mut log = Vec::new();
    let stopped_early;

    let mut it = 0;
    loop {
        set.set_params(&params);
        let plan = RasterPlan::new(&set, &config.raster)?;
        let render = plan.render();
        let over_budget = config.time_budget.is_some_and(|b| start.elapsed().as_secs_f64() >= b);
        let last = it == config.iterations || over_budget;
        let (mse, grad) = mse_l2_grad(&render, img)?;

        if it % config.log_every == 0 || last {
            if params.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!("non-finite parameters at iteration {it}")));
            }
            let mut report = MetricReport::measure(&render, img, set.len())?;
            report.iteration = it;
            report.loss = match config.loss {
                LossKind::L2 => mse,
                LossKind::Rec { lambda: 1.0 } => mse,
                LossKind::Rec { lambda } => lambda * mse + (1.0 - lambda) * d_ssim(&render, img)?,
            };
            report.wall_time = start.elapsed().as_secs_f64();
            observer(&report, &set);
            log.push(report);
        }
        if let (Some(every), Some(path)) = (config.checkpoint_every, &config.checkpoint_path) {
            if it % every == 0 || last {
                g2di::save(&set, path)?;
            }
        }
        if last {
            stopped_early = over_budget && it < config.iterations;
            if stopped_early {
                if let Some(path) = &config.checkpoint_path {
                    g2di::save(&set, path)?;
                }
            }
            break;
        }

        let grad = match config.loss {
            LossKind::L2 => grad,
            LossKind::Rec { lambda } => grad.iter().map(|g| (*g as f64 * lambda) as f32).collect(),
        };
        let grads = plan.backward(&grad)?.flat();
        adam_step(&mut params, &grads, &mut adam, config.lr_at(it), &config.adam)?;
        constrain(&mut params);
        it += 1;
    }
    Ok(FitResult { set, log, stopped_early })
}

/// Fits a quadtree-initialized decomposition whose centers feed the pseudo PPM.
pub fn reference_decomposition(img: &ImageBuffer, iterations: usize) -> Result<GaussianSet> {
    let config = FitConfig {
        iterations,
        init: InitStrategy::Quadtree {
            mse_threshold: QUADTREE_MSE,
            min_size: QUADTREE_MIN_SIZE,
        },
        log_every: iterations.max(1),
        ..FitConfig::default()
    };
    Ok(fit(img, &config)?.set)
}

/// Metric log as CSV: `iteration, elapsed_s, psnr, ms_ssim, loss, n_gaussians`.
pub fn write_log_csv(log: &[MetricReport], w: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["iteration", "elapsed_s", "psnr", "ms_ssim", "loss", "n_gaussians"])?;
    for r in log {
        csv.write_record([
            r.iteration.to_string(),
            format!("{:.6}", r.wall_time),
            format_db(r.psnr),
            r.ms_ssim.to_string(),
            r.loss.to_string(),
            r.gaussian_count.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn save_log_csv(log: &[MetricReport], path: impl AsRef<Path>) -> Result<()> {
    write_log_csv(log, std::fs::File::create(path)?)
}

pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        v.to_string()
    }
}

/// Metrics of a set's clamped render against a target.
pub fn evaluate(set: &GaussianSet, target: &ImageBuffer) -> Result<MetricReport> {
    if (set.width, set.height) != target.dims() {
        return Err(Error::DimensionMismatch {
            expected: target.dims(),
            got: (set.width, set.height),
        });
    }
    MetricReport::measure(&crate::raster::render(set)?, target, set.len())
}
