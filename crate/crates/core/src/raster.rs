//! Tiled forward rendering of a Gaussian set and its analytic backward pass.
//!
//! Each pixel value is the plain sum `sum_n c'_n exp(-sigma_n)` over the
//! Gaussians whose truncated footprint covers the pixel center; there is no
//! sorting, no alpha compositing and no normalization.

use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian2D, GaussianSet, PARAMS_PER_GAUSSIAN};
use crate::imagery::ImageBuffer;

pub const TILE: usize = 16;

/// Largest accepted covariance condition number `(s_max / s_min)^2`.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    /// Footprint truncation in standard deviations: a pixel contributes only
    /// when `sigma <= cutoff_sigma^2 / 2`.
    pub cutoff_sigma: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self { cutoff_sigma: 5.0 }
    }
}

/// Inclusive-exclusive pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Half-extents along x and y of the ellipse `sigma = cutoff^2 / 2`.
pub fn footprint_extent(g: &Gaussian2D, cutoff_sigma: f64) -> [f64; 2] {
    let (s1, s2) = (g.scale[0] as f64, g.scale[1] as f64);
    let (sin, cos) = (g.theta as f64 * TAU).sin_cos();
    let sxx = cos * cos * s1 * s1 + sin * sin * s2 * s2;
    let syy = sin * sin * s1 * s1 + cos * cos * s2 * s2;
    [cutoff_sigma * sxx.sqrt(), cutoff_sigma * syy.sqrt()]
}

/// Pixels whose centers may lie inside the truncated footprint, clipped to
/// the canvas; `None` when nothing on the canvas is covered.
pub fn footprint_bbox(g: &Gaussian2D, width: usize, height: usize, cutoff_sigma: f64) -> Option<PixelRect> {
    let c = g.center_px(width, height);
    let [hx, hy] = footprint_extent(g, cutoff_sigma);
    let span = |center: f64, half: f64, len: usize| -> Option<(usize, usize)> {
        // Pixel i has its center at i + 0.5.
        let lo = (center - half - 0.5).ceil().max(0.0);
        let hi = (center + half - 0.5).floor().min(len as f64 - 1.0);
        if !(lo <= hi) {
            return None;
        }
        Some((lo as usize, hi as usize + 1))
    };
    let (x0, x1) = span(c.x, hx, width)?;
    let (y0, y1) = span(c.y, hy, height)?;
    Some(PixelRect { x0, y0, x1, y1 })
}

/// Checks that a Gaussian has a usable covariance.
pub fn validate(g: &Gaussian2D) -> Result<()> {
    if !g.is_finite() {
        return Err(Error::numerical("non-finite Gaussian parameters"));
    }
    let (s1, s2) = (g.scale[0] as f64, g.scale[1] as f64);
    if !(s1 > 0.0 && s2 > 0.0) {
        return Err(Error::invalid(format!("scales must be positive, got ({s1}, {s2})")));
    }
    let ratio = s1.max(s2) / s1.min(s2);
    if ratio * ratio > MAX_CONDITION {
        return Err(Error::numerical(format!(
            "covariance condition number {:.3e} exceeds {MAX_CONDITION:e}",
            ratio * ratio
        )));
    }
    Ok(())
}

/// Per-Gaussian gradients in parameter order
/// `(mu_x, mu_y, s1, s2, theta, r, g, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub grads: Vec<[f64; PARAMS_PER_GAUSSIAN]>,
}

impl RenderGrads {
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.grads.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
struct Splat {
    mx: f32,
    my: f32,
    cos: f32,
    sin: f32,
    inv_s1: f32,
    inv_s2: f32,
    color: [f32; 3],
    rect: PixelRect,
}

impl Splat {
    /// Weights `exp(-sigma)` for pixels `x0..x0 + w.len()` of row `y`, zero past the cutoff.
    #[inline]
    fn row_weights(&self, x0: usize, y: usize, max_sigma: f32, w: &mut [f32]) {
        let dy = y as f32 + 0.5 - self.my;
        for (i, wi) in w.iter_mut().enumerate() {
            let dx = (x0 + i) as f32 + 0.5 - self.mx;
            let u = (self.cos * dx + self.sin * dy) * self.inv_s1;
            let v = (self.cos * dy - self.sin * dx) * self.inv_s2;
            let sigma = 0.5 * (u * u + v * v);
            let e = fast_exp_neg(sigma);
            *wi = if sigma > max_sigma { 0.0 } else { e };
        }
    }
}

/// `exp(-x)` for `x >= 0`, Cephes single-precision polynomial, relative error ~1e-7.
#[inline(always)]
fn fast_exp_neg(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    let x = -x.min(87.0);
    let n = -((-x * LOG2E + 0.5) as i32);
    let nf = n as f32;
    let r = x - nf * 0.693_359_4 - nf * -2.121_944_4e-4;
    let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
        + 1.666_666_5e-1)
        * r
        + 0.5;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((n + 127) << 23) as u32)
}

/// A Gaussian set binned into screen tiles, reusable for a forward and a
/// backward pass over the same parameters.
#[derive(Debug, Clone)]
pub struct RasterPlan {
    width: usize,
    height: usize,
    n: usize,
    tiles_x: usize,
    tiles_y: usize,
    max_sigma: f32,
    splats: Vec<Option<Splat>>,
    /// CSR offsets into `bins`, one slot per tile plus a terminator.
    bin_starts: Vec<usize>,
    /// Gaussian indices per tile, ascending.
    bins: Vec<u32>,
}

impl RasterPlan {
    pub fn new(set: &GaussianSet, config: &RasterConfig) -> Result<Self> {
        let (width, height) = (set.width, set.height);
        if width == 0 || height == 0 {
            return Err(Error::invalid("raster size must be non-zero"));
        }
        if !(config.cutoff_sigma > 0.0) || !config.cutoff_sigma.is_finite() {
            return Err(Error::invalid(format!("cutoff must be positive, got {}", config.cutoff_sigma)));
        }
        let splats = set
            .gaussians
            .iter()
            .map(|g| {
                validate(g)?;
                Ok(footprint_bbox(g, width, height, config.cutoff_sigma).map(|rect| {
                    let c = g.center_px(width, height);
                    let (sin, cos) = (g.theta as f64 * TAU).sin_cos();
                    Splat {
                        mx: c.x as f32,
                        my: c.y as f32,
                        cos: cos as f32,
                        sin: sin as f32,
                        inv_s1: 1.0 / g.scale[0],
                        inv_s2: 1.0 / g.scale[1],
                        color: g.color,
                        rect,
                    }
                }))
            })
            .collect::<Result<Vec<_>>>()?;

        let tiles_x = width.div_ceil(TILE);
        let tiles_y = height.div_ceil(TILE);
        let mut counts = vec![0usize; tiles_x * tiles_y + 1];
        let tile_range = |r: &PixelRect| (r.x0 / TILE, (r.x1 - 1) / TILE, r.y0 / TILE, (r.y1 - 1) / TILE);
        for s in splats.iter().flatten() {
            let (tx0, tx1, ty0, ty1) = tile_range(&s.rect);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    counts[ty * tiles_x + tx + 1] += 1;
                }
            }
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut bins = vec![0u32; *counts.last().unwrap()];
        for (i, s) in splats.iter().enumerate() {
            if let Some(s) = s {
                let (tx0, tx1, ty0, ty1) = tile_range(&s.rect);
                for ty in ty0..=ty1 {
                    for tx in tx0..=tx1 {
                        let t = ty * tiles_x + tx;
                        bins[fill[t]] = i as u32;
                        fill[t] += 1;
                    }
                }
            }
        }
        Ok(Self {
            width,
            height,
            n: set.len(),
            tiles_x,
            tiles_y,
            max_sigma: (0.5 * config.cutoff_sigma * config.cutoff_sigma) as f32,
            splats,
            bin_starts: counts,
            bins,
        })
    }

    fn tile_rect(&self, t: usize) -> PixelRect {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        PixelRect {
            x0: tx * TILE,
            y0: ty * TILE,
            x1: ((tx + 1) * TILE).min(self.width),
            y1: ((ty + 1) * TILE).min(self.height),
        }
    }

    fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Number of (tile, Gaussian) pairs.
    pub fn bin_entries(&self) -> usize {
        self.bins.len()
    }

    pub fn render(&self) -> ImageBuffer {
        let tiles: Vec<Vec<f32>> = (0..self.tile_count())
            .into_par_iter()
            .map(|t| self.render_tile(t))
            .collect();
        let mut data = vec![0.0f32; self.width * self.height * 3];
        for (t, buf) in tiles.iter().enumerate() {
            let r = self.tile_rect(t);
            let tw = r.width() * 3;
            for (row, y) in (r.y0..r.y1).enumerate() {
                let dst = (y * self.width + r.x0) * 3;
                data[dst..dst + tw].copy_from_slice(&buf[row * tw..(row + 1) * tw]);
            }
        }
        ImageBuffer::from_data(self.width, self.height, data).expect("buffer sized to the raster")
    }

    fn render_tile(&self, t: usize) -> Vec<f32> {
        let tile = self.tile_rect(t);
        let tw = tile.width();
        let mut buf = vec![0.0f32; tw * tile.height() * 3];
        let mut w = [0.0f32; TILE];
        for &gi in &self.bins[self.bin_starts[t]..self.bin_starts[t + 1]] {
            let s = self.splats[gi as usize].as_ref().expect("binned Gaussians are visible");
            let (x0, x1) = (s.rect.x0.max(tile.x0), s.rect.x1.min(tile.x1));
            let (y0, y1) = (s.rect.y0.max(tile.y0), s.rect.y1.min(tile.y1));
            let n = x1 - x0;
            for y in y0..y1 {
                s.row_weights(x0, y, self.max_sigma, &mut w[..n]);
                let row = &mut buf[((y - tile.y0) * tw + x0 - tile.x0) * 3..][..n * 3];
                for (px, &wi) in row.chunks_exact_mut(3).zip(&w[..n]) {
                    px[0] += s.color[0] * wi;
                    px[1] += s.color[1] * wi;
                    px[2] += s.color[2] * wi;
                }
            }
        }
        buf
    }

    /// Gradients of `L = sum(d_out * render())` with respect to every parameter.
    pub fn backward(&self, d_out: &[f32]) -> Result<RenderGrads> {
        if d_out.len() != self.width * self.height * 3 {
            return Err(Error::invalid(format!(
                "output gradient has {} values, expected {}",
                d_out.len(),
                self.width * self.height * 3
            )));
        }
        if d_out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite output gradient"));
        }
        let partials: Vec<Vec<(u32, Moments)>> = (0..self.tile_count())
            .into_par_iter()
            .map(|t| self.backward_tile(t, d_out))
            .collect();
        let mut moments = vec![Moments::default(); self.n];
        for tile in &partials {
            for (gi, m) in tile {
                moments[*gi as usize].add(m);
            }
        }
        let grads = moments
            .iter()
            .zip(&self.splats)
            .map(|(m, s)| match s {
                Some(s) => m.to_grads(s, self.width, self.height),
                None => [0.0; PARAMS_PER_GAUSSIAN],
            })
            .collect();
        Ok(RenderGrads { grads })
    }

    fn backward_tile(&self, t: usize, d_out: &[f32]) -> Vec<(u32, Moments)> {
        let tile = self.tile_rect(t);
        let bin = &self.bins[self.bin_starts[t]..self.bin_starts[t + 1]];
        let mut out = Vec::with_capacity(bin.len());
        let mut w = [0.0f32; TILE];
        for &gi in bin {
            let s = self.splats[gi as usize].as_ref().expect("binned Gaussians are visible");
            let (x0, x1) = (s.rect.x0.max(tile.x0), s.rect.x1.min(tile.x1));
            let (y0, y1) = (s.rect.y0.max(tile.y0), s.rect.y1.min(tile.y1));
            let n = x1 - x0;
            let mut lanes = LaneMoments::default();
            for y in y0..y1 {
                w.fill(0.0);
                s.row_weights(x0, y, self.max_sigma, &mut w[..n]);
                let mut g = [[0.0f32; TILE]; 3];
                let g_row = &d_out[(y * self.width + x0) * 3..][..n * 3];
                for (i, px) in g_row.chunks_exact(3).enumerate() {
                    g[0][i] = px[0];
                    g[1][i] = px[1];
                    g[2][i] = px[2];
                }
                let dy = y as f32 + 0.5 - s.my;
                for i in 0..TILE {
                    let dx = (x0 + i) as f32 + 0.5 - s.mx;
                    // Rotated offsets in pixels and in units of the scales.
                    let ur = s.cos * dx + s.sin * dy;
                    let vr = s.cos * dy - s.sin * dx;
                    let (u, v) = (ur * s.inv_s1, vr * s.inv_s2);
                    let wi = w[i];
                    lanes.color[0][i] += g[0][i] * wi;
                    lanes.color[1][i] += g[1][i] * wi;
                    lanes.color[2][i] += g[2][i] * wi;
                    // dL/dsigma = -w * <g, c'>
                    let ds = -wi * (g[0][i] * s.color[0] + g[1][i] * s.color[1] + g[2][i] * s.color[2]);
                    lanes.uu[i] += ds * u * u;
                    lanes.vv[i] += ds * v * v;
                    lanes.uv[i] += ds * ur * vr;
                    lanes.u[i] += ds * u * s.inv_s1;
                    lanes.v[i] += ds * v * s.inv_s2;
                }
            }
            let m = lanes.fold();
            out.push((gi, m));
        }
        out
    }
}

/// Per-column sums kept in f32, folded into f64 once per tile.
#[derive(Default)]
struct LaneMoments {
    color: [[f32; TILE]; 3],
    uu: [f32; TILE],
    vv: [f32; TILE],
    uv: [f32; TILE],
    u: [f32; TILE],
    v: [f32; TILE],
}

impl LaneMoments {
    fn fold(&self) -> Moments {
        let sum = |l: &[f32; TILE]| l.iter().map(|&x| x as f64).sum::<f64>();
        Moments {
            color: [sum(&self.color[0]), sum(&self.color[1]), sum(&self.color[2])],
            uu: sum(&self.uu),
            vv: sum(&self.vv),
            uv: sum(&self.uv),
            u: sum(&self.u),
            v: sum(&self.v),
        }
    }
}

/// Weighted sums over covered pixels, with `ds = dL/dsigma`:
/// `sum ds u^2`, `sum ds v^2` (scaled offsets), `sum ds ur vr` (pixel offsets),
/// `sum ds u / s1`, `sum ds v / s2`, and `sum g w` per channel.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    color: [f64; 3],
    uu: f64,
    vv: f64,
    uv: f64,
    u: f64,
    v: f64,
}

impl Moments {
    fn add(&mut self, o: &Moments) {
        for c in 0..3 {
            self.color[c] += o.color[c];
        }
        self.uu += o.uu;
        self.vv += o.vv;
        self.uv += o.uv;
        self.u += o.u;
        self.v += o.v;
    }

    fn to_grads(self, s: &Splat, width: usize, height: usize) -> [f64; PARAMS_PER_GAUSSIAN] {
        let (inv1, inv2) = (s.inv_s1 as f64, s.inv_s2 as f64);
        let (cos, sin) = (s.cos as f64, s.sin as f64);
        // sigma = (u^2 + v^2) / 2 with u = ur / s1, v = vr / s2.
        let d_s1 = -self.uu * inv1;
        let d_s2 = -self.vv * inv2;
        // d ur / d phi = vr, d vr / d phi = -ur.
        let d_phi = self.uv * (inv1 * inv1 - inv2 * inv2);
        // d sigma / d dx = (u / s1) cos - (v / s2) sin, and dx = px - mu_px.
        let d_dx = self.u * cos - self.v * sin;
        let d_dy = self.u * sin + self.v * cos;
        [
            -d_dx * 0.5 * width as f64,
            -d_dy * 0.5 * height as f64,
            d_s1,
            d_s2,
            d_phi * TAU,
            self.color[0],
            self.color[1],
            self.color[2],
        ]
    }
}

pub fn render(set: &GaussianSet) -> Result<ImageBuffer> {
    render_with(set, &RasterConfig::default())
}

pub fn render_with(set: &GaussianSet, config: &RasterConfig) -> Result<ImageBuffer> {
    Ok(RasterPlan::new(set, config)?.render())
}

pub fn render_backward(set: &GaussianSet, d_out: &[f32]) -> Result<RenderGrads> {
    render_backward_with(set, d_out, &RasterConfig::default())
}

pub fn render_backward_with(set: &GaussianSet, d_out: &[f32], config: &RasterConfig) -> Result<RenderGrads> {
    RasterPlan::new(set, config)?.backward(d_out)
}
