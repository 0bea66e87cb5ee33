//! The 2D Gaussian primitive and the formulas that assemble its attributes.
//!
//! A Gaussian carries eight parameters: an NDC position, two pixel-unit
//! scales, a rotation `theta` normalized to `[0, 1]` (angle `theta * 2pi`),
//! and an RGB color with opacity already folded in.

use std::f64::consts::TAU;

use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::FittedEllipse;
use crate::imagery::{sample_bilinear, ImageBuffer, NdcPos, PixelPos};

/// Number of scalar parameters per Gaussian.
pub const PARAMS_PER_GAUSSIAN: usize = 8;

/// Offsets into the flat parameter layout shared by gradients, the optimizer
/// and the model file: `mu_x, mu_y, s1, s2, theta, r, g, b`.
pub mod param {
    pub const MU_X: usize = 0;
    pub const MU_Y: usize = 1;
    pub const S1: usize = 2;
    pub const S2: usize = 3;
    pub const THETA: usize = 4;
    pub const R: usize = 5;
    pub const G: usize = 6;
    pub const B: usize = 7;
}

/// Clamp applied to `e_theta` before taking its logit.
pub const LOGIT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D {
    /// Center in NDC.
    pub mu: [f32; 2],
    /// Standard deviations along the rotated axes, in pixels.
    pub scale: [f32; 2],
    /// Normalized rotation; the angle in radians is `theta * 2pi`.
    pub theta: f32,
    /// Color premultiplied by opacity.
    pub color: [f32; 3],
}

impl Gaussian2D {
    pub fn to_params(&self) -> [f32; PARAMS_PER_GAUSSIAN] {
        [
            self.mu[0],
            self.mu[1],
            self.scale[0],
            self.scale[1],
            self.theta,
            self.color[0],
            self.color[1],
            self.color[2],
        ]
    }

    pub fn from_params(p: &[f32]) -> Self {
        Self {
            mu: [p[0], p[1]],
            scale: [p[2], p[3]],
            theta: p[4],
            color: [p[5], p[6], p[7]],
        }
    }

    pub fn covariance(&self) -> Result<Matrix2<f64>> {
        covariance_from_rs(self.scale[0] as f64, self.scale[1] as f64, self.theta as f64)
    }

    pub fn center_px(&self, width: usize, height: usize) -> PixelPos {
        NdcPos::new(self.mu[0] as f64, self.mu[1] as f64).to_pixel(width, height)
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
    }
}

/// An ordered set of Gaussians targeting a `width x height` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub width: usize,
    pub height: usize,
    pub gaussians: Vec<Gaussian2D>,
}

impl GaussianSet {
    pub fn new(width: usize, height: usize, gaussians: Vec<Gaussian2D>) -> Self {
        Self {
            width,
            height,
            gaussians,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn params(&self) -> Vec<f32> {
        self.gaussians.iter().flat_map(|g| g.to_params()).collect()
    }

    pub fn set_params(&mut self, params: &[f32]) {
        debug_assert_eq!(params.len(), self.len() * PARAMS_PER_GAUSSIAN);
        for (g, p) in self
            .gaussians
            .iter_mut()
            .zip(params.chunks_exact(PARAMS_PER_GAUSSIAN))
        {
            *g = Gaussian2D::from_params(p);
        }
    }

    pub fn from_params(width: usize, height: usize, params: &[f32]) -> Self {
        let gaussians = params
            .chunks_exact(PARAMS_PER_GAUSSIAN)
            .map(Gaussian2D::from_params)
            .collect();
        Self::new(width, height, gaussians)
    }

    /// Concatenates two sets that target the same raster.
    pub fn union(&self, other: &GaussianSet) -> Result<GaussianSet> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch {
                expected: (self.width, self.height),
                got: (other.width, other.height),
            });
        }
        let mut gaussians = self.gaussians.clone();
        gaussians.extend_from_slice(&other.gaussians);
        Ok(Self::new(self.width, self.height, gaussians))
    }

    /// Gaussian centers in pixel coordinates.
    pub fn centers_px(&self) -> Vec<PixelPos> {
        self.gaussians
            .iter()
            .map(|g| g.center_px(self.width, self.height))
            .collect()
    }

    /// Learnable parameter count in thousands.
    pub fn params_k(&self) -> f64 {
        (PARAMS_PER_GAUSSIAN * self.len()) as f64 / 1000.0
    }
}

/// Maps a normalized rotation to radians.
#[inline]
pub fn theta01_to_angle(theta01: f64) -> f64 {
    theta01 * TAU
}

/// Converts an ellipse orientation normalized with period pi into the
/// Gaussian's period-2pi normalization.
#[inline]
pub fn ellipse_theta_to_gaussian(ellipse_theta01: f64) -> f64 {
    0.5 * ellipse_theta01
}

/// `Sigma = (R S)(R S)^T` for scales `s1, s2` and normalized rotation `theta01`.
pub fn covariance_from_rs(s1: f64, s2: f64, theta01: f64) -> Result<Matrix2<f64>> {
    if !(s1 > 0.0 && s2 > 0.0) || !s1.is_finite() || !s2.is_finite() {
        return Err(Error::invalid(format!("scales must be positive, got ({s1}, {s2})")));
    }
    if !theta01.is_finite() {
        return Err(Error::invalid("rotation must be finite"));
    }
    let (sin, cos) = theta01_to_angle(theta01).sin_cos();
    let rs = Matrix2::new(cos * s1, -sin * s2, sin * s1, cos * s2);
    Ok(rs * rs.transpose())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Scale-offset activation, bounded in `(0, 3)`.
///
/// Left branch `0.5 e^{x/2}` for `x < 0`; right branch
/// `3 - ln(1 + e^{5 - x/2}) / 2` for `x >= 0`. The branches disagree at zero
/// by about 3.4e-3.
pub fn scale_activation(x: f64) -> f64 {
    if x < 0.0 {
        0.5 * (0.5 * x).exp()
    } else {
        // ln(1 + e^t) computed without overflow.
        let t = 5.0 - 0.5 * x;
        let softplus = if t > 30.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
        3.0 - 0.5 * softplus
    }
}

/// Final scales from activated offsets and the ellipse's reference axes.
pub fn compose_scaling(o_sx: f64, o_sy: f64, ellipse: &FittedEllipse) -> Result<[f64; 2]> {
    let [sxe, sye] = ellipse.semi_axes;
    if !(sxe > 0.0 && sye > 0.0) {
        return Err(Error::degenerate(format!(
            "reference ellipse axes must be positive, got ({sxe}, {sye})"
        )));
    }
    if !o_sx.is_finite() || !o_sy.is_finite() {
        return Err(Error::invalid("scale offsets must be finite"));
    }
    Ok([scale_activation(o_sx) * sxe, scale_activation(o_sy) * sye])
}

/// `sigmoid(logit(e_theta) + tanh(o_theta))`.
///
/// `e_theta01` must lie strictly inside `(0, 1)`; it is clamped to
/// `[LOGIT_EPS, 1 - LOGIT_EPS]` before the logit.
pub fn compose_rotation(o_theta: f64, e_theta01: f64) -> Result<f64> {
    if !(e_theta01 > 0.0 && e_theta01 < 1.0) {
        return Err(Error::invalid(format!(
            "reference rotation {e_theta01} has no logit"
        )));
    }
    if !o_theta.is_finite() {
        return Err(Error::invalid("rotation offset must be finite"));
    }
    let e = e_theta01.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    Ok(sigmoid(logit(e) + o_theta.tanh()))
}

/// Image color at `pos` scaled by `sigmoid(o)`.
pub fn compose_color(img: &ImageBuffer, pos: NdcPos, opacity_logit: f64) -> Result<[f32; 3]> {
    if opacity_logit.is_nan() {
        return Err(Error::invalid("opacity logit is NaN"));
    }
    let w = sigmoid(opacity_logit);
    let c = sample_bilinear(img, pos)?;
    Ok(c.map(|v| (v as f64 * w) as f32))
}

/// Convex combination of triangle vertices.
pub fn barycentric_position(bc: [f64; 3], tri: [NdcPos; 3]) -> Result<NdcPos> {
    let sum: f64 = bc.iter().sum();
    if bc.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "barycentric weights {bc:?} are not a convex combination"
        )));
    }
    Ok(NdcPos::new(
        bc[0] * tri[0].x + bc[1] * tri[1].x + bc[2] * tri[2].x,
        bc[0] * tri[0].y + bc[1] * tri[1].y + bc[2] * tri[2].y,
    ))
}

/// Uniform random initialization: positions in `[-1, 1]^2`, scales in
/// `[0.5, 1.5]`, rotation and color in `[0, 1]`.
pub fn random_init(n: usize, width: usize, height: usize, seed: u64) -> Result<GaussianSet> {
    if n == 0 {
        return Err(Error::invalid("cannot initialize zero Gaussians"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| Gaussian2D {
            mu: [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)],
            scale: [rng.gen_range(0.5..=1.5), rng.gen_range(0.5..=1.5)],
            theta: rng.gen_range(0.0..=1.0),
            color: [rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)],
        })
        .collect();
    Ok(GaussianSet::new(width, height, gaussians))
}
