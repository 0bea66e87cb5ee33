#![allow(dead_code)]

use std::path::PathBuf;

use gsimage_core::{Gaussian2D, GaussianSet, ImageBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const IMAGES: [&str; 4] = ["astronaut", "coffee", "chelsea", "rocket"];

pub fn asset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets").join(format!("{name}.png"))
}

pub fn load(name: &str) -> ImageBuffer {
    ImageBuffer::load(asset(name)).expect("bundled image")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random Gaussians with pixel-space scales drawn from `scale`.
pub fn random_scene(
    rng: &mut ChaCha8Rng,
    n: usize,
    width: usize,
    height: usize,
    mu: f32,
    scale: (f32, f32),
) -> GaussianSet {
    let gaussians = (0..n)
        .map(|_| Gaussian2D {
            mu: [rng.gen_range(-mu..mu), rng.gen_range(-mu..mu)],
            scale: [rng.gen_range(scale.0..scale.1), rng.gen_range(scale.0..scale.1)],
            theta: rng.gen_range(0.0..1.0),
            color: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
        })
        .collect();
    GaussianSet::new(width, height, gaussians)
}

/// Parameters of one Gaussian in f64, in storage order.
pub fn params64(g: &Gaussian2D) -> [f64; 8] {
    [
        g.mu[0] as f64,
        g.mu[1] as f64,
        g.scale[0] as f64,
        g.scale[1] as f64,
        g.theta as f64,
        g.color[0] as f64,
        g.color[1] as f64,
        g.color[2] as f64,
    ]
}

/// Unculled per-pixel evaluation through the inverse covariance
/// `R diag(s^2) R^T`, in f64.
pub fn brute_render(width: usize, height: usize, gaussians: &[[f64; 8]]) -> Vec<f64> {
    let mut out = vec![0.0; width * height * 3];
    for p in gaussians {
        let cx = (p[0] + 1.0) * width as f64 / 2.0;
        let cy = (p[1] + 1.0) * height as f64 / 2.0;
        let (s1, s2) = (p[2], p[3]);
        let a = p[4] * 2.0 * std::f64::consts::PI;
        let (c, s) = (a.cos(), a.sin());
        let sxx = c * c * s1 * s1 + s * s * s2 * s2;
        let syy = s * s * s1 * s1 + c * c * s2 * s2;
        let sxy = c * s * (s1 * s1 - s2 * s2);
        let det = sxx * syy - sxy * sxy;
        let (ixx, iyy, ixy) = (syy / det, sxx / det, -sxy / det);
        for y in 0..height {
            for x in 0..width {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let sigma = 0.5 * (ixx * dx * dx + 2.0 * ixy * dx * dy + iyy * dy * dy);
                let w = (-sigma).exp();
                let o = (y * width + x) * 3;
                for k in 0..3 {
                    out[o + k] += p[5 + k] * w;
                }
            }
        }
    }
    out
}

/// Circumcircle test by the lifted 3x3 determinant, positive when `d` is
/// strictly inside the circle through the counter-clockwise `a, b, c`.
pub fn incircle_det(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> f64 {
    let r = |p: [f64; 2]| [p[0] - d[0], p[1] - d[1], (p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)];
    let (a, b, c) = (r(a), r(b), r(c));
    a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])
}

pub fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}
