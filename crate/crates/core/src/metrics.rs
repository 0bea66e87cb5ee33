//! Reconstruction losses and image quality metrics.

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imagery::ImageBuffer;
use crate::ppm::ProbabilityMap;

const SUM_CHUNK: usize = 4096;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Sums `f(i)` over `0..n` in fixed-size chunks; the result does not depend
/// on the number of threads.
pub fn deterministic_sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let chunks = n.div_ceil(SUM_CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| (c * SUM_CHUNK..((c + 1) * SUM_CHUNK).min(n)).map(&f).sum())
        .collect();
    partial.iter().sum()
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            got: b.dims(),
        });
    }
    if a.data().is_empty() {
        return Err(Error::invalid("images are empty"));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse_l2(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let (x, y) = (a.data(), b.data());
    let sum = deterministic_sum(x.len(), |i| {
        let d = x[i] as f64 - y[i] as f64;
        d * d
    });
    Ok(sum / x.len() as f64)
}

/// MSE and its gradient with respect to `a`, `2 (a - b) / (3 H W)`.
pub fn mse_l2_grad(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, Vec<f32>)> {
    let mse = mse_l2(a, b)?;
    let scale = 2.0 / a.data().len() as f64;
    let grad = a
        .data()
        .par_iter()
        .zip(b.data())
        .map(|(&x, &y)| (scale * (x as f64 - y as f64)) as f32)
        .collect();
    Ok((mse, grad))
}

/// Peak signal-to-noise ratio in dB for unit peak; `+inf` when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(psnr_from_mse(mse_l2(a, b)?))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Single-channel plane.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channels(img: &ImageBuffer) -> [Plane; 3] {
        let (w, h) = img.dims();
        std::array::from_fn(|c| Plane {
            w,
            h,
            v: img.data().iter().skip(c).step_by(3).map(|&x| x as f64).collect(),
        })
    }

    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v.push(0.25 * (self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]));
            }
        }
        Plane { w, h, v }
    }

    /// Separable valid-mode filtering with the SSIM window.
    fn filter(&self, win: &[f64; SSIM_WINDOW]) -> Plane {
        let ow = self.w + 1 - SSIM_WINDOW;
        let oh = self.h + 1 - SSIM_WINDOW;
        let mut tmp = vec![0.0; ow * self.h];
        for y in 0..self.h {
            let row = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                tmp[y * ow + x] = win.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(k, v)| k * v).sum();
            }
        }
        let mut v = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                v[y * ow + x] = win.iter().enumerate().map(|(k, w)| w * tmp[(y + k) * ow + x]).sum();
            }
        }
        Plane { w: ow, h: oh, v }
    }

    fn product(&self, o: &Plane) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&o.v).map(|(a, b)| a * b).collect(),
        }
    }
}

/// Mean SSIM and mean contrast-structure term of one channel.
fn ssim_plane(a: &Plane, b: &Plane) -> (f64, f64) {
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mu_a = a.filter(&win);
    let mu_b = b.filter(&win);
    let aa = a.product(a).filter(&win);
    let bb = b.product(b).filter(&win);
    let ab = a.product(b).filter(&win);
    let n = mu_a.v.len();
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..n {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let var_a = aa.v[i] - ma * ma;
        let var_b = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (var_a + var_b + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        s_sum += l * cs;
        cs_sum += cs;
    }
    (s_sum / n as f64, cs_sum / n as f64)
}

fn check_ssim_size(w: usize, h: usize) -> Result<()> {
    if w.min(h) < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    Ok(())
}

/// Channel-averaged SSIM.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    check_ssim_size(a.width(), a.height())?;
    let (pa, pb) = (Plane::channels(a), Plane::channels(b));
    let per: Vec<f64> = (0..3).into_par_iter().map(|c| ssim_plane(&pa[c], &pb[c]).0).collect();
    Ok(per.iter().sum::<f64>() / 3.0)
}

/// `(1 - SSIM) / 2`.
pub fn d_ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// Number of dyadic scales such that the coarsest keeps at least
/// `SSIM_WINDOW` pixels per side, capped at five.
pub fn ms_ssim_scales(width: usize, height: usize) -> usize {
    let mut m = width.min(height);
    let mut scales = 0;
    while scales < MS_SSIM_WEIGHTS.len() && m >= SSIM_WINDOW {
        scales += 1;
        m /= 2;
    }
    scales
}

/// Multi-scale SSIM averaged over channels; fewer scales with renormalized
/// weights on small images.
pub fn ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    check_ssim_size(a.width(), a.height())?;
    let scales = ms_ssim_scales(a.width(), a.height());
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|w| w / total).collect();
    let (pa, pb) = (Plane::channels(a), Plane::channels(b));
    let per: Vec<f64> = (0..3)
        .into_par_iter()
        .map(|c| {
            let (mut x, mut y) = (pa[c].clone(), pb[c].clone());
            let mut value = 1.0;
            for (j, w) in weights.iter().enumerate() {
                let (s, cs) = ssim_plane(&x, &y);
                let term = if j + 1 == scales { s } else { cs };
                value *= term.max(0.0).powf(*w);
                if j + 1 < scales {
                    x = x.downsample();
                    y = y.downsample();
                }
            }
            value
        })
        .collect();
    Ok((per.iter().sum::<f64>() / 3.0).clamp(0.0, 1.0))
}

/// `lambda * MSE + (1 - lambda) * D-SSIM`.
pub fn rec_loss(a: &ImageBuffer, b: &ImageBuffer, lambda: f64) -> Result<f64> {
    let l2 = mse_l2(a, b)?;
    if lambda == 1.0 {
        return Ok(l2);
    }
    Ok(lambda * l2 + (1.0 - lambda) * d_ssim(a, b)?)
}

/// Mean of `alpha (1 - e^{-|d|})^gamma d^2` with `d = target - pred`.
pub fn focal_mse(target: &ProbabilityMap, pred: &ProbabilityMap, alpha: f64, gamma: f64) -> Result<f64> {
    if target.dims() != pred.dims() {
        return Err(Error::DimensionMismatch {
            expected: target.dims(),
            got: pred.dims(),
        });
    }
    let (t, p) = (target.values(), pred.values());
    if t.is_empty() {
        return Err(Error::invalid("probability maps are empty"));
    }
    let sum = deterministic_sum(t.len(), |i| {
        let d = t[i] - p[i];
        alpha * (1.0 - (-d.abs()).exp()).powf(gamma) * d * d
    });
    Ok(sum / t.len() as f64)
}

/// Quality snapshot of a reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iteration: usize,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ms_ssim: f64,
    pub mse: f64,
    pub loss: f64,
    pub gaussian_count: usize,
    pub wall_time: f64,
}

impl MetricReport {
    /// Metrics of `render` (clamped to `[0, 1]`) against `target`.
    pub fn measure(render: &ImageBuffer, target: &ImageBuffer, gaussian_count: usize) -> Result<Self> {
        let clamped = render.clamped();
        let mse = mse_l2(&clamped, target)?;
        Ok(Self {
            iteration: 0,
            psnr: psnr_from_mse(mse),
            ms_ssim: ms_ssim(&clamped, target)?,
            mse,
            loss: mse,
            gaussian_count,
            wall_time: 0.0,
        })
    }
}

/// Writes infinite PSNR as the string `"inf"`.
pub fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

pub fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("unexpected PSNR value {t:?}"))),
    }
}
