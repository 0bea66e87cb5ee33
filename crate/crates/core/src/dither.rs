//! Turning a probability map into sample points: k x k max pooling followed
//! by Floyd-Steinberg error diffusion.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imagery::PixelPos;
use crate::ppm::ProbabilityMap;

pub const DEFAULT_KERNEL: usize = 3;
pub const THRESHOLD: f64 = 0.5;

/// Patch maxima, row-major `ph x pw`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub pw: usize,
    pub ph: usize,
    pub k: usize,
    pub values: Vec<f64>,
}

impl PatchGrid {
    pub fn from_values(pw: usize, ph: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != pw * ph {
            return Err(Error::invalid(format!("{} values cannot fill a {pw}x{ph} patch grid", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("patch value {v} outside [0, 1]")));
        }
        Ok(Self { pw, ph, k, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.pw + j]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Activated patches, row-major `height x width`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGrid {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryGrid {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// 1-bit grayscale PNG, activated patches white.
    pub fn write_png(&self, w: impl Write) -> Result<()> {
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header().map_err(png_err)?;
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for i in 0..self.height {
            for j in 0..self.width {
                if self.get(i, j) {
                    packed[i * stride + j / 8] |= 0x80 >> (j % 8);
                }
            }
        }
        writer.write_image_data(&packed).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
        Ok(())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_png(std::io::BufWriter::new(file))
    }
}

fn png_err(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    }
}

/// Splits the map into `k x k` patches (edge patches cover the remainder)
/// and keeps each patch's maximum.
pub fn max_pool_patches(ppm: &ProbabilityMap, k: usize) -> Result<PatchGrid> {
    let (w, h) = ppm.dims();
    if k == 0 {
        return Err(Error::invalid("patch size must be at least 1"));
    }
    if k > w.min(h) {
        return Err(Error::invalid(format!("patch size {k} exceeds the {w}x{h} map")));
    }
    let (pw, ph) = (w.div_ceil(k), h.div_ceil(k));
    let mut values = vec![0.0f64; pw * ph];
    for y in 0..h {
        for x in 0..w {
            let slot = &mut values[(y / k) * pw + x / k];
            *slot = slot.max(ppm.get(x, y));
        }
    }
    Ok(PatchGrid { pw, ph, k, values })
}

/// Serpentine Floyd-Steinberg error diffusion with threshold 0.5. Error that
/// would land outside the grid is dropped.
pub fn floyd_steinberg(grid: &PatchGrid) -> BinaryGrid {
    let (w, h) = (grid.pw, grid.ph);
    let mut buf = grid.values.clone();
    let mut bits = vec![false; w * h];
    for i in 0..h {
        let forward = i % 2 == 0;
        for step in 0..w {
            let j = if forward { step } else { w - 1 - step };
            let old = buf[i * w + j];
            let on = old >= THRESHOLD;
            bits[i * w + j] = on;
            let err = old - if on { 1.0 } else { 0.0 };
            let dir: isize = if forward { 1 } else { -1 };
            let mut push = |di: usize, dj: isize, weight: f64| {
                let (ii, jj) = (i + di, j as isize + dj);
                if ii < h && jj >= 0 && (jj as usize) < w {
                    buf[ii * w + jj as usize] += err * weight;
                }
            };
            push(0, dir, 7.0 / 16.0);
            push(1, -dir, 3.0 / 16.0);
            push(1, 0, 5.0 / 16.0);
            push(1, dir, 1.0 / 16.0);
        }
    }
    BinaryGrid { width: w, height: h, bits }
}

/// Centers of activated patches in image pixel coordinates, clamped to the
/// outermost pixel centers, in row-major patch order.
pub fn extract_points(bits: &BinaryGrid, k: usize, width: usize, height: usize) -> Result<Vec<PixelPos>> {
    if k == 0 || bits.width != width.div_ceil(k) || bits.height != height.div_ceil(k) {
        return Err(Error::invalid(format!(
            "{}x{} patch grid does not match a {width}x{height} image at k = {k}",
            bits.width, bits.height
        )));
    }
    let mut out = Vec::with_capacity(bits.count());
    for i in 0..bits.height {
        for j in 0..bits.width {
            if bits.get(i, j) {
                out.push(PixelPos::new(
                    ((j as f64 + 0.5) * k as f64).min(width as f64 - 0.5),
                    ((i as f64 + 0.5) * k as f64).min(height as f64 - 0.5),
                ));
            }
        }
    }
    Ok(out)
}

/// Max-pool, dither and extract in one call.
pub fn sample_points(ppm: &ProbabilityMap, k: usize) -> Result<Vec<PixelPos>> {
    let grid = max_pool_patches(ppm, k)?;
    extract_points(&floyd_steinberg(&grid), k, ppm.width(), ppm.height())
}

pub fn write_points_csv(points: &[PixelPos], w: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["x", "y"])?;
    for p in points {
        csv.write_record([p.x.to_string(), p.y.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn save_points_csv(points: &[PixelPos], path: impl AsRef<Path>) -> Result<()> {
    write_points_csv(points, std::fs::File::create(path)?)
}
