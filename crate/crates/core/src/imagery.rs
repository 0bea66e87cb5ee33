//! RGB image buffers, coordinate conventions and pixel sampling.
//!
//! Pixel `(i, j)` (row `i`, column `j`) has its center at continuous pixel
//! coordinates `(j + 0.5, i + 0.5)`. Normalized device coordinates map the
//! canvas onto `[-1, 1]^2` with `x_ndc = 2 * x_px / W - 1`.

use std::path::Path;

use image::{ImageReader, RgbImage};

use crate::error::{Error, Result};

/// An `H x W x 3` image stored row-major as `f32` RGB triples.
///
/// Images loaded from disk hold values in `[0, 1]`. Rendered buffers may
/// leave that range; they are clamped on export.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "buffer of {} values cannot hold a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// True when every channel value lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamped(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn transposed(&self) -> Self {
        Self::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }

    /// Crops the rectangle `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::invalid("crop rectangle outside the image"));
        }
        Ok(Self::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    /// Quantizes to 8 bits: clamp to `[0, 1]`, scale by 255, round half away from zero.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| quantize_u8(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    /// Loads an 8-bit image; alpha is dropped and gray is expanded to RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = ImageReader::open(path.as_ref())?
            .with_guessed_format()?
            .decode()?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }
}

#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A single-channel `H x W` grid of reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self { width, height, values }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn transposed(&self) -> Self {
        Self::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }
}

/// Continuous pixel coordinates; the canvas spans `[0, W) x [0, H)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelPos {
    pub x: f64,
    pub y: f64,
}

impl PixelPos {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn to_ndc(self, width: usize, height: usize) -> NdcPos {
        NdcPos {
            x: 2.0 * self.x / width as f64 - 1.0,
            y: 2.0 * self.y / height as f64 - 1.0,
        }
    }

    pub fn dist(self, other: PixelPos) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn dist2(self, other: PixelPos) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Normalized device coordinates in `[-1, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NdcPos {
    pub x: f64,
    pub y: f64,
}

impl NdcPos {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn to_pixel(self, width: usize, height: usize) -> PixelPos {
        PixelPos {
            x: (self.x + 1.0) * 0.5 * width as f64,
            y: (self.y + 1.0) * 0.5 * height as f64,
        }
    }
}

/// Bilinear sample at an NDC position.
///
/// Exact on pixel centers; positions outside the span of pixel centers clamp
/// to the edge.
pub fn sample_bilinear(img: &ImageBuffer, pos: NdcPos) -> Result<[f32; 3]> {
    if !pos.x.is_finite() || !pos.y.is_finite() {
        return Err(Error::invalid("non-finite sampling position"));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::invalid("cannot sample an empty image"));
    }
    let p = pos.to_pixel(img.width, img.height);
    let (x0, x1, tx) = lerp_taps(p.x - 0.5, img.width);
    let (y0, y1, ty) = lerp_taps(p.y - 0.5, img.height);
    let a = img.get(x0, y0);
    let b = img.get(x1, y0);
    let c = img.get(x0, y1);
    let d = img.get(x1, y1);
    let mut out = [0.0f32; 3];
    for ch in 0..3 {
        let top = a[ch] as f64 * (1.0 - tx) + b[ch] as f64 * tx;
        let bottom = c[ch] as f64 * (1.0 - tx) + d[ch] as f64 * tx;
        out[ch] = (top * (1.0 - ty) + bottom * ty) as f32;
    }
    Ok(out)
}

fn lerp_taps(coord: f64, len: usize) -> (usize, usize, f64) {
    let c = coord.clamp(0.0, (len - 1) as f64);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, c - i0 as f64)
}

/// Rec. 601 luma of every pixel.
pub fn luma(img: &ImageBuffer) -> ScalarGrid {
    ScalarGrid::from_fn(img.width, img.height, |x, y| {
        let [r, g, b] = img.get(x, y);
        0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
    })
}

/// Sobel gradient magnitude of the luma channel with replicate padding.
pub fn luma_gradient_magnitude(img: &ImageBuffer) -> Result<ScalarGrid> {
    if img.width < 3 || img.height < 3 {
        return Err(Error::invalid(format!(
            "{}x{} image is smaller than the 3x3 Sobel kernel",
            img.width, img.height
        )));
    }
    let l = luma(img);
    let (w, h) = (l.width as isize, l.height as isize);
    let at = |x: isize, y: isize| l.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
    Ok(ScalarGrid::from_fn(l.width, l.height, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
        let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        gx.hypot(gy)
    }))
}
