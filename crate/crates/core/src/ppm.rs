//! Position probability maps: per-pixel likelihood of placing a Gaussian.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imagery::{luma_gradient_magnitude, ImageBuffer, PixelPos, ScalarGrid};
use crate::spatial::PointIndex;

pub const DEFAULT_K: usize = 10;
pub const QUADTREE_MSE: f64 = 0.02;
pub const QUADTREE_MIN_SIZE: usize = 4;

pub const PPMF_MAGIC: &[u8; 4] = b"PPMF";
pub const PPMF_HEADER_LEN: usize = 16;

/// Row-major `H x W` probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::invalid(format!(
                "{} values cannot fill a {width}x{height} map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.values[y * self.width..(y + 1) * self.width]
    }

    /// `(min, mean, max)`.
    pub fn stats(&self) -> (f64, f64, f64) {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = self.values.iter().sum::<f64>() / self.values.len().max(1) as f64;
        (min, mean, max)
    }

    pub fn write_ppmf(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(PPMF_HEADER_LEN + 4 * self.values.len());
        buf.extend_from_slice(PPMF_MAGIC);
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&[0u8; 4]);
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_ppmf(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::decode_ppmf(&bytes)
    }

    pub fn decode_ppmf(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::Format {
            kind: "PPMF",
            offset: offset as u64,
            msg,
        };
        if bytes.len() < PPMF_HEADER_LEN {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        if &bytes[..4] != PPMF_MAGIC {
            return Err(fail(0, "bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (width, height) = (u32_at(4), u32_at(8));
        let expected = PPMF_HEADER_LEN + 4 * width * height;
        if bytes.len() != expected {
            return Err(fail(
                bytes.len().min(expected),
                format!("expected {expected} bytes for {width}x{height}, found {}", bytes.len()),
            ));
        }
        let values = bytes[PPMF_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_values(width, height, values).map_err(|e| fail(PPMF_HEADER_LEN, e.to_string()))
    }

    pub fn save_ppmf(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_ppmf(std::io::BufWriter::new(file))
    }

    pub fn load_ppmf(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_ppmf(&std::fs::read(path)?)
    }

    fn to_gray8(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    /// 8-bit binary PGM.
    pub fn write_pgm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_gray8())?;
        Ok(())
    }

    /// 8-bit grayscale preview; PGM for a `.pgm` extension, PNG otherwise.
    pub fn save_preview(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            let file = std::fs::File::create(path)?;
            return self.write_pgm(std::io::BufWriter::new(file));
        }
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_gray8())
            .expect("buffer sized to the map");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// One square block of the quadtree partition, clipped to the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadtreeLeaf {
    pub x0: usize,
    pub y0: usize,
    /// Nominal power-of-two side length.
    pub size: usize,
    /// Covered extent after clipping to the image.
    pub w: usize,
    pub h: usize,
    pub mean_color: [f32; 3],
}

impl QuadtreeLeaf {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn center(&self) -> PixelPos {
        PixelPos::new(self.x0 as f64 + 0.5 * self.w as f64, self.y0 as f64 + 0.5 * self.h as f64)
    }
}

fn block_stats(img: &ImageBuffer, x0: usize, y0: usize, w: usize, h: usize) -> ([f32; 3], f64) {
    let mut sum = [0.0f64; 3];
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let p = img.get(x, y);
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
        }
    }
    let n = (w * h) as f64;
    let mean = sum.map(|s| s / n);
    let mut sq = 0.0;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let p = img.get(x, y);
            for c in 0..3 {
                sq += (p[c] as f64 - mean[c]).powi(2);
            }
        }
    }
    (mean.map(|m| m as f32), sq / (3.0 * n))
}

/// Recursive four-way split of the image while the block color MSE exceeds
/// `mse_threshold` and the block is larger than `min_size`. The root block
/// has the smallest power-of-two side covering the image. Leaves are listed
/// in depth-first order (top-left, top-right, bottom-left, bottom-right).
pub fn quadtree_partition(img: &ImageBuffer, mse_threshold: f64, min_size: usize) -> Result<Vec<QuadtreeLeaf>> {
    let (width, height) = img.dims();
    if width == 0 || height == 0 {
        return Err(Error::invalid("image must be non-empty"));
    }
    let min_size = min_size.max(1);
    let root = width.max(height).next_power_of_two();
    let mut leaves = Vec::new();
    let mut stack = vec![(0usize, 0usize, root)];
    while let Some((x0, y0, size)) = stack.pop() {
        if x0 >= width || y0 >= height {
            continue;
        }
        let (w, h) = ((width - x0).min(size), (height - y0).min(size));
        let (mean_color, mse) = block_stats(img, x0, y0, w, h);
        if mse > mse_threshold && size > min_size {
            let half = size / 2;
            // Pushed in reverse so the top-left child is processed first.
            for (dx, dy) in [(half, half), (0, half), (half, 0), (0, 0)] {
                stack.push((x0 + dx, y0 + dy, half));
            }
        } else {
            leaves.push(QuadtreeLeaf { x0, y0, size, w, h, mean_color });
        }
    }
    Ok(leaves)
}

/// Distance from `query` to its `k`-th nearest point.
pub fn knn_radius(index: &PointIndex, query: PixelPos, k: usize) -> Result<f64> {
    if k == 0 || index.len() < k {
        return Err(Error::invalid(format!(
            "k-nearest radius needs 1 <= k <= {} points, got k = {k}",
            index.len()
        )));
    }
    Ok(index.knn(query, k)[k - 1].dist2.sqrt())
}

/// `K / (pi r_K^2)`: points per square pixel inside the `K`-nearest circle.
pub fn local_density(index: &PointIndex, query: PixelPos, k: usize) -> Result<f64> {
    let r = knn_radius(index, query, k)?;
    if r <= 0.0 {
        return Err(Error::degenerate(format!("{k} points coincide with the query")));
    }
    Ok(k as f64 / (std::f64::consts::PI * r * r))
}

/// Affine rescale of `values` from the clipped range
/// `[max(mu - 3 sd, min), min(mu + 3 sd, max)]` onto `[0, 1]`, then clamp.
/// A degenerate range maps everything to zero.
pub fn three_sigma_normalize(grid: &ScalarGrid) -> Result<ProbabilityMap> {
    let v = &grid.values;
    if v.is_empty() {
        return Err(Error::invalid("cannot normalize an empty grid"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("non-finite value in grid"));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let hi = (mean + 3.0 * sd).min(max);
    let lo = (mean - 3.0 * sd).max(min);
    if !(hi > lo) {
        return Ok(ProbabilityMap::zeros(grid.width, grid.height));
    }
    let values = v.iter().map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0)).collect();
    ProbabilityMap::from_values(grid.width, grid.height, values)
}

/// Smallest neighbor radius used in the pseudo map, in pixels.
pub const MIN_RADIUS: f64 = 1e-6;

/// Probability map from Gaussian positions: `K / sqrt(r_K)` at every pixel
/// center, then three-sigma normalization.
pub fn pseudo_ppm(positions: &[PixelPos], width: usize, height: usize, k: usize) -> Result<ProbabilityMap> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("map must be non-empty"));
    }
    if k == 0 || positions.len() < k {
        return Err(Error::invalid(format!(
            "pseudo map needs at least k = {k} positions, got {}",
            positions.len()
        )));
    }
    // Canonical order makes the result independent of the input order.
    let mut sorted = positions.to_vec();
    sorted.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    let index = PointIndex::new(&sorted);
    let values: Vec<f64> = (0..height)
        .into_par_iter()
        .flat_map_iter(|y| {
            let index = &index;
            (0..width).map(move |x| {
                let q = PixelPos::new(x as f64 + 0.5, y as f64 + 0.5);
                let r = index.knn(q, k)[k - 1].dist2.sqrt().max(MIN_RADIUS);
                k as f64 / r.sqrt()
            })
        })
        .collect();
    three_sigma_normalize(&ScalarGrid { width, height, values })
}

/// Normalized Sobel magnitude of the luma channel.
pub fn gradient_ppm(img: &ImageBuffer) -> Result<ProbabilityMap> {
    three_sigma_normalize(&luma_gradient_magnitude(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::knn_brute_force;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_points(n: usize, step: f64, offset: f64) -> Vec<PixelPos> {
        (0..n)
            .flat_map(|y| (0..n).map(move |x| PixelPos::new(offset + step * x as f64, offset + step * y as f64)))
            .collect()
    }

    #[test]
    fn quadtree_constant_is_one_leaf() {
        let img = ImageBuffer::filled(37, 20, [0.2, 0.4, 0.6]);
        let leaves = quadtree_partition(&img, QUADTREE_MSE, QUADTREE_MIN_SIZE).unwrap();
        assert_eq!(leaves.len(), 1);
        assert_eq!((leaves[0].w, leaves[0].h, leaves[0].size), (37, 20, 64));
    }

    #[test]
    fn quadtree_checkerboard_reaches_min_size() {
        let img = ImageBuffer::from_fn(8, 8, |x, y| [((x + y) % 2) as f32; 3]);
        let leaves = quadtree_partition(&img, QUADTREE_MSE, QUADTREE_MIN_SIZE).unwrap();
        assert_eq!(leaves.len(), 4);
        assert!(leaves.iter().all(|l| l.size == 4 && l.area() == 16));
    }

    fn assert_tiles(leaves: &[QuadtreeLeaf], w: usize, h: usize) {
        let mut cover = vec![0u8; w * h];
        for l in leaves {
            for y in l.y0..l.y0 + l.h {
                for x in l.x0..l.x0 + l.w {
                    cover[y * w + x] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&c| c == 1));
        assert_eq!(leaves.iter().map(|l| l.area()).sum::<usize>(), w * h);
    }

    #[test]
    fn quadtree_zero_threshold_splits_everything() {
        let img = ImageBuffer::from_fn(30, 19, |x, y| if x < 12 && y < 8 { [0.0; 3] } else { [0.3, 0.1, (x % 5) as f32 / 5.0] });
        let leaves = quadtree_partition(&img, 0.0, 4).unwrap();
        assert_tiles(&leaves, 30, 19);
        for l in &leaves {
            let (_, mse) = block_stats(&img, l.x0, l.y0, l.w, l.h);
            assert!(l.size == 4 || mse == 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn quadtree_tiles_exactly(w in 1usize..50, h in 1usize..50, seed in 0u64..100, thr in 0.0f64..0.1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = ImageBuffer::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
            let leaves = quadtree_partition(&img, thr, 4).unwrap();
            assert_tiles(&leaves, w, h);
        }

        #[test]
        fn normalized_in_unit_range(values in proptest::collection::vec(-1e3f64..1e3, 1..60)) {
            let n = values.len();
            let m = three_sigma_normalize(&ScalarGrid { width: n, height: 1, values }).unwrap();
            prop_assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn knn_radius_examples() {
        let pts = grid_points(10, 1.0, 0.0);
        let index = PointIndex::new(&pts);
        assert_eq!(knn_radius(&index, PixelPos::new(3.0, 4.0), 1).unwrap(), 0.0);
        assert_abs_diff_eq!(knn_radius(&index, PixelPos::new(3.5, 4.5), 4).unwrap(), 0.5f64.sqrt(), epsilon = 1e-15);
        assert!(knn_radius(&index, PixelPos::new(0.0, 0.0), 101).is_err());
        assert!(local_density(&index, PixelPos::new(3.0, 4.0), 1).is_err());
    }

    #[test]
    fn knn_radius_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in [10usize, 255, 256, 1000] {
            let pts: Vec<_> = (0..n).map(|_| PixelPos::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..60.0))).collect();
            let index = PointIndex::new(&pts);
            for _ in 0..100 {
                let q = PixelPos::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..60.0));
                let k = 10.min(n);
                let brute = knn_brute_force(&pts, q, k)[k - 1].dist2.sqrt();
                assert_eq!(knn_radius(&index, q, k).unwrap(), brute);
            }
        }
    }

    #[test]
    fn density_scaling_laws() {
        let pts = grid_points(40, 1.0, 0.0);
        let index = PointIndex::new(&pts);
        let q = PixelPos::new(20.3, 19.6);
        let d = local_density(&index, q, 10).unwrap();
        assert!((d - 1.0).abs() < 0.3);
        let r = knn_radius(&index, q, 10).unwrap();
        assert_abs_diff_eq!(d * std::f64::consts::PI * r * r, 10.0, epsilon = 1e-12);
        let doubled: Vec<_> = pts.iter().map(|p| PixelPos::new(2.0 * p.x, 2.0 * p.y)).collect();
        let d2 = local_density(&PointIndex::new(&doubled), PixelPos::new(2.0 * q.x, 2.0 * q.y), 10).unwrap();
        assert_abs_diff_eq!(d2, d / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn three_sigma_pure_min_max_without_outliers() {
        let values = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let m = three_sigma_normalize(&ScalarGrid { width: 5, height: 1, values }).unwrap();
        assert_eq!(m.values(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn three_sigma_clips_outlier() {
        let mut values = vec![0.5; 100];
        values.push(1000.0);
        let mean = 1050.0 / 101.0;
        let sd = ((100.0 * (0.5 - mean) * (0.5 - mean) + (1000.0 - mean) * (1000.0 - mean)) / 101.0f64).sqrt();
        assert_abs_diff_eq!(mean, 10.396, epsilon = 1e-3);
        assert_abs_diff_eq!(sd, 98.96, epsilon = 1e-2);
        let m = three_sigma_normalize(&ScalarGrid { width: 101, height: 1, values }).unwrap();
        assert!(m.values()[..100].iter().all(|&v| v == 0.0));
        assert_eq!(m.values()[100], 1.0);
    }

    #[test]
    fn three_sigma_constant_is_zero() {
        let m = three_sigma_normalize(&ScalarGrid { width: 3, height: 2, values: vec![7.0; 6] }).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pseudo_uniform_grid_is_flat() {
        let interior_spread = |values: &dyn Fn(usize, usize) -> f64| {
            let v: Vec<f64> = (16..48).flat_map(|y| (16..48).map(move |x| (x, y))).map(|(x, y)| values(x, y)).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            sd / mean
        };
        // One position per 2x2 block and one per pixel.
        for pts in [grid_points(32, 2.0, 1.0), grid_points(64, 1.0, 0.5)] {
            let m = pseudo_ppm(&pts, 64, 64, DEFAULT_K).unwrap();
            assert!(interior_spread(&|x, y| m.get(x, y)) < 0.05);
        }
        // Coarse grid out of phase with the pixels: the raw K / sqrt(r) field stays flat.
        let pts = grid_points(16, 4.0, 2.0);
        let index = PointIndex::new(&pts);
        let raw = |x: usize, y: usize| {
            let r = knn_radius(&index, PixelPos::new(x as f64 + 0.5, y as f64 + 0.5), DEFAULT_K).unwrap();
            DEFAULT_K as f64 / r.sqrt()
        };
        assert!(interior_spread(&raw) < 0.05);
    }

    #[test]
    fn pseudo_prefers_dense_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts: Vec<_> = (0..200).map(|_| PixelPos::new(rng.gen_range(0.0..32.0), rng.gen_range(0.0..64.0))).collect();
        pts.extend((0..20).map(|_| PixelPos::new(rng.gen_range(32.0..64.0), rng.gen_range(0.0..64.0))));
        let m = pseudo_ppm(&pts, 64, 64, DEFAULT_K).unwrap();
        let mean = |x0: usize, x1: usize| (0..64).flat_map(|y| (x0..x1).map(move |x| (x, y))).map(|(x, y)| m.get(x, y)).sum::<f64>() / ((x1 - x0) * 64) as f64;
        assert!(mean(0, 32) > mean(32, 64));
    }

    #[test]
    fn pseudo_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<_> = (0..300).map(|_| PixelPos::new(rng.gen_range(0.0..40.0), rng.gen_range(0.0..30.0))).collect();
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(pseudo_ppm(&pts, 40, 30, 10).unwrap(), pseudo_ppm(&shuffled, 40, 30, 10).unwrap());
        assert!(pseudo_ppm(&pts[..9], 40, 30, 10).is_err());
    }

    #[test]
    fn pseudo_superset_raises_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base: Vec<_> = (0..150).map(|_| PixelPos::new(rng.gen_range(0.0..48.0), rng.gen_range(0.0..48.0))).collect();
        let mut more = base.clone();
        more.extend((0..150).map(|_| PixelPos::new(rng.gen_range(0.0..16.0), rng.gen_range(0.0..16.0))));
        let (a, b) = (pseudo_ppm(&base, 48, 48, 10).unwrap(), pseudo_ppm(&more, 48, 48, 10).unwrap());
        let region = |m: &ProbabilityMap| (0..16).flat_map(|y| (0..16).map(move |x| (x, y))).map(|(x, y)| m.get(x, y)).sum::<f64>();
        assert!(region(&b) >= region(&a));
    }

    #[test]
    fn gradient_map_examples() {
        let flat = ImageBuffer::filled(12, 9, [0.3, 0.3, 0.3]);
        assert!(gradient_ppm(&flat).unwrap().values().iter().all(|&v| v == 0.0));
        let step = ImageBuffer::from_fn(8, 6, |x, _| if x < 4 { [0.0; 3] } else { [1.0; 3] });
        let m = gradient_ppm(&step).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let expected = if x == 3 || x == 4 { 1.0 } else { 0.0 };
                assert_eq!(m.get(x, y), expected);
            }
        }
        assert!(gradient_ppm(&ImageBuffer::new(2, 5)).is_err());
    }

    #[test]
    fn ppmf_round_trip_and_errors() {
        let m = ProbabilityMap::from_values(3, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let mut buf = Vec::new();
        m.write_ppmf(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 24);
        assert_eq!(&buf[..4], b"PPMF");
        assert_eq!(ProbabilityMap::decode_ppmf(&buf).unwrap(), m);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(ProbabilityMap::decode_ppmf(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(ProbabilityMap::decode_ppmf(&buf[..30]), Err(Error::Format { offset: 30, .. })));
        let mut pgm = Vec::new();
        m.write_pgm(&mut pgm).unwrap();
        assert_eq!(&pgm[..11], b"P5\n3 2\n255\n");
        assert_eq!(&pgm[11..], &[0, 64, 128, 191, 255, 32]);
    }
}
